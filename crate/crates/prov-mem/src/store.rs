//! The integrated memory store: write path (metadata, signing, Merkle
//! logging, lineage edges) and the verified read path.
//!
//! The store is deterministic by construction: timestamps come from a
//! logical nanosecond clock and nonces/entry ids from a seeded PRNG, so
//! the same seed and call sequence always produce byte-identical entries,
//! leaves, and roots.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::codec::{encode_entry, encode_signed_view, CodecError};
use crate::crypto::{Keypair, PrincipalRegistry, RegistryError};
use crate::entry::{sha256, Eid, ProvEntry, TrustLevel, SIG_LEN};
use crate::lineage::{propagate_trust, LineageDag};
use crate::merkle::{
    leaf_hash_for_entry, tombstone_preimage, Hash32, InclusionProof, MerkleError, MerkleLog,
};
use crate::retrieval::{AuditEvent, AuditKind};

/// Fixed epoch of the logical clock (nanoseconds).
const CLOCK_EPOCH_NS: u64 = 1_700_000_000_000_000_000;
/// Logical clock advance per write: one millisecond, so UUIDv7 ids stay
/// strictly monotone in write order.
const CLOCK_STEP_NS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown principal {0}")]
    UnknownPrincipal(String),
    #[error("unknown parent {0}")]
    UnknownParent(String),
    #[error("parents/weights length mismatch: {parents} vs {weights}")]
    LengthMismatch { parents: usize, weights: usize },
    #[error("unknown entry {0}")]
    UnknownEntry(String),
    #[error("signature verification failed for entry {0}")]
    SignatureInvalid(String),
    #[error("inclusion verification failed for entry {0}")]
    InclusionInvalid(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

/// Store construction parameters.
#[derive(Debug, Clone, Copy)]
pub struct StoreConfig {
    /// Drives nonce, entry-id, and any other store-internal randomness.
    pub seed: u64,
    /// Declassification threshold used by trust propagation on write.
    pub tau: f64,
    /// Merkle checkpoint cadence.
    pub checkpoint_interval: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            tau: 0.0,
            checkpoint_interval: crate::merkle::DEFAULT_CHECKPOINT_INTERVAL,
        }
    }
}

/// Arguments of a single write.
pub struct WriteRequest<'a> {
    pub writer_label: &'a str,
    pub content: &'a [u8],
    /// Original source blob; hashed into `h_src` (empty hashes the empty string).
    pub source_blob: &'a [u8],
    /// Write-time prompt context; hashed into `h_ctx`.
    pub context: &'a [u8],
    pub parents: Vec<Eid>,
    pub weights: Vec<f64>,
    pub trust_override: Option<TrustLevel>,
}

impl<'a> WriteRequest<'a> {
    pub fn new(writer_label: &'a str, content: &'a [u8]) -> Self {
        Self {
            writer_label,
            content,
            source_blob: &[],
            context: &[],
            parents: Vec::new(),
            weights: Vec::new(),
            trust_override: None,
        }
    }

    pub fn with_parents(mut self, parents: Vec<Eid>, weights: Vec<f64>) -> Self {
        self.parents = parents;
        self.weights = weights;
        self
    }

    pub fn with_trust_override(mut self, trust: TrustLevel) -> Self {
        self.trust_override = Some(trust);
        self
    }

    pub fn with_source(mut self, source_blob: &'a [u8], context: &'a [u8]) -> Self {
        self.source_blob = source_blob;
        self.context = context;
        self
    }
}

/// Result of the full verified read: signature checked against the current
/// registry key, inclusion checked against the current root.
#[derive(Debug, Clone)]
pub struct VerifiedEntry {
    pub entry: ProvEntry,
    pub leaf_index: u64,
    pub proof: InclusionProof,
    pub trust: TrustLevel,
}

#[derive(Debug, Clone)]
pub struct TombstoneRecord {
    pub eid: Eid,
    pub reason: String,
    pub leaf_index: u64,
    /// Host signature over the tombstone preimage, when a host identity is
    /// configured; deletions are then themselves attestable events.
    pub sigma: Option<[u8; SIG_LEN]>,
}

struct Stored {
    entry: ProvEntry,
    leaf_index: u64,
}

pub struct MemoryStore {
    entries: BTreeMap<Eid, Stored>,
    write_order: Vec<Eid>,
    log: MerkleLog,
    registry: PrincipalRegistry,
    /// Writer label (`user`, `agent:1`, ...) to registry principal id.
    bindings: BTreeMap<String, String>,
    lineage: LineageDag,
    tombstoned: BTreeSet<Eid>,
    tombstones: Vec<TombstoneRecord>,
    host: Option<Keypair>,
    next_ts_ns: u64,
    rng: ChaCha20Rng,
    tau: f64,
    audit: Vec<AuditEvent>,
    next_audit_seq: u64,
}

impl MemoryStore {
    pub fn new(config: StoreConfig) -> Self {
        Self {
            entries: BTreeMap::new(),
            write_order: Vec::new(),
            log: MerkleLog::new(config.checkpoint_interval),
            registry: PrincipalRegistry::new(),
            bindings: BTreeMap::new(),
            lineage: LineageDag::new(),
            tombstoned: BTreeSet::new(),
            tombstones: Vec::new(),
            host: None,
            next_ts_ns: CLOCK_EPOCH_NS,
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            tau: config.tau,
            audit: Vec::new(),
            next_audit_seq: 0,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(StoreConfig { seed, ..StoreConfig::default() })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    /// Registers a writer label with its public key; the key also signs
    /// tombstones when the label is `user` and no host key is set yet.
    pub fn register_writer(&mut self, label: &str, keypair: &Keypair) -> Result<String, StoreError> {
        if self.bindings.contains_key(label) {
            return Err(RegistryError::PrincipalAlreadyRegistered(label.to_string()).into());
        }
        let id = self.registry.register(keypair.public_key())?;
        self.bindings.insert(label.to_string(), id.clone());
        if self.host.is_none() && label == "user" {
            self.host = Some(keypair.clone());
        }
        Ok(id)
    }

    /// Rotates the key bound to a writer label. Entries signed under the
    /// old key stop verifying on the read path.
    pub fn rotate_key(&mut self, label: &str, new_keypair: &Keypair) -> Result<(), StoreError> {
        let id = self
            .bindings
            .get(label)
            .ok_or_else(|| StoreError::UnknownPrincipal(label.to_string()))?;
        self.registry.update_key(id, new_keypair.public_key())?;
        Ok(())
    }

    pub fn registry(&self) -> &PrincipalRegistry {
        &self.registry
    }

    pub fn principal_id_of(&self, label: &str) -> Option<&str> {
        self.bindings.get(label).map(String::as_str)
    }

    /// Commits a new entry: metadata, trust propagation, signature, Merkle
    /// leaf, and lineage edges.
    pub fn write(&mut self, keypair: &Keypair, req: WriteRequest<'_>) -> Result<ProvEntry, StoreError> {
        let principal = self
            .bindings
            .get(req.writer_label)
            .ok_or_else(|| StoreError::UnknownPrincipal(req.writer_label.to_string()))?;
        let registered = self
            .registry
            .lookup(principal)
            .ok_or_else(|| StoreError::UnknownPrincipal(req.writer_label.to_string()))?;
        if *registered != keypair.public_key() {
            return Err(StoreError::UnknownPrincipal(req.writer_label.to_string()));
        }
        if req.parents.len() != req.weights.len() {
            return Err(StoreError::LengthMismatch {
                parents: req.parents.len(),
                weights: req.weights.len(),
            });
        }
        let mut parent_trusts = Vec::with_capacity(req.parents.len());
        for (p, &w) in req.parents.iter().zip(&req.weights) {
            let stored = self
                .entries
                .get(p)
                .ok_or_else(|| StoreError::UnknownParent(p.to_hex()))?;
            parent_trusts.push((stored.entry.trust, w));
        }
        let trust = req
            .trust_override
            .unwrap_or_else(|| propagate_trust(&parent_trusts, self.tau));

        let ts = self.next_ts_ns;
        self.next_ts_ns += CLOCK_STEP_NS;
        let mut rand10 = [0u8; 10];
        self.rng.fill_bytes(&mut rand10);
        let eid = Eid::new_v7(ts / 1_000_000, rand10);
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);

        let mut entry = ProvEntry {
            eid,
            content: req.content.to_vec(),
            writer: req.writer_label.to_string(),
            h_src: sha256(req.source_blob),
            h_ctx: sha256(req.context),
            trust,
            parents: req.parents.clone(),
            parent_weights: req.weights.clone(),
            ts,
            nonce,
            sigma: [0u8; SIG_LEN],
        };
        entry.sigma = keypair.sign(&encode_signed_view(&entry)?);

        let leaf = leaf_hash_for_entry(&entry.eid, &entry.sigma);
        let leaf_index = self.log.append(leaf);
        self.lineage.record(eid, &req.parents, &req.weights);
        self.entries.insert(eid, Stored { entry: entry.clone(), leaf_index });
        self.write_order.push(eid);
        Ok(entry)
    }

    /// Full verified read: signature against the current registry key,
    /// then inclusion against the current root.
    pub fn verify_full(&self, eid: &Eid) -> Result<VerifiedEntry, StoreError> {
        let stored = self
            .entries
            .get(eid)
            .ok_or_else(|| StoreError::UnknownEntry(eid.to_hex()))?;
        if !self.signature_ok(&stored.entry) {
            return Err(StoreError::SignatureInvalid(eid.to_hex()));
        }
        let leaf = leaf_hash_for_entry(&stored.entry.eid, &stored.entry.sigma);
        let proof = self.log.prove_inclusion(stored.leaf_index)?;
        if !crate::merkle::verify_inclusion(&self.log.root(), &leaf, &proof) {
            return Err(StoreError::InclusionInvalid(eid.to_hex()));
        }
        Ok(VerifiedEntry {
            entry: stored.entry.clone(),
            leaf_index: stored.leaf_index,
            proof,
            trust: stored.entry.trust,
        })
    }

    /// Signature check only (no inclusion proof); used per-entry on the
    /// retrieval path.
    pub fn signature_ok(&self, entry: &ProvEntry) -> bool {
        let Some(principal) = self.bindings.get(&entry.writer) else {
            return false;
        };
        let Ok(msg) = encode_signed_view(entry) else {
            return false;
        };
        self.registry.verify(principal, &msg, &entry.sigma)
    }

    /// Inclusion check against the current root.
    pub fn inclusion_ok(&self, eid: &Eid) -> bool {
        let Some(stored) = self.entries.get(eid) else {
            return false;
        };
        let leaf = leaf_hash_for_entry(&stored.entry.eid, &stored.entry.sigma);
        match self.log.prove_inclusion(stored.leaf_index) {
            Ok(proof) => crate::merkle::verify_inclusion(&self.log.root(), &leaf, &proof),
            Err(_) => false,
        }
    }

    /// Non-destructive deletion: the entry leaves retrieval but stays
    /// readable for audit and inclusion-provable. Repeated deletion appends
    /// a fresh tombstone leaf each time.
    pub fn delete(&mut self, eid: &Eid, reason: &str) -> Result<u64, StoreError> {
        if !self.entries.contains_key(eid) {
            return Err(StoreError::UnknownEntry(eid.to_hex()));
        }
        self.tombstoned.insert(*eid);
        let leaf_index = self.log.append_tombstone(eid, reason);
        let sigma = self
            .host
            .as_ref()
            .map(|k| k.sign(&tombstone_preimage(eid, reason)));
        self.tombstones.push(TombstoneRecord {
            eid: *eid,
            reason: reason.to_string(),
            leaf_index,
            sigma,
        });
        Ok(leaf_index)
    }

    pub fn is_tombstoned(&self, eid: &Eid) -> bool {
        self.tombstoned.contains(eid)
    }

    pub fn tombstones(&self) -> &[TombstoneRecord] {
        &self.tombstones
    }

    pub fn entry(&self, eid: &Eid) -> Option<&ProvEntry> {
        self.entries.get(eid).map(|s| &s.entry)
    }

    pub fn leaf_index_of(&self, eid: &Eid) -> Option<u64> {
        self.entries.get(eid).map(|s| s.leaf_index)
    }

    pub fn contains(&self, eid: &Eid) -> bool {
        self.entries.contains_key(eid)
    }

    /// Entry ids in write order.
    pub fn write_order(&self) -> &[Eid] {
        &self.write_order
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn log(&self) -> &MerkleLog {
        &self.log
    }

    pub fn root(&self) -> Hash32 {
        self.log.root()
    }

    pub fn lineage(&self) -> &LineageDag {
        &self.lineage
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit
    }

    /// Appends an audit event with the next sequence number.
    pub(crate) fn push_audit(&mut self, kind: AuditKind, eid: String, detail: String) -> AuditEvent {
        let event = AuditEvent { kind, eid, detail, seq: self.next_audit_seq };
        self.next_audit_seq += 1;
        self.audit.push(event.clone());
        event
    }

    /// Records a gate-produced audit event into the store trail, assigning
    /// the next sequence number (the gate itself is pure and emits seq 0).
    pub fn record_gate_audit(&mut self, event: &AuditEvent) -> AuditEvent {
        self.push_audit(event.kind, event.eid.clone(), event.detail.clone())
    }

    /// Inserts a record without any write-path verification, modeling an
    /// adversary who reaches the store through a surface that performs no
    /// checks (and giving fault-injection tests a way in). The read path is
    /// expected to drop what this admits.
    pub fn insert_unverified(&mut self, entry: ProvEntry) -> u64 {
        let leaf = leaf_hash_for_entry(&entry.eid, &entry.sigma);
        let leaf_index = self.log.append(leaf);
        let eid = entry.eid;
        self.lineage.record(eid, &entry.parents, &entry.parent_weights);
        self.entries.insert(eid, Stored { entry, leaf_index });
        self.write_order.push(eid);
        leaf_index
    }

    /// Mutates a stored entry in place (bypassing signing), for
    /// fault-injection tests. Returns false when the entry is absent.
    pub fn tamper_entry(&mut self, eid: &Eid, f: impl FnOnce(&mut ProvEntry)) -> bool {
        match self.entries.get_mut(eid) {
            Some(stored) => {
                f(&mut stored.entry);
                true
            }
            None => false,
        }
    }

    /// Concatenated canonical encodings of all entries in write order (the
    /// entry-file persistence format).
    pub fn export_entries(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        for eid in &self.write_order {
            out.extend(encode_entry(&self.entries[eid].entry)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_user() -> (MemoryStore, Keypair) {
        let mut store = MemoryStore::with_seed(7);
        let user = Keypair::from_seed([1; 32]);
        store.register_writer("user", &user).unwrap();
        (store, user)
    }

    #[test]
    fn write_then_verify_full() {
        let (mut store, user) = store_with_user();
        let entry = store.write(&user, WriteRequest::new("user", b"hello")).unwrap();
        assert_eq!(entry.trust, TrustLevel::Trusted);
        let verified = store.verify_full(&entry.eid).unwrap();
        assert_eq!(verified.entry, entry);
        assert_eq!(verified.leaf_index, 0);
    }

    #[test]
    fn unregistered_writer_is_rejected() {
        let (mut store, _) = store_with_user();
        let stranger = Keypair::from_seed([9; 32]);
        let err = store.write(&stranger, WriteRequest::new("agent:1", b"x")).unwrap_err();
        assert!(matches!(err, StoreError::UnknownPrincipal(_)));
        // registered label but the wrong key is just as unknown
        let err = store.write(&stranger, WriteRequest::new("user", b"x")).unwrap_err();
        assert!(matches!(err, StoreError::UnknownPrincipal(_)));
    }

    #[test]
    fn unknown_parent_is_rejected() {
        let (mut store, user) = store_with_user();
        let ghost = Eid([0xee; 16]);
        let err = store
            .write(&user, WriteRequest::new("user", b"x").with_parents(vec![ghost], vec![1.0]))
            .unwrap_err();
        assert!(matches!(err, StoreError::UnknownParent(_)));
    }

    #[test]
    fn parent_weight_length_mismatch() {
        let (mut store, user) = store_with_user();
        let e = store.write(&user, WriteRequest::new("user", b"p")).unwrap();
        let err = store
            .write(&user, WriteRequest::new("user", b"c").with_parents(vec![e.eid], vec![]))
            .unwrap_err();
        assert!(matches!(err, StoreError::LengthMismatch { .. }));
    }

    #[test]
    fn external_parent_propagates_at_default_tau() {
        let (mut store, user) = store_with_user();
        let doc = store
            .write(&user, WriteRequest::new("user", b"doc").with_trust_override(TrustLevel::External))
            .unwrap();
        assert_eq!(doc.trust, TrustLevel::External);
        let summary = store
            .write(&user, WriteRequest::new("user", b"sum").with_parents(vec![doc.eid], vec![1.0]))
            .unwrap();
        assert_eq!(summary.trust, TrustLevel::External);
    }

    #[test]
    fn key_rotation_invalidates_old_entries() {
        let (mut store, user) = store_with_user();
        let entry = store.write(&user, WriteRequest::new("user", b"old")).unwrap();
        store.rotate_key("user", &Keypair::from_seed([2; 32])).unwrap();
        let err = store.verify_full(&entry.eid).unwrap_err();
        assert!(matches!(err, StoreError::SignatureInvalid(_)));
    }

    #[test]
    fn tampered_content_fails_signature() {
        let (mut store, user) = store_with_user();
        let entry = store.write(&user, WriteRequest::new("user", b"honest")).unwrap();
        assert!(store.tamper_entry(&entry.eid, |e| e.content[0] ^= 1));
        assert!(matches!(
            store.verify_full(&entry.eid).unwrap_err(),
            StoreError::SignatureInvalid(_)
        ));
    }

    #[test]
    fn delete_keeps_inclusion_provable() {
        let (mut store, user) = store_with_user();
        let entry = store.write(&user, WriteRequest::new("user", b"gone")).unwrap();
        let t1 = store.delete(&entry.eid, "cleanup").unwrap();
        assert!(store.is_tombstoned(&entry.eid));
        assert!(store.verify_full(&entry.eid).is_ok(), "original stays provable");
        let t2 = store.delete(&entry.eid, "cleanup").unwrap();
        assert_ne!(t1, t2, "repeat deletion appends a fresh tombstone");
        assert!(store.tombstones()[0].sigma.is_some(), "host-signed tombstone");
        assert!(matches!(
            store.delete(&Eid([0; 16]), "nope").unwrap_err(),
            StoreError::UnknownEntry(_)
        ));
    }

    #[test]
    fn eids_monotone_in_write_order() {
        let (mut store, user) = store_with_user();
        let mut prev: Option<Eid> = None;
        for i in 0..20u8 {
            let e = store.write(&user, WriteRequest::new("user", &[i])).unwrap();
            if let Some(p) = prev {
                assert!(p < e.eid);
            }
            prev = Some(e.eid);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let run = || {
            let (mut store, user) = store_with_user();
            let a = store.write(&user, WriteRequest::new("user", b"one")).unwrap();
            let _ = store.write(&user, WriteRequest::new("user", b"two")).unwrap();
            (encode_entry(&a).unwrap(), store.root())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn export_entries_decodes_in_order() {
        let (mut store, user) = store_with_user();
        let a = store.write(&user, WriteRequest::new("user", b"a")).unwrap();
        let b = store.write(&user, WriteRequest::new("user", b"b")).unwrap();
        let bytes = store.export_entries().unwrap();
        let decoded = crate::codec::decode_entry_stream(&bytes).unwrap();
        assert_eq!(decoded, vec![a, b]);
    }
}
