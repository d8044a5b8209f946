//! RFC 6962-style append-only Merkle log with inclusion proofs,
//! periodic checkpoints, and tombstone leaves.
//!
//! Leaves are domain-separated (`SHA256(0x00 || data)`), interior nodes
//! hash as `SHA256(0x01 || left || right)`, and the split point is the
//! largest power of two strictly below the subtree size. Deletion is never
//! destructive: a tombstone is just another leaf (prefixed `ts:`) naming
//! the original entry, which itself stays inclusion-provable forever.

use sha2::{Digest, Sha256};

use crate::entry::{Eid, EID_LEN, HASH_LEN, SIG_LEN};

pub type Hash32 = [u8; HASH_LEN];

/// Longest tombstone reason retained in the leaf preimage, in bytes.
pub const MAX_TOMBSTONE_REASON: usize = 1024;

/// Default checkpoint cadence.
pub const DEFAULT_CHECKPOINT_INTERVAL: usize = 256;

/// Subtree size above which the parallel root computation splits work.
#[cfg(feature = "parallel")]
const PAR_LEAF_THRESHOLD: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("leaf index {index} out of range for log of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("malformed log file: {0}")]
    MalformedFile(String),
}

/// `SHA256(0x00 || data)` — the RFC 6962 leaf hash.
pub fn leaf_hash(data: &[u8]) -> Hash32 {
    let mut h = Sha256::new();
    h.update([0x00]);
    h.update(data);
    h.finalize().into()
}

/// `SHA256(0x01 || left || right)` — the RFC 6962 node hash.
pub fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    let mut h = Sha256::new();
    h.update([0x01]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// Leaf hash committing an entry: `SHA256(0x00 || eid || sigma)`.
pub fn leaf_hash_for_entry(eid: &Eid, sigma: &[u8; SIG_LEN]) -> Hash32 {
    let mut data = [0u8; EID_LEN + SIG_LEN];
    data[..EID_LEN].copy_from_slice(eid.as_bytes());
    data[EID_LEN..].copy_from_slice(sigma);
    leaf_hash(&data)
}

/// Preimage of a tombstone leaf: `"ts:" || eid || reason`, with the reason
/// capped at [`MAX_TOMBSTONE_REASON`] bytes (truncated on a char boundary).
pub fn tombstone_preimage(eid: &Eid, reason: &str) -> Vec<u8> {
    let mut cut = reason.len().min(MAX_TOMBSTONE_REASON);
    while !reason.is_char_boundary(cut) {
        cut -= 1;
    }
    let mut data = Vec::with_capacity(3 + EID_LEN + cut);
    data.extend_from_slice(b"ts:");
    data.extend_from_slice(eid.as_bytes());
    data.extend_from_slice(reason[..cut].as_bytes());
    data
}

/// Audit path proving one leaf is in a tree of a given size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub audit_path: Vec<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub size: u64,
    pub root: Hash32,
}

#[derive(Debug, Clone)]
pub struct MerkleLog {
    leaves: Vec<Hash32>,
    checkpoints: Vec<Checkpoint>,
    checkpoint_interval: usize,
}

impl Default for MerkleLog {
    fn default() -> Self {
        Self::new(DEFAULT_CHECKPOINT_INTERVAL)
    }
}

impl MerkleLog {
    pub fn new(checkpoint_interval: usize) -> Self {
        assert!(checkpoint_interval > 0, "checkpoint interval must be positive");
        Self {
            leaves: Vec::new(),
            checkpoints: Vec::new(),
            checkpoint_interval,
        }
    }

    pub fn size(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn leaf(&self, index: u64) -> Option<&Hash32> {
        self.leaves.get(index as usize)
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Appends a leaf hash; returns its index. Records a checkpoint when
    /// the new size is a multiple of the checkpoint interval.
    pub fn append(&mut self, leaf: Hash32) -> u64 {
        let index = self.leaves.len() as u64;
        self.leaves.push(leaf);
        if self.leaves.len() % self.checkpoint_interval == 0 {
            let size = self.leaves.len() as u64;
            let root = self.root();
            self.checkpoints.push(Checkpoint { size, root });
        }
        index
    }

    /// Appends a tombstone leaf for `eid`; the original leaf is untouched.
    pub fn append_tombstone(&mut self, eid: &Eid, reason: &str) -> u64 {
        self.append(leaf_hash(&tombstone_preimage(eid, reason)))
    }

    /// Merkle tree head over all current leaves.
    pub fn root(&self) -> Hash32 {
        #[cfg(feature = "parallel")]
        {
            self.root_parallel()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.root_sequential()
        }
    }

    /// Tree head recomputed over the first `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Hash32, MerkleError> {
        if size > self.size() {
            return Err(MerkleError::IndexOutOfRange {
                index: size,
                size: self.size(),
            });
        }
        Ok(subtree_root_seq(&self.leaves[..size as usize]))
    }

    pub fn root_sequential(&self) -> Hash32 {
        subtree_root_seq(&self.leaves)
    }

    #[cfg(feature = "parallel")]
    pub fn root_parallel(&self) -> Hash32 {
        subtree_root_par(&self.leaves)
    }

    /// Builds the audit path for a leaf against the current tree head.
    pub fn prove_inclusion(&self, index: u64) -> Result<InclusionProof, MerkleError> {
        let size = self.size();
        if index >= size {
            return Err(MerkleError::IndexOutOfRange { index, size });
        }
        let mut path = Vec::new();
        audit_path(&self.leaves, index as usize, &mut path);
        Ok(InclusionProof {
            leaf_index: index,
            tree_size: size,
            audit_path: path,
        })
    }

    /// Serializes the log: leaf count and hashes, the checkpoint table, and
    /// the checkpoint interval, all little-endian and bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.leaves.len() * HASH_LEN);
        out.extend_from_slice(&(self.leaves.len() as u64).to_le_bytes());
        for leaf in &self.leaves {
            out.extend_from_slice(leaf);
        }
        out.extend_from_slice(&(self.checkpoints.len() as u64).to_le_bytes());
        for cp in &self.checkpoints {
            out.extend_from_slice(&cp.size.to_le_bytes());
            out.extend_from_slice(&cp.root);
        }
        out.extend_from_slice(&(self.checkpoint_interval as u64).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MerkleError> {
        let bad = |msg: &str| MerkleError::MalformedFile(msg.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], MerkleError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(e) => {
                    let s = &bytes[pos..e];
                    pos = e;
                    Ok(s)
                }
                None => Err(MerkleError::MalformedFile("truncated".to_string())),
            }
        };
        let n_leaves = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut leaves = Vec::with_capacity(n_leaves.min(1 << 20));
        for _ in 0..n_leaves {
            leaves.push(take(HASH_LEN)?.try_into().unwrap());
        }
        let n_cps = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut checkpoints = Vec::with_capacity(n_cps.min(1 << 16));
        for _ in 0..n_cps {
            let size = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let root: Hash32 = take(HASH_LEN)?.try_into().unwrap();
            checkpoints.push(Checkpoint { size, root });
        }
        let interval = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if interval == 0 {
            return Err(bad("zero checkpoint interval"));
        }
        let log = Self {
            leaves,
            checkpoints,
            checkpoint_interval: interval,
        };
        for cp in &log.checkpoints {
            let recomputed = log
                .root_at(cp.size)
                .map_err(|_| bad("checkpoint size beyond log"))?;
            if recomputed != cp.root {
                return Err(bad("checkpoint root mismatch"));
            }
        }
        Ok(log)
    }
}

/// Verifies an audit path (RFC 9162 §2.1.3.2). Returns `false` on any
/// inconsistency, including a proof replayed against a different tree size.
pub fn verify_inclusion(root: &Hash32, leaf: &Hash32, proof: &InclusionProof) -> bool {
    if proof.leaf_index >= proof.tree_size {
        return false;
    }
    let mut fnode = proof.leaf_index;
    let mut snode = proof.tree_size - 1;
    let mut r = *leaf;
    for p in &proof.audit_path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            r = node_hash(p, &r);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            r = node_hash(&r, p);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && r == *root
}

fn subtree_root_seq(leaves: &[Hash32]) -> Hash32 {
    match leaves.len() {
        0 => Sha256::digest([]).into(),
        1 => leaves[0],
        n => {
            let k = largest_power_of_two_below(n);
            node_hash(&subtree_root_seq(&leaves[..k]), &subtree_root_seq(&leaves[k..]))
        }
    }
}

#[cfg(feature = "parallel")]
fn subtree_root_par(leaves: &[Hash32]) -> Hash32 {
    match leaves.len() {
        0 => Sha256::digest([]).into(),
        1 => leaves[0],
        n if n < PAR_LEAF_THRESHOLD => subtree_root_seq(leaves),
        n => {
            let k = largest_power_of_two_below(n);
            let (l, r) = rayon::join(
                || subtree_root_par(&leaves[..k]),
                || subtree_root_par(&leaves[k..]),
            );
            node_hash(&l, &r)
        }
    }
}

fn audit_path(leaves: &[Hash32], index: usize, out: &mut Vec<Hash32>) {
    let n = leaves.len();
    if n <= 1 {
        return;
    }
    let k = largest_power_of_two_below(n);
    if index < k {
        audit_path(&leaves[..k], index, out);
        out.push(subtree_root_seq(&leaves[k..]));
    } else {
        audit_path(&leaves[k..], index - k, out);
        out.push(subtree_root_seq(&leaves[..k]));
    }
}

fn largest_power_of_two_below(n: usize) -> usize {
    debug_assert!(n > 1);
    let mut k = 1;
    while k * 2 < n {
        k *= 2;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tag: u8) -> Hash32 {
        leaf_hash(&[tag])
    }

    #[test]
    fn empty_root_is_sha256_of_empty_string() {
        let log = MerkleLog::default();
        assert_eq!(
            hex::encode(log.root()),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn single_leaf_root_is_the_leaf() {
        let mut log = MerkleLog::default();
        assert_eq!(log.append(leaf(1)), 0);
        assert_eq!(log.root(), leaf(1));
    }

    #[test]
    fn two_leaf_root_is_node_hash() {
        let mut log = MerkleLog::default();
        log.append(leaf(1));
        log.append(leaf(2));
        assert_eq!(log.root(), node_hash(&leaf(1), &leaf(2)));
    }

    #[test]
    fn two_leaf_proof_for_index_zero_is_sibling() {
        let mut log = MerkleLog::default();
        log.append(leaf(1));
        log.append(leaf(2));
        let proof = log.prove_inclusion(0).unwrap();
        assert_eq!(proof.audit_path, vec![leaf(2)]);
        assert!(verify_inclusion(&log.root(), &leaf(1), &proof));
    }

    #[test]
    fn single_leaf_proof_is_empty() {
        let mut log = MerkleLog::default();
        log.append(leaf(9));
        let proof = log.prove_inclusion(0).unwrap();
        assert!(proof.audit_path.is_empty());
        assert!(verify_inclusion(&log.root(), &leaf(9), &proof));
    }

    #[test]
    fn proof_does_not_replay_against_grown_tree() {
        let mut log = MerkleLog::default();
        for t in 0..5u8 {
            log.append(leaf(t));
        }
        let proof = log.prove_inclusion(2).unwrap();
        assert!(verify_inclusion(&log.root(), &leaf(2), &proof));
        log.append(leaf(5));
        assert!(!verify_inclusion(&log.root(), &leaf(2), &proof));
    }

    #[test]
    fn checkpoints_recorded_at_interval() {
        let mut log = MerkleLog::new(4);
        for t in 0..9u8 {
            log.append(leaf(t));
        }
        let cps = log.checkpoints();
        assert_eq!(cps.len(), 2);
        assert_eq!(cps[0].size, 4);
        assert_eq!(cps[1].size, 8);
        assert_eq!(log.root_at(4).unwrap(), cps[0].root);
        assert_eq!(log.root_at(8).unwrap(), cps[1].root);
    }

    #[test]
    fn tombstone_leaves_are_distinct_from_entry_leaves() {
        let eid = Eid([7; 16]);
        let sigma = [1u8; 64];
        let mut log = MerkleLog::default();
        let entry_idx = log.append(leaf_hash_for_entry(&eid, &sigma));
        let t1 = log.append_tombstone(&eid, "superseded");
        let t2 = log.append_tombstone(&eid, "superseded");
        assert_ne!(entry_idx, t1);
        assert_ne!(t1, t2);
        assert_ne!(log.leaf(entry_idx), log.leaf(t1));
        assert_eq!(log.leaf(t1), log.leaf(t2));
        // original leaf still provable after tombstoning
        let proof = log.prove_inclusion(entry_idx).unwrap();
        assert!(verify_inclusion(&log.root(), log.leaf(entry_idx).unwrap(), &proof));
    }

    #[test]
    fn tombstone_reason_is_capped() {
        let eid = Eid([7; 16]);
        let long = "x".repeat(4000);
        let pre = tombstone_preimage(&eid, &long);
        assert_eq!(pre.len(), 3 + 16 + MAX_TOMBSTONE_REASON);
    }

    #[test]
    fn persistence_round_trips() {
        let mut log = MerkleLog::new(3);
        for t in 0..7u8 {
            log.append(leaf(t));
        }
        let bytes = log.to_bytes();
        let back = MerkleLog::from_bytes(&bytes).unwrap();
        assert_eq!(back.root(), log.root());
        assert_eq!(back.size(), log.size());
        assert_eq!(back.checkpoints(), log.checkpoints());
        assert_eq!(back.to_bytes(), bytes);

        let mut corrupt = bytes.clone();
        let len = corrupt.len();
        corrupt[len - 9] ^= 1; // flip a checkpoint root byte
        assert!(MerkleLog::from_bytes(&corrupt).is_err());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_root_matches_sequential() {
        let mut log = MerkleLog::default();
        for t in 0..1500u16 {
            log.append(leaf_hash(&t.to_be_bytes()));
        }
        assert_eq!(log.root_parallel(), log.root_sequential());
    }
}
