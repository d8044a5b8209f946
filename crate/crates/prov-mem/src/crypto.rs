//! Per-principal Ed25519 signing and the host-local public-key registry.
//!
//! Registry identifiers are an 8-byte SHA-256 prefix of the public key,
//! hex-encoded. Duplicate registration is an error rather than a silent
//! overwrite, and key rotation is an explicit [`PrincipalRegistry::update_key`]
//! call: rebinding a principal id must never happen as a side effect.

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};

use crate::entry::{sha256, SIG_LEN};

pub const SEED_LEN: usize = 32;
pub const PUBKEY_LEN: usize = 32;
/// Hex length of a principal id (8-byte SHA-256 prefix of the public key).
pub const PRINCIPAL_ID_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("principal {0} already registered")]
    PrincipalAlreadyRegistered(String),
    #[error("unknown principal {0}")]
    UnknownPrincipal(String),
    #[error("malformed registry snapshot line {0}: {1}")]
    MalformedSnapshot(usize, String),
}

/// Deterministic Ed25519 keypair; the same seed always yields the same keys.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

impl Keypair {
    pub fn from_seed(seed: [u8; SEED_LEN]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public_key(&self) -> [u8; PUBKEY_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn principal_id(&self) -> String {
        principal_id(&self.public_key())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIG_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Keypair({})", self.principal_id())
    }
}

/// Derives the registry id for a public key.
pub fn principal_id(public_key: &[u8; PUBKEY_LEN]) -> String {
    hex::encode(&sha256(public_key)[..PRINCIPAL_ID_LEN / 2])
}

/// Verifies an Ed25519 signature; returns `false` on any malformed input
/// (wrong lengths, invalid key point) rather than panicking.
pub fn verify(public_key: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    let Ok(pk_bytes) = <[u8; PUBKEY_LEN]>::try_from(public_key) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&pk_bytes) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; SIG_LEN]>::try_from(sig) else {
        return false;
    };
    vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig_bytes))
        .is_ok()
}

/// Host-local map from principal id to public key.
///
/// Reads are concurrent-safe (`&self`); mutations take `&mut self` and are
/// therefore serialized by ownership.
#[derive(Debug, Clone, Default)]
pub struct PrincipalRegistry {
    keys: std::collections::BTreeMap<String, [u8; PUBKEY_LEN]>,
}

impl PrincipalRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a public key under its derived id.
    pub fn register(&mut self, public_key: [u8; PUBKEY_LEN]) -> Result<String, RegistryError> {
        let id = principal_id(&public_key);
        if self.keys.contains_key(&id) {
            return Err(RegistryError::PrincipalAlreadyRegistered(id));
        }
        self.keys.insert(id.clone(), public_key);
        Ok(id)
    }

    /// Rebinds an already-registered id to a new key. Entries signed under
    /// the old key stop verifying at retrieval time.
    pub fn update_key(
        &mut self,
        principal_id: &str,
        new_public_key: [u8; PUBKEY_LEN],
    ) -> Result<(), RegistryError> {
        match self.keys.get_mut(principal_id) {
            Some(slot) => {
                *slot = new_public_key;
                Ok(())
            }
            None => Err(RegistryError::UnknownPrincipal(principal_id.to_string())),
        }
    }

    pub fn lookup(&self, principal_id: &str) -> Option<&[u8; PUBKEY_LEN]> {
        self.keys.get(principal_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies a message against a registered principal's current key.
    pub fn verify(&self, principal_id: &str, msg: &[u8], sig: &[u8]) -> bool {
        match self.lookup(principal_id) {
            Some(pk) => verify(pk, msg, sig),
            None => false,
        }
    }

    /// Snapshot format: one `<principal_id> <hex public key>` line per
    /// principal, sorted by id, LF-terminated.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (id, pk) in &self.keys {
            out.push_str(id);
            out.push(' ');
            out.push_str(&hex::encode(pk));
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, RegistryError> {
        let mut reg = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| RegistryError::MalformedSnapshot(lineno + 1, msg.to_string());
            let (id, pk_hex) = line.split_once(' ').ok_or_else(|| bad("missing space"))?;
            let pk_vec = hex::decode(pk_hex).map_err(|_| bad("invalid hex"))?;
            let pk: [u8; PUBKEY_LEN] =
                pk_vec.try_into().map_err(|_| bad("wrong key length"))?;
            if id != principal_id(&pk) {
                return Err(bad("id does not match key"));
            }
            reg.register(pk)
                .map_err(|e| RegistryError::MalformedSnapshot(lineno + 1, e.to_string()))?;
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(tag: u8) -> Keypair {
        Keypair::from_seed([tag; SEED_LEN])
    }

    #[test]
    fn same_seed_same_keys() {
        assert_eq!(kp(1).public_key(), kp(1).public_key());
        assert_ne!(kp(1).public_key(), kp(2).public_key());
    }

    #[test]
    fn sign_verify_round_trip() {
        let k = kp(3);
        let sig = k.sign(b"hello");
        assert!(verify(&k.public_key(), b"hello", &sig));
        assert!(!verify(&k.public_key(), b"hellp", &sig));
        assert!(!verify(&k.public_key(), b"hello", &sig[..63]));
    }

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut reg = PrincipalRegistry::new();
        let k = kp(4);
        let id = reg.register(k.public_key()).unwrap();
        assert_eq!(id.len(), PRINCIPAL_ID_LEN);
        assert!(matches!(
            reg.register(k.public_key()),
            Err(RegistryError::PrincipalAlreadyRegistered(_))
        ));
        assert_eq!(reg.lookup(&id), Some(&k.public_key()));
    }

    #[test]
    fn distinct_keys_get_distinct_ids() {
        let mut reg = PrincipalRegistry::new();
        let a = reg.register(kp(5).public_key()).unwrap();
        let b = reg.register(kp(6).public_key()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn update_key_semantics() {
        let mut reg = PrincipalRegistry::new();
        let old = kp(7);
        let new = kp(8);
        let id = reg.register(old.public_key()).unwrap();

        let sig = old.sign(b"entry");
        assert!(reg.verify(&id, b"entry", &sig));

        reg.update_key(&id, new.public_key()).unwrap();
        assert!(!reg.verify(&id, b"entry", &sig), "old-key signature must stop verifying");
        assert!(reg.verify(&id, b"entry", &new.sign(b"entry")));

        // idempotent re-bind to the same key
        reg.update_key(&id, new.public_key()).unwrap();
        assert!(matches!(
            reg.update_key("0000000000000000", new.public_key()),
            Err(RegistryError::UnknownPrincipal(_))
        ));
    }

    #[test]
    fn snapshot_round_trips_sorted() {
        let mut reg = PrincipalRegistry::new();
        for t in [9u8, 10, 11] {
            reg.register(kp(t).public_key()).unwrap();
        }
        let snap = reg.snapshot();
        let lines: Vec<&str> = snap.lines().collect();
        assert_eq!(lines.len(), 3);
        let mut sorted = lines.clone();
        sorted.sort_unstable();
        assert_eq!(lines, sorted);
        let back = PrincipalRegistry::from_snapshot(&snap).unwrap();
        assert_eq!(back.snapshot(), snap);
    }
}
