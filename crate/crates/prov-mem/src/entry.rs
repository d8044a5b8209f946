//! Memory entry records and the trust-label lattice.
//!
//! A [`ProvEntry`] is the signed, content-addressed unit of agent memory.
//! Every field except the signature itself is covered by the writer's
//! Ed25519 signature over the canonical encoding (see [`crate::codec`]),
//! so the trust label, parent edges, and attribution weights cannot be
//! rewritten after commit without invalidating the entry.

use std::fmt;

use sha2::{Digest, Sha256};

/// Byte length of an entry identifier (UUIDv7 layout).
pub const EID_LEN: usize = 16;
/// Byte length of the per-entry nonce.
pub const NONCE_LEN: usize = 16;
/// Byte length of an Ed25519 signature.
pub const SIG_LEN: usize = 64;
/// Byte length of a SHA-256 digest.
pub const HASH_LEN: usize = 32;

/// 128-bit time-ordered entry identifier in UUIDv7 layout.
///
/// The first 48 bits carry a millisecond timestamp, so identifiers minted
/// from a monotone clock sort in write order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Eid(pub [u8; EID_LEN]);

impl Eid {
    /// Builds a UUIDv7 identifier from a millisecond timestamp and 74 bits
    /// of caller-supplied randomness (`rand[0..2]` fills rand_a, the rest
    /// fills rand_b).
    pub fn new_v7(unix_ms: u64, rand: [u8; 10]) -> Self {
        let mut b = [0u8; EID_LEN];
        b[0..6].copy_from_slice(&unix_ms.to_be_bytes()[2..8]);
        // version 7 in the high nibble of byte 6, 12 bits of rand_a below it
        b[6] = 0x70 | (rand[0] & 0x0f);
        b[7] = rand[1];
        // RFC 4122 variant bits in byte 8, 62 bits of rand_b below them
        b[8] = 0x80 | (rand[2] & 0x3f);
        b[9..16].copy_from_slice(&rand[3..10]);
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; EID_LEN] {
        &self.0
    }

    /// Full lowercase-hex form (32 chars).
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 8 hex chars; the short form used in context sentinels and
    /// gate audit records.
    pub fn short_hex(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Eid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Eid({})", self.to_hex())
    }
}

/// Four-valued trust label; larger values are less safe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TrustLevel {
    Trusted = 0,
    DerivedTrusted = 1,
    DerivedUntrusted = 2,
    External = 3,
}

impl TrustLevel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Trusted),
            1 => Some(Self::DerivedTrusted),
            2 => Some(Self::DerivedUntrusted),
            3 => Some(Self::External),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// Canonical string form used in rendered context segments.
    pub fn name(self) -> &'static str {
        match self {
            Self::Trusted => "TRUSTED",
            Self::DerivedTrusted => "DERIVED_TRUSTED",
            Self::DerivedUntrusted => "DERIVED_UNTRUSTED",
            Self::External => "EXTERNAL",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "TRUSTED" => Some(Self::Trusted),
            "DERIVED_TRUSTED" => Some(Self::DerivedTrusted),
            "DERIVED_UNTRUSTED" => Some(Self::DerivedUntrusted),
            "EXTERNAL" => Some(Self::External),
            _ => None,
        }
    }

    /// An entry at this level may not justify a sensitive action.
    pub fn is_untrusted(self) -> bool {
        self >= Self::DerivedUntrusted
    }
}

impl fmt::Display for TrustLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Field-constraint failure on a [`ProvEntry`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvariantViolation {
    #[error("parents/parent_weights length mismatch: {parents} vs {weights}")]
    LengthMismatch { parents: usize, weights: usize },
    #[error("attribution weight out of range or non-finite: {0}")]
    WeightOutOfRange(f64),
    #[error("attribution weight is negative zero")]
    NegativeZeroWeight,
    #[error("writer label {0:?} is not one of user, agent:<i>, tool:<name>, external:<id>")]
    BadWriterLabel(String),
}

/// A signed, content-addressed memory record.
///
/// `parents` and `parent_weights` carry the derivation edges attached at
/// write time; `trust` is the label the propagation rule (or an explicit
/// override at ingest) assigned. `sigma` covers the canonical encoding of
/// every other field.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvEntry {
    pub eid: Eid,
    pub content: Vec<u8>,
    pub writer: String,
    pub h_src: [u8; HASH_LEN],
    pub h_ctx: [u8; HASH_LEN],
    pub trust: TrustLevel,
    pub parents: Vec<Eid>,
    pub parent_weights: Vec<f64>,
    pub ts: u64,
    pub nonce: [u8; NONCE_LEN],
    pub sigma: [u8; SIG_LEN],
}

impl ProvEntry {
    /// Checks every field constraint the codec and store rely on.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.parents.len() != self.parent_weights.len() {
            return Err(InvariantViolation::LengthMismatch {
                parents: self.parents.len(),
                weights: self.parent_weights.len(),
            });
        }
        for &w in &self.parent_weights {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(InvariantViolation::WeightOutOfRange(w));
            }
            if w == 0.0 && w.is_sign_negative() {
                return Err(InvariantViolation::NegativeZeroWeight);
            }
        }
        if !writer_label_is_valid(&self.writer) {
            return Err(InvariantViolation::BadWriterLabel(self.writer.clone()));
        }
        Ok(())
    }
}

/// Accepts exactly the principal label forms `user`, `agent:<i>`,
/// `tool:<name>`, and `external:<url-or-id>` (nonempty suffixes).
pub fn writer_label_is_valid(label: &str) -> bool {
    if label == "user" {
        return true;
    }
    for prefix in ["agent:", "tool:", "external:"] {
        if let Some(rest) = label.strip_prefix(prefix) {
            return !rest.is_empty();
        }
    }
    false
}

/// SHA-256 of an arbitrary blob; the hash stored in `h_src` / `h_ctx`.
pub fn sha256(data: &[u8]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uuidv7_layout_sets_version_and_variant() {
        let eid = Eid::new_v7(0x0123_4567_89ab, [0xff; 10]);
        assert_eq!(eid.0[0..6], [0x01, 0x23, 0x45, 0x67, 0x89, 0xab]);
        assert_eq!(eid.0[6] >> 4, 0x7);
        assert_eq!(eid.0[8] >> 6, 0b10);
    }

    #[test]
    fn eids_sort_by_timestamp() {
        let a = Eid::new_v7(1_000, [0xff; 10]);
        let b = Eid::new_v7(1_001, [0x00; 10]);
        assert!(a < b);
    }

    #[test]
    fn trust_level_round_trips_names() {
        for v in 0..4u8 {
            let t = TrustLevel::from_u8(v).unwrap();
            assert_eq!(TrustLevel::from_name(t.name()), Some(t));
        }
        assert_eq!(TrustLevel::from_u8(4), None);
        assert!(TrustLevel::DerivedUntrusted.is_untrusted());
        assert!(!TrustLevel::DerivedTrusted.is_untrusted());
    }

    #[test]
    fn writer_labels() {
        assert!(writer_label_is_valid("user"));
        assert!(writer_label_is_valid("agent:1"));
        assert!(writer_label_is_valid("tool:web"));
        assert!(writer_label_is_valid("external:https://example.com/doc"));
        assert!(!writer_label_is_valid("agent:"));
        assert!(!writer_label_is_valid("admin"));
        assert!(!writer_label_is_valid(""));
    }
}
