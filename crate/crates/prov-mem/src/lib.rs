//! Cryptographically bound provenance and derivation lineage for agent
//! memory.
//!
//! Every memory entry is signed per principal, committed to an RFC
//! 6962-style Merkle log, and carries weighted derivation edges back to the
//! entries that were in context when it was written. Trust labels propagate
//! along those edges by a max-of-strong-edges rule, retrieval verifies and
//! tags everything it surfaces, and a policy gate refuses sensitive tool
//! calls whose governing parameters are justified by untrusted ancestry.
//!
//! Module map:
//!
//! - [`entry`] — entry records, ids, trust labels
//! - [`codec`] — canonical encoding (the bytes signatures cover)
//! - [`crypto`] — Ed25519 signing and the principal registry
//! - [`merkle`] — append-only log, inclusion proofs, tombstones
//! - [`lineage`] — attribution, the propagation rule, strict knobs
//! - [`store`] — the integrated write/read paths
//! - [`retrieval`] — verified retrieval and the tagged context sentinel
//! - [`policy`] — the sensitive-action gate and authority repair
//!
//! The `parallel` feature (on by default) runs batch verification and large
//! Merkle recomputations on a rayon pool; results are byte-identical to the
//! sequential fallback.

#![forbid(unsafe_code)]

pub mod codec;
pub mod crypto;
pub mod entry;
pub mod lineage;
pub mod merkle;
pub mod policy;
pub mod retrieval;
pub mod store;

pub use entry::{Eid, ProvEntry, TrustLevel};
pub use store::{MemoryStore, StoreConfig, WriteRequest};
