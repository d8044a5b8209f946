//! Defense profiles: the single variable the harness changes between cells.
//!
//! Everything else (codec, store, retrieval selector, attack sequences,
//! the scripted agent) is held identical, so any cell-to-cell delta is
//! attributable to verification, propagation, and gating policy.

use prov_mem::policy::GateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefenseProfile {
    pub name: &'static str,
    pub verify_signatures: bool,
    pub verify_inclusion: bool,
    /// When off, writes record no parent edges and every write falls back
    /// to the trusted label.
    pub lineage_propagation: bool,
    /// `None` means the gate is trust-blind: verified entries dispatch.
    pub gate_mode: Option<GateMode>,
    /// When off, trigger sessions receive no recalled memory at all.
    pub recall_enabled: bool,
    /// Context-level taint: deny any sensitive call with an untrusted
    /// segment anywhere in context, regardless of parameter sources.
    pub taint_context: bool,
}

pub fn no_defense() -> DefenseProfile {
    DefenseProfile {
        name: "no_defense",
        verify_signatures: false,
        verify_inclusion: false,
        lineage_propagation: false,
        gate_mode: None,
        recall_enabled: true,
        taint_context: false,
    }
}

pub fn sig_only_baseline() -> DefenseProfile {
    DefenseProfile {
        name: "sig_only_baseline",
        verify_signatures: true,
        verify_inclusion: true,
        lineage_propagation: false,
        gate_mode: None,
        recall_enabled: true,
        taint_context: false,
    }
}

pub fn prov_mem() -> DefenseProfile {
    DefenseProfile {
        name: "prov_mem",
        verify_signatures: true,
        verify_inclusion: true,
        lineage_propagation: true,
        gate_mode: Some(GateMode::Deny),
        recall_enabled: true,
        taint_context: false,
    }
}

pub fn prov_mem_with_mode(mode: GateMode) -> DefenseProfile {
    DefenseProfile { gate_mode: Some(mode), ..prov_mem() }
}

pub fn memory_sandbox() -> DefenseProfile {
    DefenseProfile { name: "memory_sandbox", recall_enabled: false, ..prov_mem() }
}

pub fn coarse_taint() -> DefenseProfile {
    DefenseProfile { name: "coarse_taint", taint_context: true, ..prov_mem() }
}

/// The three core ASR cells.
pub fn core_profiles() -> [DefenseProfile; 3] {
    [no_defense(), sig_only_baseline(), prov_mem()]
}

/// All five harness profiles, in reporting order.
pub fn all_profiles() -> [DefenseProfile; 5] {
    [no_defense(), sig_only_baseline(), prov_mem(), memory_sandbox(), coarse_taint()]
}
