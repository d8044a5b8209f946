//! Shared scenario machinery: a deterministic environment holding the
//! store, the registered principals, the substring retrieval selector, the
//! scripted agent, and profile-aware retrieval and dispatch.
//!
//! The scripted agent and the retrieval selector are profile-independent;
//! profiles only influence verification, propagation, and gating.

use std::collections::BTreeMap;

use prov_mem::crypto::Keypair;
use prov_mem::entry::{sha256, Eid, TrustLevel};
use prov_mem::policy::{
    coarse_taint_evaluate, evaluate, parse_policy, Authority, GateMode, GateVerdict, ParamValue,
    PolicySet, ToolCall, VerdictKind,
};
use prov_mem::retrieval::{filter_and_tag, TaggedSegment};
use prov_mem::store::{MemoryStore, StoreConfig, WriteRequest};

use crate::profiles::DefenseProfile;

/// Tool policy every harness cell runs under.
pub const HARNESS_POLICY: &str = "\
# Sensitive tools and the source classes allowed to authorize each governed
# parameter; benign tools dispatch regardless of context trust.
tool send_money sensitive recipient:TRUSTED|FRESH_USER amount:TRUSTED|FRESH_USER
tool send_email sensitive recipient:TRUSTED|DERIVED_TRUSTED|FRESH_USER body:TRUSTED|DERIVED_TRUSTED|FRESH_USER
tool execute_code sensitive code:TRUSTED|FRESH_USER
tool http_post sensitive url:TRUSTED|FRESH_USER payload:TRUSTED|FRESH_USER
tool db_query sensitive query:TRUSTED|FRESH_USER
tool write_file sensitive path:TRUSTED|FRESH_USER contents:TRUSTED|DERIVED_TRUSTED|FRESH_USER
tool api_post sensitive endpoint:TRUSTED|FRESH_USER body:TRUSTED|DERIVED_TRUSTED|FRESH_USER
tool answer benign
allow log_note
";

fn derived_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut bytes = Vec::with_capacity(12 + label.len());
    bytes.extend_from_slice(b"key:");
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    sha256(&bytes)
}

/// What the gate did with a proposed call.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub tool: String,
    pub verdict: VerdictKind,
    /// Parameter values that actually reached the sink: the proposal for
    /// Allow, the rewritten values for a repaired retry, nothing otherwise.
    pub dispatched: Option<BTreeMap<String, String>>,
    pub gate: GateVerdict,
}

impl Dispatch {
    /// True when the original proposal dispatched unchanged.
    pub fn fired_as_proposed(&self) -> bool {
        self.verdict == VerdictKind::Allow
    }

    /// True when anything reached the sink (allowed or repaired).
    pub fn sink_reached(&self) -> bool {
        self.dispatched.is_some()
    }
}

pub struct Env {
    pub store: MemoryStore,
    pub profile: DefenseProfile,
    pub policy: PolicySet,
    pub user: Keypair,
    pub agent: Keypair,
    pub web: Keypair,
    /// Keypair held by the adversary; never registered.
    pub attacker: Keypair,
    pub trace: Vec<String>,
}

impl Env {
    pub fn new(profile: DefenseProfile, seed: u64, tau: f64) -> Self {
        let mut store = MemoryStore::new(StoreConfig { seed, tau, ..StoreConfig::default() });
        let user = Keypair::from_seed(derived_seed(seed, "user"));
        let agent = Keypair::from_seed(derived_seed(seed, "agent:1"));
        let web = Keypair::from_seed(derived_seed(seed, "tool:web"));
        let attacker = Keypair::from_seed(derived_seed(seed, "attacker"));
        store.register_writer("user", &user).expect("fresh store");
        store.register_writer("agent:1", &agent).expect("fresh store");
        store.register_writer("tool:web", &web).expect("fresh store");
        Self {
            store,
            profile,
            policy: parse_policy(HARNESS_POLICY).expect("harness policy parses"),
            user,
            agent,
            web,
            attacker,
            trace: Vec::new(),
        }
    }

    pub fn trace(&mut self, line: String) {
        self.trace.push(line);
    }

    /// Ingests external content through the registered web-tool principal,
    /// labelled `External` at the write surface.
    pub fn ingest_external(&mut self, content: &str, source: &str) -> Eid {
        let web = self.web.clone();
        let entry = self
            .store
            .write(
                &web,
                WriteRequest::new("tool:web", content.as_bytes())
                    .with_source(content.as_bytes(), source.as_bytes())
                    .with_trust_override(TrustLevel::External),
            )
            .expect("ingest");
        self.trace(format!("plant: ingested external source len={}", content.len()));
        entry.eid
    }

    /// A write by a registered principal. Parent edges are recorded only
    /// when the profile propagates lineage; labelling then follows the
    /// propagation rule unless an override is supplied.
    pub fn write_as(
        &mut self,
        label: &str,
        content: &str,
        parents: Vec<Eid>,
        weights: Vec<f64>,
        trust_override: Option<TrustLevel>,
    ) -> Eid {
        let keypair = match label {
            "user" => self.user.clone(),
            "agent:1" => self.agent.clone(),
            "tool:web" => self.web.clone(),
            other => panic!("no registered keypair for {other}"),
        };
        let (parents, weights) = if self.profile.lineage_propagation {
            (parents, weights)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut req = WriteRequest::new(label, content.as_bytes()).with_parents(parents, weights);
        if let Some(t) = trust_override {
            req = req.with_trust_override(t);
        }
        let entry = self.store.write(&keypair, req).expect("write");
        self.trace(format!("derive: writer={label} content_len={}", content.len()));
        self.trace(format!(
            "propagate: trust={} parents={}",
            entry.trust,
            self.store.lineage().parent_count(&entry.eid)
        ));
        entry.eid
    }

    /// Deterministic retrieval selector: non-tombstoned entries whose
    /// content contains the query, in write order.
    pub fn select(&self, query: &str) -> Vec<Eid> {
        self.store
            .write_order()
            .iter()
            .filter(|eid| !self.store.is_tombstoned(eid))
            .filter(|eid| {
                self.store
                    .entry(eid)
                    .map(|e| {
                        String::from_utf8_lossy(&e.content).contains(query)
                    })
                    .unwrap_or(false)
            })
            .copied()
            .collect()
    }

    /// Profile-aware retrieval: selector, then verification per profile.
    pub fn retrieve(&mut self, query: &str) -> Vec<TaggedSegment> {
        if !self.profile.recall_enabled {
            self.trace(format!("retrieve: query={query:?} recall disabled"));
            return Vec::new();
        }
        let candidates = self.select(query);
        self.trace(format!("retrieve: query={query:?} candidates={}", candidates.len()));
        let segments = if self.profile.verify_signatures {
            let (segments, audits) = filter_and_tag(&mut self.store, &candidates);
            self.trace(format!(
                "verify: admitted={} dropped={}",
                segments.len(),
                audits.len()
            ));
            segments
        } else {
            let segments: Vec<TaggedSegment> = candidates
                .iter()
                .filter_map(|eid| self.store.entry(eid))
                .map(|e| {
                    TaggedSegment::new(
                        e.eid.short_hex(),
                        e.trust,
                        String::from_utf8_lossy(&e.content).into_owned(),
                    )
                })
                .collect();
            self.trace(format!("verify: skipped admitted={}", segments.len()));
            segments
        };
        segments
    }

    /// Retrieves specific entries (the harness fixes retrieval per scenario).
    pub fn retrieve_exact(&mut self, eids: &[Eid]) -> Vec<TaggedSegment> {
        if !self.profile.recall_enabled {
            self.trace("retrieve: exact recall disabled".to_string());
            return Vec::new();
        }
        self.trace(format!("retrieve: exact candidates={}", eids.len()));
        if self.profile.verify_signatures {
            let (segments, audits) = filter_and_tag(&mut self.store, eids);
            self.trace(format!("verify: admitted={} dropped={}", segments.len(), audits.len()));
            segments
        } else {
            let segments: Vec<TaggedSegment> = eids
                .iter()
                .filter(|eid| !self.store.is_tombstoned(eid))
                .filter_map(|eid| self.store.entry(eid))
                .map(|e| {
                    TaggedSegment::new(
                        e.eid.short_hex(),
                        e.trust,
                        String::from_utf8_lossy(&e.content).into_owned(),
                    )
                })
                .collect();
            self.trace(format!("verify: skipped admitted={}", segments.len()));
            segments
        }
    }

    /// Runs the proposed call through the profile's gate. Repaired retries
    /// dispatch the rewritten parameters.
    pub fn dispatch(
        &mut self,
        call: &ToolCall,
        segments: &[TaggedSegment],
        authorities: &BTreeMap<String, Authority>,
    ) -> Dispatch {
        let verdict = match self.profile.gate_mode {
            None => GateVerdict {
                kind: VerdictKind::Allow,
                rewrites: BTreeMap::new(),
                stripped: Vec::new(),
                audit: None,
            },
            Some(_) if self.profile.taint_context => {
                coarse_taint_evaluate(call, segments, &self.policy).expect("tool has a rule")
            }
            Some(mode) => {
                evaluate(call, segments, &self.policy, mode, authorities).expect("tool has a rule")
            }
        };
        if let Some(audit) = &verdict.audit {
            self.store.record_gate_audit(audit);
        }
        let dispatched = match verdict.kind {
            VerdictKind::Allow => {
                Some(call.params.iter().map(|(k, v)| (k.clone(), v.value.clone())).collect())
            }
            VerdictKind::RepairAndRetry => Some(
                call.params
                    .iter()
                    .map(|(k, v)| {
                        let value = verdict
                            .rewrites
                            .get(k)
                            .map(|rw| rw.new_value.clone())
                            .unwrap_or_else(|| v.value.clone());
                        (k.clone(), value)
                    })
                    .collect(),
            ),
            _ => None,
        };
        self.trace(format!("gate: tool={} verdict={}", call.tool, verdict.kind.name()));
        self.trace(format!(
            "dispatch: fired={} tool={}",
            u8::from(verdict.kind == VerdictKind::Allow),
            call.tool
        ));
        Dispatch { tool: call.tool.clone(), verdict: verdict.kind, dispatched, gate: verdict }
    }

    /// Resolves a sentinel short id back to the stored entry.
    pub fn resolve_eid8(&self, eid8: &str) -> Option<Eid> {
        self.store.write_order().iter().copied().find(|e| e.short_hex() == eid8)
    }
}

// ---------------------------------------------------------------------------
// The scripted agent
// ---------------------------------------------------------------------------

/// Parses the first `ACTION <tool> key=value ...` directive found in the
/// segments and proposes that call, sourcing every parameter from the
/// segment that carried the directive. Returns `None` when no directive is
/// in context (the agent has nothing to act on).
pub fn propose_action(segments: &[TaggedSegment]) -> Option<ToolCall> {
    for seg in segments {
        for line in seg.content.lines() {
            let Some(rest) = line.trim().strip_prefix("ACTION ") else {
                continue;
            };
            let mut tokens = rest.split_whitespace();
            let tool = tokens.next()?;
            let mut call = ToolCall::new(tool);
            for pair in tokens {
                if let Some((k, v)) = pair.split_once('=') {
                    call = call.with_param(k, ParamValue::from_segment(v, seg.eid8.clone()));
                }
            }
            return Some(call);
        }
    }
    None
}

/// Proposes a non-sensitive answer grounded in the first recalled segment.
pub fn propose_answer(segments: &[TaggedSegment]) -> Option<ToolCall> {
    let seg = segments.first()?;
    Some(
        ToolCall::new("answer")
            .with_param("text", ParamValue::from_segment(seg.content.clone(), seg.eid8.clone())),
    )
}

/// Builds the authority map the gate may repair from: each `(param, value)`
/// is backed by the given evidence segment.
pub fn authorities_from(
    seg: &TaggedSegment,
    pairs: &[(&str, &str)],
) -> BTreeMap<String, Authority> {
    pairs
        .iter()
        .map(|(param, value)| {
            (
                param.to_string(),
                Authority {
                    value: value.to_string(),
                    source_trust: seg.trust,
                    eid8: seg.eid8.clone(),
                },
            )
        })
        .collect()
}

/// Convenience: the gate mode the profile would apply (Deny when trust-blind
/// profiles are asked, which they never gate on anyway).
pub fn effective_mode(profile: &DefenseProfile) -> GateMode {
    profile.gate_mode.unwrap_or(GateMode::Deny)
}
