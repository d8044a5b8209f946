//! The sensitive-action gate: per-tool authority rules over parsed context
//! segments, five verdicts, and authority repair.
//!
//! The check is two-layered. The chain-of-custody layer asks which context
//! segments justify each security-critical parameter of a proposed tool
//! call; the authority layer asks whether the source class behind each
//! governed parameter is allowed to authorize it. A parameter justified
//! only by a `trust >= 2` segment can never dispatch as-is; what happens
//! instead (deny, escalate, strip, or rewrite from trusted authority) is
//! the deployment's gate mode. Repair fails closed: if any offending
//! parameter lacks an authorized replacement value, the verdict is Deny.

use std::collections::{BTreeMap, BTreeSet};

use crate::entry::TrustLevel;
use crate::retrieval::{AuditEvent, AuditKind, TaggedSegment};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("tool {0} has no policy rule and is not default-allowed")]
    UnknownTool(String),
    #[error("policy file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Source classes a governed parameter may be authorized by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceClass {
    Trusted,
    DerivedTrusted,
    /// A fresh user request in the current turn (modelled as a parameter
    /// with no segment source).
    FreshUser,
}

impl SourceClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Trusted => "TRUSTED",
            Self::DerivedTrusted => "DERIVED_TRUSTED",
            Self::FreshUser => "FRESH_USER",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "TRUSTED" => Some(Self::Trusted),
            "DERIVED_TRUSTED" => Some(Self::DerivedTrusted),
            "FRESH_USER" => Some(Self::FreshUser),
            _ => None,
        }
    }

    /// The class a trust label maps to; untrusted labels map to none.
    pub fn from_trust(trust: TrustLevel) -> Option<Self> {
        match trust {
            TrustLevel::Trusted => Some(Self::Trusted),
            TrustLevel::DerivedTrusted => Some(Self::DerivedTrusted),
            _ => None,
        }
    }
}

/// One parameter of a proposed tool call and the segment (if any) that
/// justifies its value. `source_eid8: None` means the value came from the
/// fresh user request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamValue {
    pub value: String,
    pub source_eid8: Option<String>,
}

impl ParamValue {
    pub fn fresh(value: impl Into<String>) -> Self {
        Self { value: value.into(), source_eid8: None }
    }

    pub fn from_segment(value: impl Into<String>, eid8: impl Into<String>) -> Self {
        Self { value: value.into(), source_eid8: Some(eid8.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: String,
    pub params: BTreeMap<String, ParamValue>,
}

impl ToolCall {
    pub fn new(tool: impl Into<String>) -> Self {
        Self { tool: tool.into(), params: BTreeMap::new() }
    }

    pub fn with_param(mut self, name: impl Into<String>, value: ParamValue) -> Self {
        self.params.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub tool: String,
    pub sensitive: bool,
    /// Governed parameter name to the source classes allowed to authorize it.
    pub governed_params: BTreeMap<String, Vec<SourceClass>>,
}

/// The loaded policy: rules per tool plus a default-allow set for ungoverned
/// benign tools.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicySet {
    pub rules: BTreeMap<String, PolicyRule>,
    pub default_allow: BTreeSet<String>,
}

impl PolicySet {
    pub fn rule(&self, tool: &str) -> Option<&PolicyRule> {
        self.rules.get(tool)
    }

    pub fn is_sensitive(&self, tool: &str) -> bool {
        self.rule(tool).map(|r| r.sensitive).unwrap_or(false)
    }
}

/// How the deployment resolves a blocked sensitive call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Deny,
    RequireUser,
    StripRetry,
    RepairRetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Allow,
    Deny,
    RequireUser,
    StripAndRetry,
    RepairAndRetry,
}

impl VerdictKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Allow => "allow",
            Self::Deny => "deny",
            Self::RequireUser => "require_user",
            Self::StripAndRetry => "strip_and_retry",
            Self::RepairAndRetry => "repair_and_retry",
        }
    }
}

/// A parameter rewrite performed by authority repair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub old_value: String,
    pub new_value: String,
    pub authority_eid8: String,
}

/// An authorized candidate value for a governed parameter, with the trust
/// of the evidence it comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authority {
    pub value: String,
    pub source_trust: TrustLevel,
    pub eid8: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateVerdict {
    pub kind: VerdictKind,
    /// Nonempty exactly when `kind` is `RepairAndRetry`.
    pub rewrites: BTreeMap<String, Rewrite>,
    /// Offending segment ids removed by `StripAndRetry`.
    pub stripped: Vec<String>,
    /// Blocked/repaired calls carry an audit record (seq assigned when the
    /// store ingests it); `Allow` carries none.
    pub audit: Option<AuditEvent>,
}

impl GateVerdict {
    fn allow() -> Self {
        Self { kind: VerdictKind::Allow, rewrites: BTreeMap::new(), stripped: Vec::new(), audit: None }
    }

    pub fn allowed(&self) -> bool {
        self.kind == VerdictKind::Allow
    }
}

fn audit(kind: AuditKind, eid: String, detail: String) -> Option<AuditEvent> {
    Some(AuditEvent { kind, eid, detail, seq: 0 })
}

struct Offense<'a> {
    param: &'a str,
    source_eid8: Option<&'a str>,
    value: &'a str,
}

/// Evaluates a proposed tool call against the policy, the parsed context
/// segments, and (for repair) the available authorities. Pure: the verdict
/// depends only on the arguments.
pub fn evaluate(
    call: &ToolCall,
    segments: &[TaggedSegment],
    policy: &PolicySet,
    mode: GateMode,
    authorities: &BTreeMap<String, Authority>,
) -> Result<GateVerdict, PolicyError> {
    let Some(rule) = policy.rule(&call.tool) else {
        if policy.default_allow.contains(&call.tool) {
            return Ok(GateVerdict::allow());
        }
        return Err(PolicyError::UnknownTool(call.tool.clone()));
    };
    if !rule.sensitive {
        return Ok(GateVerdict::allow());
    }

    let seg_trust: BTreeMap<&str, TrustLevel> =
        segments.iter().map(|s| (s.eid8.as_str(), s.trust)).collect();

    let mut offenses: Vec<Offense> = Vec::new();
    for (param, allowed) in &rule.governed_params {
        let Some(pv) = call.params.get(param) else {
            continue; // parameter not proposed
        };
        let class = match &pv.source_eid8 {
            None => Some(SourceClass::FreshUser),
            Some(eid8) => seg_trust
                .get(eid8.as_str())
                .copied()
                .and_then(SourceClass::from_trust),
        };
        let authorized = class.map(|c| allowed.contains(&c)).unwrap_or(false);
        if !authorized {
            offenses.push(Offense {
                param,
                source_eid8: pv.source_eid8.as_deref(),
                value: &pv.value,
            });
        }
    }

    if offenses.is_empty() {
        return Ok(GateVerdict::allow());
    }

    let offending_sources: Vec<String> = {
        let mut seen = BTreeSet::new();
        offenses
            .iter()
            .filter_map(|o| o.source_eid8)
            .filter(|e| seen.insert(e.to_string()))
            .map(str::to_string)
            .collect()
    };
    let first_source = offending_sources.first().cloned().unwrap_or_default();
    let offending_params: Vec<&str> = offenses.iter().map(|o| o.param).collect();

    let deny = |detail: String| GateVerdict {
        kind: VerdictKind::Deny,
        rewrites: BTreeMap::new(),
        stripped: Vec::new(),
        audit: audit(AuditKind::GateDenied, first_source.clone(), detail),
    };

    match mode {
        GateMode::Deny => Ok(deny(format!(
            "{}: unauthorized source for {}",
            call.tool,
            offending_params.join(",")
        ))),
        GateMode::RequireUser => Ok(GateVerdict {
            kind: VerdictKind::RequireUser,
            rewrites: BTreeMap::new(),
            stripped: Vec::new(),
            audit: audit(
                AuditKind::GateDenied,
                first_source.clone(),
                format!("{}: escalated to user for {}", call.tool, offending_params.join(",")),
            ),
        }),
        GateMode::StripRetry => Ok(GateVerdict {
            kind: VerdictKind::StripAndRetry,
            rewrites: BTreeMap::new(),
            stripped: offending_sources.clone(),
            audit: audit(
                AuditKind::GateDenied,
                first_source.clone(),
                format!("{}: stripped {}", call.tool, offending_sources.join(",")),
            ),
        }),
        GateMode::RepairRetry => {
            let mut rewrites = BTreeMap::new();
            for offense in &offenses {
                let allowed = &rule.governed_params[offense.param];
                let candidate = authorities.get(offense.param).filter(|a| {
                    SourceClass::from_trust(a.source_trust)
                        .map(|c| allowed.contains(&c))
                        .unwrap_or(false)
                });
                match candidate {
                    Some(a) => {
                        rewrites.insert(
                            offense.param.to_string(),
                            Rewrite {
                                old_value: offense.value.to_string(),
                                new_value: a.value.clone(),
                                authority_eid8: a.eid8.clone(),
                            },
                        );
                    }
                    None => {
                        return Ok(deny(format!(
                            "{}: no authorized replacement for {}",
                            call.tool, offense.param
                        )));
                    }
                }
            }
            let detail = rewrites
                .iter()
                .map(|(param, rw)| {
                    format!(
                        "{param}: rejected source {} replaced from authority {}",
                        offenses
                            .iter()
                            .find(|o| o.param == param)
                            .and_then(|o| o.source_eid8)
                            .unwrap_or("fresh"),
                        rw.authority_eid8
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            Ok(GateVerdict {
                kind: VerdictKind::RepairAndRetry,
                rewrites,
                stripped: Vec::new(),
                audit: audit(AuditKind::GateRepaired, first_source, detail),
            })
        }
    }
}

/// Context-level taint gate: denies any sensitive call whose active context
/// contains a segment with `trust >= 2`, regardless of parameter sources.
pub fn coarse_taint_evaluate(
    call: &ToolCall,
    segments: &[TaggedSegment],
    policy: &PolicySet,
) -> Result<GateVerdict, PolicyError> {
    let Some(rule) = policy.rule(&call.tool) else {
        if policy.default_allow.contains(&call.tool) {
            return Ok(GateVerdict::allow());
        }
        return Err(PolicyError::UnknownTool(call.tool.clone()));
    };
    if !rule.sensitive {
        return Ok(GateVerdict::allow());
    }
    match segments.iter().find(|s| s.trust.is_untrusted()) {
        Some(tainted) => Ok(GateVerdict {
            kind: VerdictKind::Deny,
            rewrites: BTreeMap::new(),
            stripped: Vec::new(),
            audit: audit(
                AuditKind::GateDenied,
                tainted.eid8.clone(),
                format!("{}: context tainted by {} segment", call.tool, tainted.trust),
            ),
        }),
        None => Ok(GateVerdict::allow()),
    }
}

// ---------------------------------------------------------------------------
// Policy file format
// ---------------------------------------------------------------------------

/// Parses the declarative policy format: one directive per line.
///
/// ```text
/// # comment
/// tool send_money sensitive recipient:TRUSTED|FRESH_USER amount:TRUSTED|FRESH_USER
/// tool answer benign
/// allow log_note
/// ```
pub fn parse_policy(text: &str) -> Result<PolicySet, PolicyError> {
    let mut set = PolicySet::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| PolicyError::Parse { line: idx + 1, msg: msg.to_string() };
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("allow") => {
                let tool = tokens.next().ok_or_else(|| err("allow needs a tool name"))?;
                if tokens.next().is_some() {
                    return Err(err("trailing tokens after allow"));
                }
                set.default_allow.insert(tool.to_string());
            }
            Some("tool") => {
                let tool = tokens.next().ok_or_else(|| err("tool needs a name"))?;
                let kind = tokens.next().ok_or_else(|| err("expected sensitive|benign"))?;
                let sensitive = match kind {
                    "sensitive" => true,
                    "benign" => false,
                    _ => return Err(err("expected sensitive|benign")),
                };
                let mut governed = BTreeMap::new();
                for spec in tokens {
                    let (param, classes) =
                        spec.split_once(':').ok_or_else(|| err("expected param:CLASS|CLASS"))?;
                    if !sensitive {
                        return Err(err("benign tools cannot carry governed params"));
                    }
                    let classes = classes
                        .split('|')
                        .map(|c| SourceClass::from_name(c).ok_or_else(|| err("unknown source class")))
                        .collect::<Result<Vec<_>, _>>()?;
                    governed.insert(param.to_string(), classes);
                }
                set.rules.insert(
                    tool.to_string(),
                    PolicyRule { tool: tool.to_string(), sensitive, governed_params: governed },
                );
            }
            _ => return Err(err("expected tool|allow directive")),
        }
    }
    Ok(set)
}
