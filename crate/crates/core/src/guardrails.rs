//! Rail chains at the input, dialog, retrieval and output stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::datalake::acl_allows;
use crate::evaluation::faithfulness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Dialog,
    Retrieval,
    Output,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Input, Stage::Dialog, Stage::Retrieval, Stage::Output];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Input => "input",
            Self::Dialog => "dialog",
            Self::Retrieval => "retrieval",
            Self::Output => "output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RailDecision {
    Allow,
    Modify,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailOutcome {
    pub rail_id: String,
    pub decision: RailDecision,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub payload_out: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

impl RailOutcome {
    pub fn allow(rail_id: &str, payload: &str) -> Self {
        Self {
            rail_id: rail_id.to_string(),
            decision: RailDecision::Allow,
            payload_out: Some(payload.to_string()),
            reason: None,
        }
    }

    /// Allow, or modify if `out` differs from `input`.
    pub fn transformed(rail_id: &str, input: &str, out: String) -> Self {
        if out == input {
            Self::allow(rail_id, input)
        } else {
            Self {
                rail_id: rail_id.to_string(),
                decision: RailDecision::Modify,
                payload_out: Some(out),
                reason: None,
            }
        }
    }

    pub fn reject(rail_id: &str, reason: impl Into<String>) -> Self {
        Self {
            rail_id: rail_id.to_string(),
            decision: RailDecision::Reject,
            payload_out: None,
            reason: Some(reason.into()),
        }
    }
}

/// What a rail may consult besides the payload text.
#[derive(Debug, Clone, Copy, Default)]
pub struct RailContext<'a> {
    pub role: Option<&'a str>,
    /// Retrieval stage: flags and ACL of the hit's source document.
    pub flags: Option<&'a BTreeSet<String>>,
    pub acl: Option<&'a [String]>,
    /// Output stage: texts of the context the draft was generated from.
    pub context: &'a [String],
    /// Output stage: the draft is the pipeline's fixed no-context abstention.
    pub abstention: bool,
}

pub trait Rail: Send + Sync {
    fn id(&self) -> &str;
    fn check(&self, payload: &str, ctx: &RailContext<'_>) -> RailOutcome;
}

static EMAIL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}").unwrap());
static LONG_DIGITS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d{8,}").unwrap());

pub fn mask_pii(text: &str) -> String {
    let t = EMAIL.replace_all(text, "[EMAIL]");
    LONG_DIGITS.replace_all(&t, "[NUMBER]").into_owned()
}

pub const DEFAULT_BLOCK_FLAGS: [&str; 4] = ["poison", "poisoned", "quarantine", "quarantined"];

fn default_block_flags() -> Vec<String> {
    DEFAULT_BLOCK_FLAGS.iter().map(|s| s.to_string()).collect()
}

fn default_true() -> bool {
    true
}

fn default_floor() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RailKind {
    PiiMask,
    Blocklist {
        terms: Vec<String>,
    },
    RetrievalFilter {
        #[serde(default = "default_block_flags")]
        block_flags: Vec<String>,
        #[serde(default = "default_true")]
        mask_pii: bool,
    },
    OutputGrounding {
        #[serde(default = "default_floor")]
        floor: f64,
    },
}

impl RailKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            Self::PiiMask => "pii_mask",
            Self::Blocklist { .. } => "blocklist",
            Self::RetrievalFilter { .. } => "retrieval_filter",
            Self::OutputGrounding { .. } => "output_grounding",
        }
    }

    fn allowed_at(&self, stage: Stage) -> bool {
        match self {
            Self::PiiMask | Self::Blocklist { .. } => stage != Stage::Retrieval,
            Self::RetrievalFilter { .. } => stage == Stage::Retrieval,
            Self::OutputGrounding { .. } => stage == Stage::Output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailSpec {
    pub rail_id: String,
    pub stage: Stage,
    #[serde(default)]
    pub order: i32,
    #[serde(flatten)]
    pub kind: RailKind,
}

struct BuiltinRail {
    id: String,
    kind: RailKind,
    pattern: Option<Regex>,
}

impl Rail for BuiltinRail {
    fn id(&self) -> &str {
        &self.id
    }

    fn check(&self, payload: &str, ctx: &RailContext<'_>) -> RailOutcome {
        match &self.kind {
            RailKind::PiiMask => RailOutcome::transformed(&self.id, payload, mask_pii(payload)),
            RailKind::Blocklist { .. } => match self.pattern.as_ref().and_then(|p| p.find(payload)) {
                Some(m) => RailOutcome::reject(&self.id, format!("blocked term {:?}", m.as_str())),
                None => RailOutcome::allow(&self.id, payload),
            },
            RailKind::RetrievalFilter { block_flags, mask_pii: mask } => {
                if let Some(flag) = ctx
                    .flags
                    .and_then(|f| block_flags.iter().find(|b| f.contains(b.as_str())))
                {
                    return RailOutcome::reject(&self.id, format!("source flagged {flag}"));
                }
                if let Some(acl) = ctx.acl {
                    if !acl_allows(acl, ctx.role) {
                        return RailOutcome::reject(&self.id, "acl excludes role");
                    }
                }
                if *mask {
                    RailOutcome::transformed(&self.id, payload, mask_pii(payload))
                } else {
                    RailOutcome::allow(&self.id, payload)
                }
            }
            RailKind::OutputGrounding { floor } => {
                if ctx.abstention {
                    return RailOutcome::allow(&self.id, payload);
                }
                let f = faithfulness(payload, ctx.context);
                if f >= *floor {
                    RailOutcome::allow(&self.id, payload)
                } else {
                    RailOutcome::reject(&self.id, format!("faithfulness {f:.3} below floor {floor}"))
                }
            }
        }
    }
}

fn build(spec: &RailSpec) -> Result<BuiltinRail, String> {
    let pattern = match &spec.kind {
        RailKind::Blocklist { terms } => {
            let alts: Vec<String> = terms
                .iter()
                .filter(|t| !t.trim().is_empty())
                .map(|t| regex::escape(t.trim()))
                .collect();
            if alts.is_empty() {
                None
            } else {
                Some(
                    Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|")))
                        .map_err(|e| format!("rail {}: {e}", spec.rail_id))?,
                )
            }
        }
        _ => None,
    };
    Ok(BuiltinRail {
        id: spec.rail_id.clone(),
        kind: spec.kind.clone(),
        pattern,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub stage: Stage,
    /// Final payload, or `None` when a rail rejected.
    pub payload: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rejection: Option<RailOutcome>,
    pub outcomes: Vec<RailOutcome>,
}

impl ChainOutcome {
    pub fn rejected(&self) -> bool {
        self.payload.is_none()
    }

    pub fn reason(&self) -> Option<&str> {
        self.rejection.as_ref().and_then(|r| r.reason.as_deref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardrailConfig {
    #[serde(default)]
    pub rails: Vec<RailSpec>,
}

impl GuardrailConfig {
    /// PII masking on input and output, retrieval filtering, and the grounding floor.
    pub fn standard() -> Self {
        let spec = |id: &str, stage, order, kind| RailSpec {
            rail_id: id.to_string(),
            stage,
            order,
            kind,
        };
        Self {
            rails: vec![
                spec("input-pii", Stage::Input, 10, RailKind::PiiMask),
                spec(
                    "retrieval-filter",
                    Stage::Retrieval,
                    10,
                    RailKind::RetrievalFilter {
                        block_flags: default_block_flags(),
                        mask_pii: true,
                    },
                ),
                spec("output-grounding", Stage::Output, 10, RailKind::OutputGrounding { floor: 0.2 }),
                spec("output-pii", Stage::Output, 20, RailKind::PiiMask),
            ],
        }
    }

    /// Errors for invalid chains; warnings for questionable placement.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        let mut seen: BTreeSet<(Stage, &str)> = BTreeSet::new();
        let mut stages_by_type: BTreeMap<&str, BTreeSet<Stage>> = BTreeMap::new();
        for r in &self.rails {
            if r.rail_id.trim().is_empty() {
                return Err("rail with empty rail_id".into());
            }
            if !seen.insert((r.stage, r.rail_id.as_str())) {
                return Err(format!("duplicate rail_id {:?} at stage {}", r.rail_id, r.stage));
            }
            if !r.kind.allowed_at(r.stage) {
                return Err(format!(
                    "rail {:?} of type {} cannot run at stage {}",
                    r.rail_id,
                    r.kind.type_name(),
                    r.stage
                ));
            }
            if let RailKind::OutputGrounding { floor } = r.kind {
                if !(0.0..=1.0).contains(&floor) {
                    return Err(format!("rail {:?}: floor {floor} outside [0,1]", r.rail_id));
                }
            }
            build(r)?;
            stages_by_type.entry(r.kind.type_name()).or_default().insert(r.stage);
        }
        Ok(stages_by_type
            .into_iter()
            .filter(|(_, s)| s.len() > 2)
            .map(|(t, s)| format!("rail type {t} configured at {} stages", s.len()))
            .collect())
    }
}

/// Configured rail chains for all four stages.
#[derive(Clone, Default)]
pub struct Guardrails {
    chains: BTreeMap<Stage, Vec<(i32, Arc<dyn Rail>)>>,
}

impl fmt::Debug for Guardrails {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (s, c) in &self.chains {
            m.entry(s, &c.iter().map(|(o, r)| (o, r.id().to_string())).collect::<Vec<_>>());
        }
        m.finish()
    }
}

impl Guardrails {
    pub fn from_config(cfg: &GuardrailConfig) -> Result<Self, String> {
        cfg.validate()?;
        let mut g = Self::default();
        for spec in &cfg.rails {
            g.add(spec.stage, spec.order, Arc::new(build(spec)?));
        }
        Ok(g)
    }

    /// Add a rail; chains stay sorted by `(order, rail_id)`.
    pub fn add(&mut self, stage: Stage, order: i32, rail: Arc<dyn Rail>) {
        let chain = self.chains.entry(stage).or_default();
        chain.push((order, rail));
        chain.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id().cmp(b.1.id())));
    }

    pub fn rail_ids(&self, stage: Stage) -> Vec<String> {
        self.chains
            .get(&stage)
            .map(|c| c.iter().map(|(_, r)| r.id().to_string()).collect())
            .unwrap_or_default()
    }

    /// Fold the payload through the stage's chain, stopping at the first reject.
    pub fn apply_chain(&self, stage: Stage, payload: &str, ctx: &RailContext<'_>) -> ChainOutcome {
        let mut current = payload.to_string();
        let mut outcomes = Vec::new();
        for (_, rail) in self.chains.get(&stage).into_iter().flatten() {
            let out = rail.check(&current, ctx);
            if out.decision == RailDecision::Reject {
                outcomes.push(out.clone());
                return ChainOutcome {
                    stage,
                    payload: None,
                    rejection: Some(out),
                    outcomes,
                };
            }
            if let Some(p) = &out.payload_out {
                current = p.clone();
            }
            outcomes.push(out);
        }
        ChainOutcome {
            stage,
            payload: Some(current),
            rejection: None,
            outcomes,
        }
    }
}
