//! Pipeline version lifecycle and live-testing deployments (shadow, A/B, staged).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{Alert, AlertKind};
use crate::evaluation::stable_mean;
use crate::observability::ResponseRecord;
use crate::text::{hash64, sha256_hex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("unknown pipeline version {0}")]
    UnknownVersion(String),
    #[error("version {version} cannot move from {from} to {to}")]
    InvalidTransition { version: String, from: VersionState, to: VersionState },
    #[error("deployment is not active")]
    NotActive,
    #[error("advance blocked: {0}")]
    Blocked(String),
    #[error("no paired control/candidate traces in window")]
    EmptyWindow,
    #[error("invalid deployment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionState {
    Draft,
    OfflinePassed,
    LiveCandidate,
    Live,
    Retired,
    Recalled,
}

impl fmt::Display for VersionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Draft => "draft",
            Self::OfflinePassed => "offline_passed",
            Self::LiveCandidate => "live_candidate",
            Self::Live => "live",
            Self::Retired => "retired",
            Self::Recalled => "recalled",
        })
    }
}

impl VersionState {
    pub const ALL: [VersionState; 6] = [
        Self::Draft,
        Self::OfflinePassed,
        Self::LiveCandidate,
        Self::Live,
        Self::Retired,
        Self::Recalled,
    ];

    /// The permitted edges of the lifecycle. A recalled version returns to
    /// offline_passed only through a new passing gate verdict.
    pub fn can_move_to(self, to: VersionState) -> bool {
        use VersionState::*;
        matches!(
            (self, to),
            (Draft, OfflinePassed)
                | (OfflinePassed, LiveCandidate)
                | (LiveCandidate, Live)
                | (Live, Retired)
                | (LiveCandidate, Recalled)
                | (Live, Recalled)
                | (Recalled, OfflinePassed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: VersionState,
    pub to: VersionState,
    pub at: DateTime<Utc>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineVersion {
    pub version_id: String,
    pub config_digest: String,
    pub state: VersionState,
    /// Report that last passed the release gate.
    pub gate_report: Option<String>,
    pub history: Vec<Transition>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub versions: BTreeMap<String, PipelineVersion>,
}

impl Registry {
    pub fn register(&mut self, version_id: &str, config_digest: &str) -> Result<&PipelineVersion, RolloutError> {
        if let Some(v) = self.versions.get(version_id) {
            if v.config_digest != config_digest {
                return Err(RolloutError::Invalid(format!(
                    "version {version_id} already registered with a different config"
                )));
            }
        } else {
            self.versions.insert(
                version_id.to_string(),
                PipelineVersion {
                    version_id: version_id.to_string(),
                    config_digest: config_digest.to_string(),
                    state: VersionState::Draft,
                    gate_report: None,
                    history: Vec::new(),
                },
            );
        }
        Ok(&self.versions[version_id])
    }

    pub fn get(&self, id: &str) -> Result<&PipelineVersion, RolloutError> {
        self.versions.get(id).ok_or_else(|| RolloutError::UnknownVersion(id.to_string()))
    }

    pub fn state(&self, id: &str) -> Result<VersionState, RolloutError> {
        Ok(self.get(id)?.state)
    }

    pub fn live(&self) -> Option<&str> {
        self.versions
            .values()
            .find(|v| v.state == VersionState::Live)
            .map(|v| v.version_id.as_str())
    }

    pub fn transition(&mut self, id: &str, to: VersionState, reason: &str, at: DateTime<Utc>) -> Result<(), RolloutError> {
        let live_elsewhere = self.versions.values().any(|v| v.state == VersionState::Live && v.version_id != id);
        let v = self
            .versions
            .get_mut(id)
            .ok_or_else(|| RolloutError::UnknownVersion(id.to_string()))?;
        if !v.state.can_move_to(to) {
            return Err(RolloutError::InvalidTransition {
                version: id.to_string(),
                from: v.state,
                to,
            });
        }
        if to == VersionState::Live && live_elsewhere {
            return Err(RolloutError::Invalid(format!("another version is live; retire it before {id} goes live")));
        }
        v.history.push(Transition {
            from: v.state,
            to,
            at,
            reason: reason.to_string(),
        });
        v.state = to;
        Ok(())
    }

    /// Record a passing release-gate verdict.
    pub fn mark_offline_passed(&mut self, id: &str, report_id: &str, at: DateTime<Utc>) -> Result<(), RolloutError> {
        self.transition(id, VersionState::OfflinePassed, &format!("gate passed: {report_id}"), at)?;
        self.versions.get_mut(id).unwrap().gate_report = Some(report_id.to_string());
        Ok(())
    }

    /// Make the first version live when nothing is live yet.
    pub fn bootstrap(&mut self, id: &str, at: DateTime<Utc>) -> Result<(), RolloutError> {
        if let Some(live) = self.live() {
            return Err(RolloutError::Invalid(format!("{live} is already live")));
        }
        self.transition(id, VersionState::LiveCandidate, "bootstrap", at)?;
        self.transition(id, VersionState::Live, "bootstrap", at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Shadow,
    Ab,
    Staged,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shadow" => Ok(Self::Shadow),
            "ab" => Ok(Self::Ab),
            "staged" => Ok(Self::Staged),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentStatus {
    Active,
    Completed,
    Recalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub deployment_id: String,
    pub strategy: Strategy,
    pub control: String,
    pub candidate: String,
    pub ab_pct: u8,
    pub stage_schedule: Vec<(u32, u8)>,
    pub stage_index: usize,
    pub status: DeploymentStatus,
    pub started_at: DateTime<Utc>,
    pub stage_started_at: DateTime<Utc>,
}

impl Deployment {
    /// Share of traffic the candidate currently serves.
    pub fn exposure_pct(&self) -> u8 {
        match (self.status, self.strategy) {
            (DeploymentStatus::Recalled, _) => 0,
            (_, Strategy::Shadow) => 0,
            (_, Strategy::Ab) => self.ab_pct,
            (_, Strategy::Staged) => self.stage_schedule.get(self.stage_index).map_or(0, |s| s.1),
        }
    }
}

/// Start a deployment; the candidate must hold a passing offline verdict and
/// the control must be live.
pub fn start(
    registry: &mut Registry,
    strategy: Strategy,
    control: &str,
    candidate: &str,
    ab_pct: u8,
    stage_schedule: Vec<(u32, u8)>,
    at: DateTime<Utc>,
) -> Result<Deployment, RolloutError> {
    if control == candidate {
        return Err(RolloutError::Invalid("control and candidate must differ".into()));
    }
    if registry.state(control)? != VersionState::Live {
        return Err(RolloutError::Invalid(format!("control {control} is not live")));
    }
    let cs = registry.state(candidate)?;
    if cs != VersionState::OfflinePassed {
        return Err(RolloutError::Invalid(format!(
            "candidate {candidate} is {cs}; only offline_passed versions may enter live testing"
        )));
    }
    if ab_pct > 100 {
        return Err(RolloutError::Invalid("ab_pct must lie in 0..=100".into()));
    }
    if strategy == Strategy::Staged {
        if stage_schedule.is_empty() {
            return Err(RolloutError::Invalid("staged rollout needs a schedule".into()));
        }
        if stage_schedule.iter().any(|s| s.1 > 100) || stage_schedule.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(RolloutError::Invalid("stage percentages must be non-decreasing within 0..=100".into()));
        }
    }
    registry.transition(candidate, VersionState::LiveCandidate, &format!("{strategy:?} deployment"), at)?;
    let id = format!(
        "dep-{}",
        &sha256_hex(format!("{control}|{candidate}|{strategy:?}|{}", at.to_rfc3339()).as_bytes())[..12]
    );
    Ok(Deployment {
        deployment_id: id,
        strategy,
        control: control.to_string(),
        candidate: candidate.to_string(),
        ab_pct,
        stage_schedule,
        stage_index: 0,
        status: DeploymentStatus::Active,
        started_at: at,
        stage_started_at: at,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub serve: String,
    pub also_run: Option<String>,
}

/// Deterministic bucket in 0..100 for an assignment key.
pub fn bucket(query_id: &str) -> u64 {
    hash64(query_id) % 100
}

pub fn route(query_id: &str, d: &Deployment) -> Result<Assignment, RolloutError> {
    match d.status {
        DeploymentStatus::Completed => Err(RolloutError::NotActive),
        DeploymentStatus::Recalled => Ok(Assignment {
            serve: d.control.clone(),
            also_run: None,
        }),
        DeploymentStatus::Active => Ok(match d.strategy {
            Strategy::Shadow => Assignment {
                serve: d.control.clone(),
                also_run: Some(d.candidate.clone()),
            },
            Strategy::Ab | Strategy::Staged => {
                let serve = if bucket(query_id) < u64::from(d.exposure_pct()) {
                    &d.candidate
                } else {
                    &d.control
                };
                Assignment {
                    serve: serve.clone(),
                    also_run: None,
                }
            }
        }),
    }
}

fn promote(registry: &mut Registry, d: &mut Deployment, at: DateTime<Utc>) -> Result<(), RolloutError> {
    registry.transition(&d.control, VersionState::Retired, &format!("replaced by {}", d.candidate), at)?;
    registry.transition(&d.candidate, VersionState::Live, &format!("promoted by {}", d.deployment_id), at)?;
    d.status = DeploymentStatus::Completed;
    Ok(())
}

/// Move a staged deployment to its next stage; reaching the final stage makes
/// the candidate live. Blocked while a metric breach alert is open for the candidate.
pub fn advance(registry: &mut Registry, d: &mut Deployment, alerts: &[Alert], at: DateTime<Utc>) -> Result<(), RolloutError> {
    if d.status == DeploymentStatus::Completed {
        return Ok(());
    }
    if d.status != DeploymentStatus::Active {
        return Err(RolloutError::NotActive);
    }
    if d.strategy != Strategy::Staged {
        return Err(RolloutError::Invalid("only staged deployments advance; use promote".into()));
    }
    let open: Vec<&str> = alerts
        .iter()
        .filter(|a| a.open && a.kind == AlertKind::MetricBreach && a.pipeline_version.as_deref() == Some(&d.candidate))
        .map(|a| a.alert_id.as_str())
        .collect();
    if !open.is_empty() {
        return Err(RolloutError::Blocked(format!("open metric breach alerts {open:?}")));
    }
    if d.stage_index + 1 < d.stage_schedule.len() {
        d.stage_index += 1;
        d.stage_started_at = at;
    }
    if d.stage_index + 1 == d.stage_schedule.len() {
        promote(registry, d, at)?;
    }
    Ok(())
}

/// Promote the candidate of a shadow or A/B deployment.
pub fn promote_candidate(registry: &mut Registry, d: &mut Deployment, alerts: &[Alert], at: DateTime<Utc>) -> Result<(), RolloutError> {
    if d.status != DeploymentStatus::Active {
        return Err(RolloutError::NotActive);
    }
    if alerts
        .iter()
        .any(|a| a.open && a.kind == AlertKind::MetricBreach && a.pipeline_version.as_deref() == Some(&d.candidate))
    {
        return Err(RolloutError::Blocked("open metric breach alert for candidate".into()));
    }
    promote(registry, d, at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub deployment_id: String,
    pub version_id: String,
    pub reason: String,
    pub alert_ids: Vec<String>,
    pub at: DateTime<Utc>,
}

/// Send the candidate back to offline testing; all traffic returns to control.
pub fn recall(
    registry: &mut Registry,
    d: &mut Deployment,
    reason: &str,
    alert_ids: Vec<String>,
    at: DateTime<Utc>,
) -> Result<FeedbackRecord, RolloutError> {
    if d.status != DeploymentStatus::Active {
        return Err(RolloutError::NotActive);
    }
    registry.transition(&d.candidate, VersionState::Recalled, reason, at)?;
    d.status = DeploymentStatus::Recalled;
    Ok(FeedbackRecord {
        feedback_id: format!(
            "fb-{}",
            &sha256_hex(format!("{}|{}|{}", d.deployment_id, reason, at.to_rfc3339()).as_bytes())[..12]
        ),
        deployment_id: d.deployment_id.clone(),
        version_id: d.candidate.clone(),
        reason: reason.to_string(),
        alert_ids,
        at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub query_id: String,
    pub retrieval_overlap: f64,
    pub faithfulness_delta: f64,
    pub control_answer: String,
    pub candidate_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub control: String,
    pub candidate: String,
    pub paired: usize,
    /// Control queries with no candidate response.
    pub candidate_failures: usize,
    /// Candidate minus control.
    pub faithfulness_delta: f64,
    pub latency_ms_delta: f64,
    pub grounded_delta: f64,
    /// Mean Jaccard similarity of retrieved chunk sets.
    pub retrieval_overlap: f64,
    pub top_divergent: Vec<Divergence>,
}

fn jaccard(a: &[String], b: &[String]) -> f64 {
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Pair control and candidate responses by query id and report deltas.
pub fn compare_shadow(records: &[ResponseRecord], control: &str, candidate: &str, top: usize) -> Result<ComparisonReport, RolloutError> {
    let by = |v: &str| -> BTreeMap<String, &ResponseRecord> {
        records
            .iter()
            .filter(|r| r.pipeline_version == v)
            .filter_map(|r| r.query_id.clone().map(|q| (q, r)))
            .collect()
    };
    let ctl = by(control);
    let cand = by(candidate);
    let mut pairs = Vec::new();
    let mut failures = 0;
    for (q, c) in &ctl {
        match cand.get(q) {
            Some(k) => pairs.push((q, *c, *k)),
            None => failures += 1,
        }
    }
    if pairs.is_empty() {
        return Err(RolloutError::EmptyWindow);
    }
    let diff = |f: &dyn Fn(&ResponseRecord) -> f64| -> f64 {
        let d: Vec<f64> = pairs.iter().map(|(_, c, k)| f(k) - f(c)).collect();
        stable_mean(&d).unwrap_or(0.0)
    };
    let faith = |r: &ResponseRecord| r.faithfulness.unwrap_or(0.0);
    let overlaps: Vec<f64> = pairs.iter().map(|(_, c, k)| jaccard(&c.retrieved, &k.retrieved)).collect();
    let mut div: Vec<Divergence> = pairs
        .iter()
        .zip(&overlaps)
        .map(|((q, c, k), o)| Divergence {
            query_id: (*q).clone(),
            retrieval_overlap: *o,
            faithfulness_delta: faith(k) - faith(c),
            control_answer: c.answer.clone(),
            candidate_answer: k.answer.clone(),
        })
        .collect();
    div.sort_by(|a, b| {
        a.retrieval_overlap
            .total_cmp(&b.retrieval_overlap)
            .then(b.faithfulness_delta.abs().total_cmp(&a.faithfulness_delta.abs()))
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
    div.retain(|d| d.retrieval_overlap < 1.0 || d.faithfulness_delta != 0.0 || d.control_answer != d.candidate_answer);
    div.truncate(top);
    Ok(ComparisonReport {
        control: control.to_string(),
        candidate: candidate.to_string(),
        paired: pairs.len(),
        candidate_failures: failures,
        faithfulness_delta: diff(&faith),
        latency_ms_delta: diff(&|r| r.latency_ms),
        grounded_delta: diff(&|r| if r.grounded { 1.0 } else { 0.0 }),
        retrieval_overlap: stable_mean(&overlaps).unwrap_or(1.0),
        top_divergent: div,
    })
}

/// Stage cleanliness window: a fixed number of queries or a duration, whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageWindow {
    pub max_queries: usize,
    pub max_seconds: i64,
}

impl Default for StageWindow {
    fn default() -> Self {
        Self {
            max_queries: 1000,
            max_seconds: 3600,
        }
    }
}

impl StageWindow {
    pub fn complete(&self, queries_seen: usize, since: DateTime<Utc>, now: DateTime<Utc>) -> bool {
        queries_seen >= self.max_queries || (now - since).num_seconds() >= self.max_seconds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        let mut r = Registry::default();
        let t = Utc::now();
        r.register("v1", "d1").unwrap();
        r.register("v2", "d2").unwrap();
        r.mark_offline_passed("v1", "rep-a", t).unwrap();
        r.bootstrap("v1", t).unwrap();
        r.mark_offline_passed("v2", "rep-b", t).unwrap();
        r
    }

    #[test]
    fn transition_table_is_exhaustive() {
        use VersionState::*;
        let allowed = [
            (Draft, OfflinePassed),
            (OfflinePassed, LiveCandidate),
            (LiveCandidate, Live),
            (Live, Retired),
            (LiveCandidate, Recalled),
            (Live, Recalled),
            (Recalled, OfflinePassed),
        ];
        for a in VersionState::ALL {
            for b in VersionState::ALL {
                assert_eq!(a.can_move_to(b), allowed.contains(&(a, b)), "{a} -> {b}");
            }
        }
    }

    #[test]
    fn staged_advances_to_live() {
        let mut r = reg();
        let t = Utc::now();
        let mut d = start(&mut r, Strategy::Staged, "v1", "v2", 0, vec![(1, 10), (2, 50), (3, 100)], t).unwrap();
        assert_eq!(d.exposure_pct(), 10);
        advance(&mut r, &mut d, &[], t).unwrap();
        assert_eq!(d.exposure_pct(), 50);
        assert_eq!(r.state("v2").unwrap(), VersionState::LiveCandidate);
        advance(&mut r, &mut d, &[], t).unwrap();
        assert_eq!(r.state("v2").unwrap(), VersionState::Live);
        assert_eq!(r.state("v1").unwrap(), VersionState::Retired);
        advance(&mut r, &mut d, &[], t).unwrap();
        assert_eq!(d.status, DeploymentStatus::Completed);
    }

    #[test]
    fn advance_blocked_by_open_breach() {
        let mut r = reg();
        let t = Utc::now();
        let mut d = start(&mut r, Strategy::Staged, "v1", "v2", 0, vec![(1, 10), (2, 100)], t).unwrap();
        let alert = Alert {
            alert_id: "a1".into(),
            kind: AlertKind::MetricBreach,
            evidence: "live-x".into(),
            action_hint: crate::coverage::ActionHint::InvestigatePipeline,
            pipeline_version: Some("v2".into()),
            summary: String::new(),
            open: true,
        };
        assert!(matches!(advance(&mut r, &mut d, &[alert], t), Err(RolloutError::Blocked(_))));
    }

    #[test]
    fn recall_routes_to_control_and_requires_regate() {
        let mut r = reg();
        let t = Utc::now();
        let mut d = start(&mut r, Strategy::Ab, "v1", "v2", 50, vec![], t).unwrap();
        let fb = recall(&mut r, &mut d, "latency breach", vec!["a1".into()], t).unwrap();
        assert_eq!(fb.alert_ids, ["a1"]);
        for i in 0..200 {
            assert_eq!(route(&format!("q{i}"), &d).unwrap().serve, "v1");
        }
        assert!(start(&mut r, Strategy::Shadow, "v1", "v2", 0, vec![], t).is_err());
        r.mark_offline_passed("v2", "rep-c", t).unwrap();
        assert!(start(&mut r, Strategy::Shadow, "v1", "v2", 0, vec![], t).is_ok());
    }

    #[test]
    fn staged_schedule_must_not_decrease() {
        let mut r = reg();
        assert!(start(&mut r, Strategy::Staged, "v1", "v2", 0, vec![(1, 50), (2, 10)], Utc::now()).is_err());
        assert!(start(&mut r, Strategy::Ab, "v1", "v1", 10, vec![], Utc::now()).is_err());
    }
}
