//! Operations shared by the CLI and the HTTP service. Each variant maps to
//! one engine call; both front ends build a `Command` and hand it to `execute`.

use chrono::{DateTime, Utc};
use ragops_core::coverage::Axis;
use ragops_core::engine::{DeployRequest, Engine, EngineError};
use ragops_core::evaluation::{Level, TestCase};
use ragops_core::rollout::Strategy;
use ragops_core::verification::Resolution;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    /// Poll a configured source id, or a directory / JSONL path.
    Ingest { source: String },
    /// Ingest a JSONL body under `source_id`.
    IngestJsonl { source_id: String, body: String },
    /// Dry-run verification of a JSONL body.
    Verify { source_id: String, body: String },
    ReviewList,
    ReviewResolve {
        ticket_id: String,
        resolution: Resolution,
        #[serde(default = "default_resolver")]
        resolver: String,
    },
    Reindex {
        #[serde(default)]
        full: bool,
    },
    Test {
        level: Level,
        cases: Vec<TestCase>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        version: Option<String>,
        /// Gate the stored report right after the run.
        #[serde(default)]
        gate: bool,
        #[serde(default)]
        baseline: Option<String>,
    },
    Gate {
        report_id: String,
        #[serde(default)]
        baseline: Option<String>,
    },
    Coverage {
        axes: Vec<Axis>,
        cases: Vec<TestCase>,
        #[serde(default)]
        since: Option<DateTime<Utc>>,
        #[serde(default)]
        until: Option<DateTime<Utc>>,
    },
    CoverageReports,
    LiveCheck {
        #[serde(default)]
        since: Option<DateTime<Utc>>,
        #[serde(default)]
        until: Option<DateTime<Utc>>,
    },
    Alerts,
    Query {
        query: String,
        #[serde(default)]
        role: Option<String>,
        #[serde(default)]
        query_id: Option<String>,
    },
    Health,
    DeployStart {
        strategy: Strategy,
        candidate: String,
        #[serde(default)]
        pct: u8,
        #[serde(default)]
        schedule: Vec<(u32, u8)>,
    },
    DeployAdvance {
        #[serde(default)]
        force: bool,
    },
    DeployRecall { reason: String },
    DeployPromote,
    DeployStatus,
    DeployCompare {
        #[serde(default)]
        since: Option<DateTime<Utc>>,
        #[serde(default)]
        until: Option<DateTime<Utc>>,
        #[serde(default = "default_top")]
        top: usize,
    },
    Trace { trace_id: String },
    Lineage { response_id: String },
    LakeExport,
    LakeHistory { doc_key: String },
    LakeGet {
        doc_key: String,
        #[serde(default)]
        version: Option<u32>,
        #[serde(default)]
        role: Option<String>,
    },
    LakeRollback { doc_key: String, version: u32 },
    LakeIntegrity,
}

fn default_resolver() -> String {
    "operator".into()
}

fn default_top() -> usize {
    10
}

impl Command {
    /// Every operation name, in declaration order.
    pub const NAMES: &'static [&'static str] = &[
        "ingest",
        "ingest_jsonl",
        "verify",
        "review_list",
        "review_resolve",
        "reindex",
        "test",
        "gate",
        "coverage",
        "coverage_reports",
        "live_check",
        "alerts",
        "query",
        "health",
        "deploy_start",
        "deploy_advance",
        "deploy_recall",
        "deploy_promote",
        "deploy_status",
        "deploy_compare",
        "trace",
        "lineage",
        "lake_export",
        "lake_history",
        "lake_get",
        "lake_rollback",
        "lake_integrity",
    ];

    pub fn name(&self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v["op"].as_str().map(str::to_string)).unwrap_or_default()
    }
}

fn to_value<T: Serialize>(v: T) -> Result<Value, EngineError> {
    // through Value so object keys come out sorted
    serde_json::to_value(v).map_err(|e| EngineError::Invalid(e.to_string()))
}

pub fn execute(engine: &Engine, cmd: Command) -> Result<Value, EngineError> {
    use Command as C;
    match cmd {
        C::Ingest { source } => to_value(engine.ingest_source(&source)?),
        C::IngestJsonl { source_id, body } => to_value(engine.ingest_jsonl(&source_id, &body)?),
        C::Verify { source_id, body } => to_value(engine.verify_jsonl(&source_id, &body)?),
        C::ReviewList => to_value(engine.open_tickets()),
        C::ReviewResolve {
            ticket_id,
            resolution,
            resolver,
        } => {
            let (ticket, record) = engine.resolve_ticket(&ticket_id, resolution, &resolver)?;
            Ok(json!({ "ticket": to_value(ticket)?, "resolution": to_value(record)? }))
        }
        C::Reindex { full } => to_value(engine.reindex(full)?),
        C::Test {
            level,
            cases,
            seed,
            version,
            gate,
            baseline,
        } => {
            let report = engine.run_suite(level, &cases, seed, version.as_deref())?;
            if !gate {
                return to_value(report);
            }
            let outcome = engine.gate(&report.report_id, baseline.as_deref())?;
            Ok(json!({ "report": to_value(report)?, "gate": to_value(outcome)? }))
        }
        C::Gate { report_id, baseline } => to_value(engine.gate(&report_id, baseline.as_deref())?),
        C::Coverage {
            axes,
            cases,
            since,
            until,
        } => {
            let axes = if axes.is_empty() { Axis::ALL.to_vec() } else { axes };
            to_value(engine.coverage(&axes, &cases, (since, until))?)
        }
        C::CoverageReports => to_value(engine.coverage_reports()),
        C::LiveCheck { since, until } => to_value(engine.live_check((since, until))?),
        C::Alerts => to_value(engine.alerts()),
        C::Query { query, role, query_id } => to_value(engine.query(&query, role.as_deref(), query_id.as_deref())?),
        C::Health => to_value(engine.health()),
        C::DeployStart {
            strategy,
            candidate,
            pct,
            schedule,
        } => to_value(engine.deploy_start(&DeployRequest {
            strategy,
            candidate,
            ab_pct: pct,
            schedule,
        })?),
        C::DeployAdvance { force } => to_value(engine.deploy_advance(force)?),
        C::DeployRecall { reason } => to_value(engine.deploy_recall(&reason)?),
        C::DeployPromote => to_value(engine.deploy_promote()?),
        C::DeployStatus => to_value(engine.deploy_status()),
        C::DeployCompare { since, until, top } => to_value(engine.deploy_compare((since, until), top)?),
        C::Trace { trace_id } => to_value(engine.trace(&trace_id)?),
        C::Lineage { response_id } => to_value(engine.lineage(&response_id)?),
        C::LakeExport => {
            let mut buf = Vec::new();
            let count = engine.export_live(&mut buf)?;
            Ok(json!({ "count": count, "jsonl": String::from_utf8_lossy(&buf) }))
        }
        C::LakeHistory { doc_key } => to_value(engine.history(&doc_key)?),
        C::LakeGet { doc_key, version, role } => to_value(engine.document(&doc_key, version, role.as_deref())?),
        C::LakeRollback { doc_key, version } => to_value(engine.rollback(&doc_key, version)?),
        C::LakeIntegrity => to_value(engine.integrity()),
    }
}
