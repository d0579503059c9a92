use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ragops_core::coverage::Axis;
use ragops_core::evaluation::{load_cases_file, Level, TestCase};
use ragops_core::rollout::Strategy;
use ragops_core::verification::Resolution;
use serde_json::Value;

use crate::ops::Command;

#[derive(Debug, Parser)]
#[command(name = "ragops", version, about = "Operate a retrieval-augmented generation deployment")]
pub struct Cli {
    /// Deployment config (TOML). Defaults apply when the file is absent.
    #[arg(long, global = true, default_value = "ragops.toml")]
    pub config: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub cmd: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Ingest from a configured source, a directory or a JSONL feed.
    Ingest {
        #[arg(long, required_unless_present = "feed")]
        source: Option<String>,
        /// JSONL body to ingest as-is (`-` reads stdin).
        #[arg(long, conflicts_with = "source", requires = "source_id")]
        feed: Option<String>,
        #[arg(long)]
        source_id: Option<String>,
    },
    /// Run verification on a JSONL feed without storing anything.
    Verify {
        #[arg(long)]
        source_id: String,
        /// JSONL file (`-` reads stdin).
        feed: String,
    },
    /// Conflict tickets awaiting review.
    Review {
        #[command(subcommand)]
        cmd: ReviewCmd,
    },
    /// Bring the index up to the lake.
    Reindex {
        #[arg(long)]
        full: bool,
    },
    /// Run a test suite, or gate a stored report with `--report`.
    Test {
        #[arg(long, value_parser = parse_level, required_unless_present = "report")]
        level: Option<Level>,
        #[arg(long, required_unless_present = "report")]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pipeline version under test; the live one by default.
        #[arg(long = "pipeline")]
        pipeline: Option<String>,
        /// Gate the new report against the configured thresholds.
        #[arg(long)]
        gate: bool,
        /// Gate an existing report instead of running a suite.
        #[arg(long, conflicts_with_all = ["level", "suite"])]
        report: Option<String>,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Coverage of live traffic by a test suite.
    Coverage {
        #[arg(long = "axis", value_parser = parse_axis)]
        axes: Vec<Axis>,
        #[arg(long, required_unless_present_any = ["list", "live", "alerts"])]
        suite: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
        /// List stored coverage reports.
        #[arg(long, conflicts_with_all = ["suite", "live", "alerts"])]
        list: bool,
        /// Live metrics per served version instead of coverage.
        #[arg(long, conflicts_with_all = ["suite", "alerts"])]
        live: bool,
        /// List raised alerts.
        #[arg(long, conflicts_with = "suite")]
        alerts: bool,
    },
    /// Answer one query.
    Query {
        query: String,
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        query_id: Option<String>,
    },
    /// Version, index epoch and lake sequence.
    Health,
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Shadow, A/B and staged rollouts.
    Deploy {
        #[command(subcommand)]
        cmd: DeployCmd,
    },
    /// Span tree of one trace.
    Trace { trace_id: String },
    /// Lineage of one response.
    Lineage { response_id: String },
    /// The versioned data lake.
    Lake {
        #[command(subcommand)]
        cmd: LakeCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCmd {
    List,
    Resolve {
        ticket_id: String,
        #[arg(long, value_enum)]
        keep: Keep,
        #[arg(long, default_value = "operator")]
        resolver: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Keep {
    A,
    B,
    Both,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// RFC 3339 start of the window.
    #[arg(long)]
    since: Option<DateTime<Utc>>,
    #[arg(long)]
    until: Option<DateTime<Utc>>,
}

#[derive(Debug, Subcommand)]
pub enum DeployCmd {
    Shadow {
        #[arg(long)]
        candidate: String,
    },
    Ab {
        #[arg(long)]
        candidate: String,
        #[arg(long)]
        pct: u8,
    },
    Staged {
        #[arg(long)]
        candidate: String,
        /// Exposure per stage, e.g. `10,50,100`.
        #[arg(long, value_delimiter = ',', required = true)]
        schedule: Vec<u8>,
    },
    Advance {
        /// Skip the stage window check.
        #[arg(long)]
        force: bool,
    },
    Recall {
        #[arg(long)]
        reason: String,
    },
    Promote,
    Status,
    /// Pair control and candidate responses by query id.
    Compare {
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum LakeCmd {
    /// Live documents as JSONL.
    Export,
    History {
        doc_key: String,
    },
    Get {
        doc_key: String,
        #[arg(long)]
        version: Option<u32>,
        #[arg(long)]
        role: Option<String>,
    },
    Rollback {
        doc_key: String,
        version: u32,
    },
    Integrity,
}

fn parse_level(s: &str) -> Result<Level, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
}

/// What the binary should do after parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Run(Command),
    Serve { addr: String },
}

fn read_body(path: &str) -> Result<String, String> {
    if path == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(|e| format!("stdin: {e}"))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
}

fn read_cases(path: &Path) -> Result<Vec<TestCase>, String> {
    load_cases_file(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Turn parsed arguments into an action. Errors here are usage errors:
/// unreadable or malformed input files.
pub fn action(sub: Sub) -> Result<Action, String> {
    use Command as C;
    let cmd = match sub {
        Sub::Serve { addr } => return Ok(Action::Serve { addr }),
        Sub::Ingest {
            source,
            feed,
            source_id,
        } => match (source, feed) {
            (_, Some(feed)) => C::IngestJsonl {
                source_id: source_id.unwrap_or_default(),
                body: read_body(&feed)?,
            },
            (Some(source), None) => C::Ingest { source },
            (None, None) => return Err("ingest needs --source or --feed".into()),
        },
        Sub::Verify { source_id, feed } => C::Verify {
            source_id,
            body: read_body(&feed)?,
        },
        Sub::Review { cmd } => match cmd {
            ReviewCmd::List => C::ReviewList,
            ReviewCmd::Resolve {
                ticket_id,
                keep,
                resolver,
            } => C::ReviewResolve {
                ticket_id,
                resolution: match keep {
                    Keep::A => Resolution::KeepA,
                    Keep::B => Resolution::KeepB,
                    Keep::Both => Resolution::KeepBoth,
                },
                resolver,
            },
        },
        Sub::Reindex { full } => C::Reindex { full },
        Sub::Test {
            level,
            suite,
            seed,
            pipeline,
            gate,
            report,
            baseline,
        } => match (report, level, suite) {
            (Some(report_id), _, _) => C::Gate { report_id, baseline },
            (None, Some(level), Some(suite)) => C::Test {
                level,
                cases: read_cases(&suite)?,
                seed,
                version: pipeline,
                gate,
                baseline,
            },
            _ => return Err("test needs --level and --suite, or --report".into()),
        },
        Sub::Coverage {
            axes,
            suite,
            window,
            list,
            live,
            alerts,
        } => {
            if list {
                C::CoverageReports
            } else if alerts {
                C::Alerts
            } else if live {
                C::LiveCheck {
                    since: window.since,
                    until: window.until,
                }
            } else {
                let suite = suite.ok_or("coverage needs --suite")?;
                C::Coverage {
                    axes,
                    cases: read_cases(&suite)?,
                    since: window.since,
                    until: window.until,
                }
            }
        }
        Sub::Query { query, role, query_id } => C::Query { query, role, query_id },
        Sub::Health => C::Health,
        Sub::Deploy { cmd } => match cmd {
            DeployCmd::Shadow { candidate } => C::DeployStart {
                strategy: Strategy::Shadow,
                candidate,
                pct: 0,
                schedule: vec![],
            },
            DeployCmd::Ab { candidate, pct } => C::DeployStart {
                strategy: Strategy::Ab,
                candidate,
                pct,
                schedule: vec![],
            },
            DeployCmd::Staged { candidate, schedule } => C::DeployStart {
                strategy: Strategy::Staged,
                candidate,
                pct: 0,
                schedule: schedule.into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect(),
            },
            DeployCmd::Advance { force } => C::DeployAdvance { force },
            DeployCmd::Recall { reason } => C::DeployRecall { reason },
            DeployCmd::Promote => C::DeployPromote,
            DeployCmd::Status => C::DeployStatus,
            DeployCmd::Compare { window, top } => C::DeployCompare {
                since: window.since,
                until: window.until,
                top,
            },
        },
        Sub::Trace { trace_id } => C::Trace { trace_id },
        Sub::Lineage { response_id } => C::Lineage { response_id },
        Sub::Lake { cmd } => match cmd {
            LakeCmd::Export => C::LakeExport,
            LakeCmd::History { doc_key } => C::LakeHistory { doc_key },
            LakeCmd::Get { doc_key, version, role } => C::LakeGet { doc_key, version, role },
            LakeCmd::Rollback { doc_key, version } => C::LakeRollback { doc_key, version },
            LakeCmd::Integrity => C::LakeIntegrity,
        },
    };
    Ok(Action::Run(cmd))
}

/// Parse argv into an action; `Err` carries the usage message.
pub fn parse<I, T>(argv: I) -> Result<(Cli, Action), String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let mut cli = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    let sub = std::mem::replace(&mut cli.cmd, Sub::Health);
    let act = action(sub)?;
    Ok((cli, act))
}

/// Plain-text rendering for the few outputs people read directly; the rest
/// print as pretty JSON.
pub fn render(cmd: &Command, out: &Value) -> String {
    match cmd {
        Command::Query { .. } => {
            let mut s = out["answer"].as_str().unwrap_or_default().to_string();
            if let Some(c) = out["citations"].as_array().filter(|c| !c.is_empty()) {
                let ids: Vec<&str> = c.iter().filter_map(Value::as_str).collect();
                s.push_str(&format!("\n\ncitations: {}", ids.join(", ")));
            }
            s.push_str(&format!("\nresponse {}  trace {}", out["response_id"].as_str().unwrap_or("-"), out["trace_id"].as_str().unwrap_or("-")));
            s
        }
        Command::LakeExport => out["jsonl"].as_str().unwrap_or_default().trim_end().to_string(),
        Command::Ingest { .. } | Command::IngestJsonl { .. } => {
            let r = &out["receipt"];
            format!(
                "{}: {} items, {} normalized, {} quarantined\ndecisions {}\nlake_seq {}  index epoch {}  open tickets {}",
                r["source_id"].as_str().unwrap_or("-"),
                r["total"],
                r["normalized"],
                r["quarantined"],
                out["decisions"],
                out["lake_seq"],
                out["index"]["epoch"],
                out["open_tickets"],
            )
        }
        _ => serde_json::to_string_pretty(out).unwrap_or_default(),
    }
}
