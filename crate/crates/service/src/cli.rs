//! `veriflow` subcommands. JSON goes to stdout and a one-line summary to
//! stderr. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use veriflow_core::generation::{generate_cases, load_sut_model, TestCase};
use veriflow_core::ingest::{parse_defect_log, parse_requirements};
use veriflow_core::metrics::{snapshot, ChangeRecord, DeployEvent, IncidentEvent, QualityInputs};
use veriflow_core::optimizer::{optimize_suite, FixedDetection, KnownFault, OptimizerConfig, RolloutPolicy, TrainingFaults};
use veriflow_core::policy_trust::{load_policy_pack, DecisionRecord, Resolution};
use veriflow_core::simulator::{compare, train_validator, SimRun, SimSummary};
use veriflow_core::validation::{ExecutionRecord, VerdictRecord};

use crate::api::{serve, AppState};
use crate::error::ServiceError;
use crate::ops::{self, pretty, ResolveRequest};
use crate::store::{read_snapshot, Store};

#[derive(Debug, Parser)]
#[command(name = "veriflow", version, about = "Requirement-driven test pipeline with policy-gated autonomy")]
pub struct Cli {
    /// Directory holding the audit log, decision state and stored runs.
    #[arg(long, global = true, env = "VERIFLOW_DATA_DIR", default_value = "veriflow-data")]
    pub data_dir: PathBuf,
    /// Use this instant (RFC 3339) instead of the system clock for mutations.
    #[arg(long, global = true)]
    pub now: Option<DateTime<Utc>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a requirements document (or a defect log) into records.
    Ingest {
        /// Path, or `-` for stdin.
        file: PathBuf,
        #[arg(long)]
        defect_log: bool,
    },
    /// Generate test cases from requirements against a system model.
    Generate {
        #[arg(long)]
        requirements: PathBuf,
        #[arg(long)]
        sut: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Select a suite under a cost budget.
    Optimize(OptimizeArgs),
    /// Judge execution records with the rule/model ensemble.
    Validate {
        /// JSON array of execution records.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 300)]
        training_records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a catalog scenario: both arms and their comparison.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write event streams under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two stored arm runs (directories written by `simulate --out`).
    Compare { baseline: PathBuf, treated: PathBuf },
    /// Delivery metrics for a stored run
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Audit log checks
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Human review queue
    #[command(subcommand)]
    Reviews(ReviewsCommand),
    /// Submit pipeline decisions to the policy gate
    #[command(subcommand)]
    Decisions(DecisionsCommand),
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "VERIFLOW_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Policy pack JSON replacing the stored one.
        #[arg(long)]
        policy_pack: Option<PathBuf>,
        /// Freeze time at startup; advance it through `POST /api/v1/clock/advance`.
        #[arg(long)]
        virtual_clock: bool,
    },
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Test cases: the output of `generate` or a JSON array of cases.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    sut: PathBuf,
    #[arg(long, default_value_t = 8)]
    budget: u32,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Rollout::Random)]
    rollout: Rollout,
    /// Known faults `[{unit, subtlety}]` for the detection estimate;
    /// without it the reward is coverage only.
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Rollout {
    Random,
    Greedy,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Recompute the snapshot from a run directory's event streams.
    Report { run_dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Verify the hash chain on disk.
    Verify {
        /// Log file; defaults to the data directory's log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewsCommand {
    /// Review items, soonest deadline first.
    List,
    Resolve {
        #[arg(long)]
        id: String,
        #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
        approve: bool,
        #[arg(long)]
        reject: bool,
        #[arg(long, default_value = "cli")]
        reviewer: String,
        #[arg(long)]
        rationale: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum DecisionsCommand {
    /// Submit one decision record or an array of them.
    Submit { file: PathBuf },
}

struct Output {
    json: String,
    summary: String,
    ok: bool,
}

impl Output {
    fn ok<T: serde::Serialize>(v: &T, summary: impl Into<String>) -> Self {
        Output {
            json: pretty(v),
            summary: summary.into(),
            ok: true,
        }
    }
}

fn read_input(path: &Path) -> Result<String, ServiceError> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ServiceError::NotFound(format!("{}: no such file", path.display())),
        _ => e.into(),
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    serde_json::from_str(&read_input(path)?).map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))
}

fn domain<E: std::fmt::Display>(e: E) -> ServiceError {
    ServiceError::Domain(e.to_string())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CaseInput {
    Generated { cases: Vec<TestCase> },
    Cases(Vec<TestCase>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DecisionInput {
    One(Box<DecisionRecord>),
    Many(Vec<DecisionRecord>),
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    read_input(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ServiceError::Invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn execute(cli: Cli) -> Result<Output, ServiceError> {
    let now = cli.now.unwrap_or_else(Utc::now);
    match cli.command {
        Command::Ingest { file, defect_log } => {
            let text = read_input(&file)?;
            if defect_log {
                let recs = parse_defect_log(&text).map_err(domain)?;
                Ok(Output::ok(&recs, format!("parsed {} defect records", recs.len())))
            } else {
                let recs = parse_requirements(&text).map_err(domain)?;
                let unparsed = recs.iter().filter(|r| r.unparsed).count();
                Ok(Output::ok(&recs, format!("parsed {} requirements ({unparsed} unparsed)", recs.len())))
            }
        }
        Command::Generate { requirements, sut, seed } => {
            let reqs = parse_requirements(&read_input(&requirements)?).map_err(domain)?;
            let model = load_sut_model(&read_input(&sut)?).map_err(domain)?;
            let g = generate_cases(&reqs, &model, seed);
            let summary = format!(
                "generated {} cases; {} unmatched, {} skipped unparsed",
                g.cases.len(),
                g.unmatched.len(),
                g.skipped_unparsed
            );
            Ok(Output::ok(&g, summary))
        }
        Command::Optimize(a) => {
            let cases = match parse_json::<CaseInput>(&a.cases)? {
                CaseInput::Generated { cases } | CaseInput::Cases(cases) => cases,
            };
            let model = load_sut_model(&read_input(&a.sut)?).map_err(domain)?;
            let cfg = OptimizerConfig {
                budget: a.budget,
                iterations: a.iterations,
                seed: a.seed,
                rollout_policy: match a.rollout {
                    Rollout::Random => RolloutPolicy::Random,
                    Rollout::Greedy => RolloutPolicy::Greedy,
                },
                ..OptimizerConfig::default()
            };
            let out = match &a.faults {
                Some(f) => {
                    let faults: Vec<KnownFault> = parse_json(f)?;
                    optimize_suite(&cases, &model, &cfg, &TrainingFaults { faults })
                }
                None => optimize_suite(&cases, &model, &cfg, &FixedDetection(0.0)),
            }
            .map_err(domain)?;
            let mut summary = format!(
                "selected {} cases, cost {}/{}, reward {:.4} (greedy {:.4})",
                out.suite.len(),
                out.cost,
                cfg.budget,
                out.reward,
                out.stats.greedy_reward
            );
            if !out.stats.excluded.is_empty() {
                summary.push_str(&format!("; warning: {} cases exceed the budget", out.stats.excluded.len()));
            }
            Ok(Output::ok(&out, summary))
        }
        Command::Validate {
            records,
            training_records,
            seed,
        } => {
            let recs: Vec<ExecutionRecord> = parse_json(&records)?;
            let v = train_validator(training_records, seed)?;
            let verdicts = recs
                .iter()
                .map(|r| v.judge(r))
                .collect::<Result<Vec<VerdictRecord>, _>>()
                .map_err(domain)?;
            let defects = verdicts
                .iter()
                .filter(|v| v.verdict == veriflow_core::validation::Verdict::TrueDefect)
                .count();
            Ok(Output::ok(&verdicts, format!("{defects} of {} records judged true defects", verdicts.len())))
        }
        Command::Simulate { scenario, seed, out } => {
            let (run_id, outcome) = ops::run_scenario(&scenario, seed)?;
            if let Some(dir) = &out {
                ops::write_outcome(dir, &run_id, &outcome)?;
            }
            let summary = match outcome.summary() {
                veriflow_core::simulator::ScenarioSummary::Pipeline { manual, ai, comparison } => format!(
                    "{run_id}: detection {:.3} vs {:.3}, lead time {:.1} h vs {:.1} h, p = {:.4}, {} blocked non-compliant",
                    ai.detection_rate,
                    manual.detection_rate,
                    ai.snapshot.lead_time_hours.mean,
                    manual.snapshot.lead_time_hours.mean,
                    comparison.ab.p_value,
                    ai.blocked_noncompliant
                ),
                veriflow_core::simulator::ScenarioSummary::ConvergenceBench { converged, total, .. } => {
                    format!("{run_id}: {converged}/{total} suites converged")
                }
            };
            Ok(Output::ok(&outcome.summary(), summary))
        }
        Command::Compare { baseline, treated } => {
            let a = SimRun::load_dir(&baseline)?;
            let b = SimRun::load_dir(&treated)?;
            let r = compare(&a, &b)?;
            let lead = r.metrics.get("lead_time_mean_hours").and_then(|m| m.percent_change);
            let summary = match lead {
                Some(p) => format!("lead time {:+.1}%, p = {:.4}", p * 100.0, r.ab.p_value),
                None => format!("p = {:.4}", r.ab.p_value),
            };
            Ok(Output::ok(&r, summary))
        }
        Command::Metrics(MetricsCommand::Report { run_dir }) => {
            let changes: Vec<ChangeRecord> = read_jsonl(&run_dir.join("changes.jsonl"))?;
            let deploys: Vec<DeployEvent> = read_jsonl(&run_dir.join("deploys.jsonl"))?;
            let incidents: Vec<IncidentEvent> = read_jsonl(&run_dir.join("incidents.jsonl"))?;
            let s: SimSummary = parse_json(&run_dir.join("summary.json"))?;
            let snap = snapshot(
                &changes,
                &deploys,
                &incidents,
                QualityInputs {
                    coverage: s.snapshot.coverage,
                    detection_rate: s.snapshot.detection_rate,
                    override_rate: s.snapshot.override_rate,
                },
                s.snapshot.window,
            )
            .map_err(domain)?;
            let summary = format!(
                "lead time {:.1} h, {:.2} deploys/week, CFR {:.3}, MTTR {:.1} h",
                snap.lead_time_hours.mean, snap.deploys_per_week, snap.change_failure_rate, snap.mttr_hours
            );
            Ok(Output::ok(&snap, summary))
        }
        Command::Audit(AuditCommand::Verify { log }) => {
            let status = match log {
                Some(path) => {
                    if !path.exists() {
                        return Err(ServiceError::NotFound(format!("{}: no such file", path.display())));
                    }
                    ops::AuditStatus {
                        report: crate::store::verify_log(&path)?,
                        head: String::new(),
                    }
                }
                None => ops::audit_status(&cli.data_dir)?,
            };
            let ok = status.report.ok;
            let summary = match status.report.broken_seq {
                None => format!("chain intact, {} entries", status.report.entries),
                Some(n) => format!("chain broken at seq {n}"),
            };
            Ok(Output {
                json: pretty(&status),
                summary,
                ok,
            })
        }
        Command::Reviews(ReviewsCommand::List) => {
            let views = read_snapshot(&cli.data_dir)?.map(|s| ops::review_views(&s)).unwrap_or_default();
            let pending = views.iter().filter(|v| v.status == veriflow_core::policy_trust::ReviewStatus::Pending).count();
            Ok(Output::ok(&views, format!("{} review items, {pending} pending", views.len())))
        }
        Command::Reviews(ReviewsCommand::Resolve {
            id,
            approve,
            reject: _,
            reviewer,
            rationale,
        }) => {
            let mut store = Store::open(&cli.data_dir, None)?;
            let req = ResolveRequest {
                resolution: if approve { Resolution::Approve } else { Resolution::Reject },
                reviewer,
                rationale,
            };
            let view = ops::resolve(&mut store, &id, &req, now)?;
            Ok(Output::ok(&view, format!("{id} resolved as {:?}", view.status)))
        }
        Command::Decisions(DecisionsCommand::Submit { file }) => {
            let decisions = match parse_json::<DecisionInput>(&file)? {
                DecisionInput::One(d) => vec![*d],
                DecisionInput::Many(v) => v,
            };
            let mut store = Store::open(&cli.data_dir, None)?;
            let mut outcomes = Vec::new();
            for d in decisions {
                outcomes.push(ops::submit(&mut store, d, now)?);
            }
            let queued = outcomes
                .iter()
                .filter(|o| o.disposition == veriflow_core::policy_trust::Disposition::Queued)
                .count();
            Ok(Output::ok(&outcomes, format!("submitted {} decisions, {queued} queued for review", outcomes.len())))
        }
        Command::Serve {
            port,
            bind,
            policy_pack,
            virtual_clock,
        } => {
            let policies = match &policy_pack {
                Some(p) => Some(load_policy_pack(&read_input(p)?)?),
                None => None,
            };
            let store = Store::open(&cli.data_dir, policies)?;
            let state = AppState::with_clock(store, virtual_clock);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, SocketAddr::new(bind, port)))?;
            Ok(Output {
                json: String::new(),
                summary: "stopped".into(),
                ok: true,
            })
        }
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            let _ = write!(stdout, "{}", out.json);
            let _ = writeln!(stderr, "{}", out.summary);
            if out.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let _ = write!(stdout, "{}", pretty(&e.to_api("cli")));
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
