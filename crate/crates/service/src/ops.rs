//! Operations shared by the CLI and the HTTP API, and their wire formats.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use veriflow_core::audit_log::{AuditSink, VerifyReport};
use veriflow_core::bus::{Bus, DeliveryReport};
use veriflow_core::clock::Clock;
use veriflow_core::metrics::MetricsSnapshot;
use veriflow_core::policy_trust::{
    DecisionRecord, DecisionSeverity, DomainSnapshot, EscalationEvent, PolicyError, ProposedAction, Resolution, ReviewItem,
    ReviewStatus, SubmitOutcome, TrustLevel, TrustState,
};
use veriflow_core::simulator::{simulate, ComparisonReport, ScenarioOutcome, ScenarioSummary, SimConfig};

use crate::error::ServiceError;
use crate::store::{Store, AUDIT_FILE, LATEST_METRICS_FILE, RUNS_DIR};

pub const PERSIST_TOPIC: &str = "runs.persist";
const RECENT_TRANSITIONS: usize = 20;

/// A review item as the dashboard sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewView {
    pub id: String,
    pub proposed_action: ProposedAction,
    pub severity: DecisionSeverity,
    pub confidence: f64,
    pub parity_gap: f64,
    pub compliance_flags: BTreeSet<String>,
    pub rationale: String,
    pub enqueued_at: DateTime<Utc>,
    pub deadline: DateTime<Utc>,
    pub status: ReviewStatus,
    pub reviewer: Option<String>,
    pub reviewer_rationale: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
}

impl From<&ReviewItem> for ReviewView {
    fn from(r: &ReviewItem) -> Self {
        ReviewView {
            id: r.decision.id.clone(),
            proposed_action: r.decision.proposed_action,
            severity: r.decision.severity,
            confidence: r.decision.confidence,
            parity_gap: r.decision.parity_gap,
            compliance_flags: r.decision.compliance_flags.clone(),
            rationale: r.decision.rationale.clone(),
            enqueued_at: r.enqueued_at,
            deadline: r.deadline,
            status: r.status,
            reviewer: r.reviewer.clone(),
            reviewer_rationale: r.reviewer_rationale.clone(),
            resolved_at: r.resolved_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub resolution: Resolution,
    pub reviewer: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustView {
    pub level: TrustLevel,
    pub override_rate: f64,
    pub intervention_accuracy: f64,
    pub window_len: usize,
    pub window_capacity: usize,
    pub critical_violations_in_window: usize,
    /// Most recent last.
    pub transitions: Vec<EscalationEvent>,
}

impl TrustView {
    pub fn new(trust: &TrustState, transitions: &[EscalationEvent]) -> Self {
        TrustView {
            level: trust.level,
            override_rate: trust.override_rate,
            intervention_accuracy: trust.intervention_accuracy,
            window_len: trust.window.len(),
            window_capacity: trust.capacity,
            critical_violations_in_window: trust.critical_violations_in_window,
            transitions: transitions[transitions.len().saturating_sub(RECENT_TRANSITIONS)..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditStatus {
    #[serde(flatten)]
    pub report: VerifyReport,
    pub head: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub scenario: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub run_id: String,
    pub persisted: bool,
    pub summary: ScenarioSummary,
}

/// The treated arm's snapshot from the latest pipeline run, with the
/// baseline for deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLatest {
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub current: MetricsSnapshot,
    pub baseline: Option<MetricsSnapshot>,
    pub comparison: Option<ComparisonReport>,
}

pub fn review_views(snapshot: &DomainSnapshot) -> Vec<ReviewView> {
    let mut v: Vec<ReviewView> = snapshot.reviews.values().map(ReviewView::from).collect();
    v.sort_by(|a, b| a.deadline.cmp(&b.deadline).then_with(|| a.id.cmp(&b.id)));
    v
}

pub fn list_reviews(store: &Store) -> Vec<ReviewView> {
    store.domain().reviews().into_iter().map(ReviewView::from).collect()
}

pub fn resolve(store: &mut Store, id: &str, req: &ResolveRequest, now: DateTime<Utc>) -> Result<ReviewView, ServiceError> {
    if req.reviewer.trim().is_empty() {
        return Err(ServiceError::Invalid("reviewer must not be empty".into()));
    }
    if req.rationale.trim().is_empty() {
        return Err(ServiceError::Invalid("rationale must not be empty".into()));
    }
    store.sweep(now)?;
    let item = store.mutate(|d| {
        d.resolve_review(id, req.resolution, &req.reviewer, &req.rationale, now)
            .map_err(|e| match e {
                PolicyError::Conflict {
                    id,
                    status: ReviewStatus::ExpiredAutoRejected,
                } => {
                    let deadline = d.review(&id).map_or(now, |r| r.deadline);
                    PolicyError::Expired { id, deadline }
                }
                other => other,
            })
    })?;
    Ok(ReviewView::from(&item))
}

pub fn submit(store: &mut Store, d: DecisionRecord, now: DateTime<Utc>) -> Result<SubmitOutcome, ServiceError> {
    store.sweep(now)?;
    store.mutate(|dom| dom.submit(d, now))
}

pub fn trust(store: &Store) -> TrustView {
    TrustView::new(store.domain().trust(), store.domain().transitions())
}

pub fn audit_status(dir: &Path) -> Result<AuditStatus, ServiceError> {
    let path = dir.join(AUDIT_FILE);
    let report = crate::store::verify_log(&path)?;
    let head = if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        veriflow_core::audit_log::import(&text)?
            .last()
            .map(|e| veriflow_core::audit_log::format_digest(&e.entry_digest))
            .unwrap_or_default()
    } else {
        String::new()
    };
    Ok(AuditStatus { report, head })
}

fn check_run_id(id: &str) -> Result<(), ServiceError> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(ServiceError::Invalid(format!("bad run id `{id}`")));
    }
    Ok(())
}

pub fn run_id(scenario: &str, seed: u64) -> String {
    format!("{scenario}-seed{seed}")
}

pub fn run_scenario(name: &str, seed: Option<u64>) -> Result<(String, ScenarioOutcome), ServiceError> {
    let mut cfg = SimConfig::builtin(name)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let outcome = simulate(&cfg)?;
    Ok((run_id(&cfg.name, cfg.seed), outcome))
}

/// Writes a run's artifacts under `root/<run_id>/`: each arm's event
/// streams, or the bench report, plus the outcome summary.
pub fn write_outcome(root: &Path, run_id: &str, outcome: &ScenarioOutcome) -> Result<(), ServiceError> {
    check_run_id(run_id)?;
    let dir = root.join(run_id);
    std::fs::create_dir_all(&dir)?;
    match outcome {
        ScenarioOutcome::Pipeline(p) => {
            p.manual.write_dir(&dir.join("manual"))?;
            p.ai.write_dir(&dir.join("ai"))?;
            std::fs::write(dir.join("comparison.json"), pretty(&p.comparison))?;
        }
        ScenarioOutcome::ConvergenceBench(b) => {
            std::fs::write(dir.join("bench.json"), pretty(b))?;
        }
    }
    std::fs::write(dir.join("summary.json"), pretty(&outcome.summary()))?;
    Ok(())
}

pub fn latest_metrics(run_id: &str, outcome: &ScenarioOutcome) -> Option<MetricsLatest> {
    match outcome {
        ScenarioOutcome::Pipeline(p) => Some(MetricsLatest {
            run_id: run_id.to_string(),
            scenario: p.ai.scenario.clone(),
            seed: p.ai.seed,
            current: p.ai.snapshot.clone(),
            baseline: Some(p.manual.snapshot.clone()),
            comparison: Some(p.comparison.clone()),
        }),
        ScenarioOutcome::ConvergenceBench(_) => None,
    }
}

#[derive(Serialize, Deserialize)]
struct PersistMessage {
    run_id: String,
    outcome: ScenarioOutcome,
}

/// Registers the handler that stores run artifacts under the data directory.
pub fn register_persist(bus: &mut Bus, data_dir: &Path) {
    let dir = data_dir.to_path_buf();
    bus.register(
        PERSIST_TOPIC,
        Box::new(move |msg| {
            let m: PersistMessage = serde_json::from_slice(&msg.payload).map_err(|e| e.to_string())?;
            write_outcome(&dir.join(RUNS_DIR), &m.run_id, &m.outcome).map_err(|e| e.to_string())?;
            if let Some(latest) = latest_metrics(&m.run_id, &m.outcome) {
                std::fs::write(dir.join(LATEST_METRICS_FILE), pretty(&latest)).map_err(|e| e.to_string())?;
            }
            Ok(())
        }),
    );
}

/// Runs a scenario, hands the artifacts to the bus for storage and notes the
/// run in the audit log.
pub fn simulate_and_store(
    store: &mut Store,
    bus: &mut Bus,
    clock: &dyn Clock,
    req: &SimulateRequest,
) -> Result<SimulateResponse, ServiceError> {
    let (run_id, outcome) = run_scenario(&req.scenario, req.seed)?;
    let summary = outcome.summary();
    let payload = serde_json::to_vec(&PersistMessage {
        run_id: run_id.clone(),
        outcome,
    })
    .expect("outcome serializes");
    let report: DeliveryReport = store.mutate(|d| {
        let sink: &mut dyn AuditSink = d.audit_sink_mut();
        bus.dispatch_with_retry(PERSIST_TOPIC, &payload, clock, sink)
    })?;
    if report.delivered {
        let heads = match &summary {
            ScenarioSummary::Pipeline { manual, ai, .. } => json!({ "manual": manual.audit_head, "ai": ai.audit_head }),
            ScenarioSummary::ConvergenceBench { .. } => json!(null),
        };
        store.mutate(|d| {
            d.note(
                &format!("simulation run {run_id} stored"),
                &json!({ "run_id": run_id, "audit_heads": heads }),
                clock.now(),
            )
        })?;
    }
    Ok(SimulateResponse {
        run_id,
        persisted: report.delivered,
        summary,
    })
}

pub fn read_run(data_dir: &Path, id: &str) -> Result<ScenarioSummary, ServiceError> {
    check_run_id(id)?;
    let path = data_dir.join(RUNS_DIR).join(id).join("summary.json");
    if !path.exists() {
        return Err(ServiceError::NotFound(format!("run `{id}` not found")));
    }
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| ServiceError::Domain(e.to_string()))
}

pub fn read_latest_metrics(data_dir: &Path) -> Result<MetricsLatest, ServiceError> {
    let path = data_dir.join(LATEST_METRICS_FILE);
    if !path.exists() {
        return Err(ServiceError::NotFound("no pipeline run yet".into()));
    }
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| ServiceError::Domain(e.to_string()))
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}
