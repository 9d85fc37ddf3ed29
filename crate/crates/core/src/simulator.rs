//! Seeded CI/CD simulation of a manual testing arm against the automated
//! pipeline, over a system model carrying injected defects.
//!
//! Faults live only in [`FaultySut`], which generation and optimization never
//! see: they receive the plain [`SutModel`]. Only [`execute_case`] reads the
//! fault set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit_log::{canonical_payload, AuditChain, AuditEntry, AuditKind};
use crate::clock::sim_epoch;
use crate::fairness::{parity, GroupCount, OutcomeTable, DEFAULT_PARITY_THRESHOLD};
use crate::generation::{coverage, generate_cases, load_sut_model, SutModel, TestCase};
use crate::ingest::{parse_requirements, RequirementRecord, Scalar, Severity};
use crate::metrics::{
    ab_test, percent_change, snapshot, AbTestReport, ChangeRecord, DeployEvent, DeployOutcome, IncidentEvent,
    MetricsSnapshot, QualityInputs, Window, DEFAULT_RESAMPLES,
};
use crate::optimizer::{
    run_feedback_loop, ConvergenceReport, KnownFault, OptimizerConfig, SuiteValidator,
    TrainingFaults,
};
use crate::policy_trust::{
    default_policy_pack, DecisionDomain, DecisionRecord, DecisionSeverity, Disposition, EscalationEvent,
    PolicyError, ProposedAction, Resolution, RuleSeverity, TrustLevel,
};
use crate::rng::{self, derive, SeededRng};
use crate::validation::{
    default_rule_pack, synthetic_benchmark, synthetic_failure, train_model, ExecutionRecord, Outcome, Validator,
    Verdict, VoteWeights, DEFAULT_LAMBDA_GRID, DEFAULT_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown system model `{0}`")]
    UnknownSut(String),
    #[error("scenario config: {0}")]
    Config(String),
    #[error("cannot place defects: the model has no coverage units")]
    NoUnits,
    #[error("case `{case}` steps on unknown endpoint `{endpoint}`")]
    UnknownEndpoint { case: String, endpoint: String },
    #[error("cannot compare runs of `{0}` and `{1}`")]
    Mismatch(String, String),
    #[error("scenario `{0}` is not a {1} scenario")]
    WrongKind(String, &'static str),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Generation(#[from] crate::generation::GenerationError),
    #[error(transparent)]
    Optimizer(#[from] crate::optimizer::OptimizerError),
    #[error(transparent)]
    Validation(#[from] crate::validation::ValidationError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Fairness(#[from] crate::fairness::FairnessError),
    #[error(transparent)]
    Audit(#[from] crate::audit_log::AuditError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubtletyDist {
    Uniform { a: f64, b: f64 },
    Fixed { value: f64 },
}

impl SubtletyDist {
    fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            SubtletyDist::Uniform { a, b } => (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b,
            SubtletyDist::Fixed { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("subtlety distribution {self:?} outside [0, 1]")))
        }
    }

    fn draw(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            SubtletyDist::Uniform { a, b } if a < b => rng.gen_range(a..b),
            SubtletyDist::Uniform { a, .. } => a,
            SubtletyDist::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Manual,
    Ai,
}

impl Arm {
    fn label(self) -> &'static str {
        match self {
            Arm::Manual => "MAN",
            Arm::Ai => "AI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Pipeline,
    ConvergenceBench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualParams {
    pub changes_per_week: u32,
    pub detection_skill: f64,
    pub lead_time_hours: f64,
    pub bias: f64,
    pub resolve_hours: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiParams {
    pub changes_per_week: u32,
    pub optimizer: OptimizerConfig,
    pub pipeline_base_hours: f64,
    pub hours_per_cycle: f64,
    pub rework_hours: f64,
    pub review_latency_hours: [f64; 2],
    /// Chance a queued review is never picked up and expires.
    pub review_no_show: f64,
    pub high_risk_fraction: f64,
    pub flake_rate: f64,
    pub bias: f64,
    pub bias_spike_rate: f64,
    pub compliance_flagged: usize,
    /// Chance a reviewer rejects a wrong proposal.
    pub reviewer_catch: f64,
    /// Chance a reviewer rejects a correct proposal, decaying linearly from
    /// start to end over `disagree_decay_weeks`.
    pub disagree_start: f64,
    pub disagree_end: f64,
    pub disagree_decay_weeks: f64,
    pub training_faults: usize,
    pub validator_records: usize,
    pub resolve_hours: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub suites: usize,
    pub n_defects: usize,
    pub flake_range: [f64; 2],
}

/// One scenario from the catalog with its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub sut: String,
    pub weeks: u32,
    pub n_defects: usize,
    pub subtlety: SubtletyDist,
    pub fairness_groups: Vec<String>,
    pub manual: ManualParams,
    pub ai: AiParams,
    pub incident_open_after_hours: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchParams>,
}

const CATALOG: &[(&str, &str)] = &[
    ("case-study", include_str!("../scenarios/case-study.json")),
    ("compliance", include_str!("../scenarios/compliance.json")),
    ("convergence-bench", include_str!("../scenarios/convergence-bench.json")),
    ("evaluation", include_str!("../scenarios/evaluation.json")),
];

pub fn scenario_names() -> Vec<&'static str> {
    CATALOG.iter().map(|(n, _)| *n).collect()
}

fn fraction(name: &str, v: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SimError::Config(format!("{name} = {v} outside [0, 1]")))
    }
}

fn range(name: &str, r: [f64; 2]) -> Result<(), SimError> {
    if r[0] >= 0.0 && r[0] <= r[1] {
        Ok(())
    } else {
        Err(SimError::Config(format!("{name} range {r:?} is not an ordered non-negative pair")))
    }
}

impl SimConfig {
    pub fn builtin(name: &str) -> Result<Self, SimError> {
        let (_, doc) = CATALOG
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SimError::UnknownScenario(name.to_string()))?;
        Self::from_json(doc)
    }

    pub fn from_json(doc: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(doc).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.subtlety.validate()?;
        fraction("manual.detection_skill", self.manual.detection_skill)?;
        fraction("manual.bias", self.manual.bias)?;
        let ai = &self.ai;
        for (n, v) in [
            ("ai.review_no_show", ai.review_no_show),
            ("ai.high_risk_fraction", ai.high_risk_fraction),
            ("ai.flake_rate", ai.flake_rate),
            ("ai.bias", ai.bias),
            ("ai.bias_spike_rate", ai.bias_spike_rate),
            ("ai.reviewer_catch", ai.reviewer_catch),
            ("ai.disagree_start", ai.disagree_start),
            ("ai.disagree_end", ai.disagree_end),
        ] {
            fraction(n, v)?;
        }
        range("manual.resolve_hours", self.manual.resolve_hours)?;
        range("ai.resolve_hours", ai.resolve_hours)?;
        range("ai.review_latency_hours", ai.review_latency_hours)?;
        range("incident_open_after_hours", self.incident_open_after_hours)?;
        if self.weeks == 0 || self.manual.changes_per_week == 0 || ai.changes_per_week == 0 {
            return Err(SimError::Config("weeks and change rates must be positive".into()));
        }
        if self.fairness_groups.len() < 2 {
            return Err(SimError::Config("at least two fairness groups required".into()));
        }
        if ai.compliance_flagged > (self.weeks * ai.changes_per_week) as usize {
            return Err(SimError::Config("more flagged changes than changes".into()));
        }
        ai.optimizer.validate()?;
        if let Some(b) = &self.bench {
            range("bench.flake_range", b.flake_range)?;
            fraction("bench.flake_range", b.flake_range[1])?;
        } else if self.kind == ScenarioKind::ConvergenceBench {
            return Err(SimError::Config("convergence bench needs `bench` parameters".into()));
        }
        Ok(())
    }

    fn window(&self) -> Window {
        Window {
            start: sim_epoch(),
            end: sim_epoch() + Duration::weeks(self.weeks as i64),
        }
    }
}

/// Built-in system model and requirement document.
pub fn builtin_inputs(name: &str) -> Result<(SutModel, Vec<RequirementRecord>), SimError> {
    match name {
        "bank" => Ok((
            load_sut_model(include_str!("../fixtures/bank.json"))?,
            parse_requirements(include_str!("../fixtures/bank_requirements.txt"))?,
        )),
        other => Err(SimError::UnknownSut(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedDefect {
    pub id: String,
    pub unit_id: String,
    pub subtlety: f64,
    pub severity: Severity,
}

/// A system model with a hidden fault set.
#[derive(Debug, Clone)]
pub struct FaultySut {
    model: SutModel,
    faults: Vec<InjectedDefect>,
    flake_rate: f64,
}

impl FaultySut {
    pub fn model(&self) -> &SutModel {
        &self.model
    }

    pub fn fault_count(&self) -> usize {
        self.faults.len()
    }

    /// Same model with only the named faults active.
    pub fn restricted(&self, ids: &BTreeSet<String>) -> FaultySut {
        FaultySut {
            model: self.model.clone(),
            faults: self.faults.iter().filter(|f| ids.contains(&f.id)).cloned().collect(),
            flake_rate: self.flake_rate,
        }
    }

    pub fn with_flake_rate(mut self, rate: f64) -> Self {
        self.flake_rate = rate;
        self
    }

    fn fix(&mut self, ids: &BTreeSet<String>) {
        self.faults.retain(|f| !ids.contains(&f.id));
    }

    /// Faults the case reaches with enough oracle strength.
    fn triggered_by(&self, case: &TestCase) -> BTreeSet<String> {
        let strength = case.oracle_strength();
        self.faults
            .iter()
            .filter(|f| case.covered_units.contains(&f.unit_id) && strength >= f.subtlety)
            .map(|f| f.id.clone())
            .collect()
    }
}

/// Units are drawn uniformly with replacement; subtlety then severity are
/// drawn per defect from the same stream.
pub fn inject_defects(
    sut: &SutModel,
    n: usize,
    dist: &SubtletyDist,
    seed: u64,
) -> Result<(FaultySut, Vec<InjectedDefect>), SimError> {
    dist.validate()?;
    if n > 0 && sut.coverage_units.is_empty() {
        return Err(SimError::NoUnits);
    }
    let mut rng = rng::seeded(seed);
    let defects: Vec<InjectedDefect> = (0..n)
        .map(|i| {
            let unit = rng.gen_range(0..sut.coverage_units.len());
            let subtlety = dist.draw(&mut rng);
            let severity = match rng.gen_range(0..10) {
                0..=5 => Severity::Minor,
                6..=8 => Severity::Major,
                _ => Severity::Critical,
            };
            InjectedDefect {
                id: format!("D{i:03}"),
                unit_id: sut.coverage_units[unit].clone(),
                subtlety,
                severity,
            }
        })
        .collect();
    Ok((
        FaultySut {
            model: sut.clone(),
            faults: defects.clone(),
            flake_rate: 0.0,
        },
        defects,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub record: ExecutionRecord,
    /// Ground truth: the faults this run reached.
    pub triggered: BTreeSet<String>,
    pub flaky: bool,
}

/// Runs one case. Reaching a fault always fails the case; otherwise it may
/// still fail spuriously at the model's flake rate.
pub fn execute_case(case: &TestCase, sut: &FaultySut, seed: u64) -> Result<Execution, SimError> {
    if let Some(step) = case.steps.iter().find(|s| sut.model.endpoint(&s.endpoint_id).is_none()) {
        return Err(SimError::UnknownEndpoint {
            case: case.id.clone(),
            endpoint: step.endpoint_id.clone(),
        });
    }
    let triggered = sut.triggered_by(case);
    let mut rng = rng::seeded(seed);
    let flaky = triggered.is_empty() && sut.flake_rate > 0.0 && rng.gen_bool(sut.flake_rate);
    let units: Vec<&String> = case.covered_units.iter().collect();
    let record = if !triggered.is_empty() || flaky {
        let f = synthetic_failure(&mut rng, !triggered.is_empty());
        // signals are reported against the case's own units where possible
        let observed = f
            .observed
            .into_iter()
            .enumerate()
            .map(|(i, (k, v))| (units.get(i).map_or(k, |u| (*u).clone()), v))
            .collect();
        ExecutionRecord {
            case_id: case.id.clone(),
            outcome: if triggered.is_empty() { f.outcome } else { Outcome::Fail },
            observed,
            expected: case.expected.clone(),
            duration: f.duration,
            context: f.context,
        }
    } else {
        ExecutionRecord {
            case_id: case.id.clone(),
            outcome: Outcome::Pass,
            observed: units.iter().map(|u| ((*u).clone(), 0.0)).collect(),
            expected: case.expected.clone(),
            duration: 6.0 + rng.gen_range(-2.0..2.0),
            context: BTreeMap::from([
                ("covered_units".to_string(), Scalar::Number(units.len() as f64)),
                ("duration_mean".to_string(), Scalar::Number(6.0)),
                ("duration_std".to_string(), Scalar::Number(4.0)),
                ("hist_failure_rate".to_string(), Scalar::Number(rng.gen_range(0.0..0.3))),
            ]),
        }
    };
    Ok(Execution { record, triggered, flaky })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLog {
    pub suite: Vec<String>,
    pub coverage: f64,
    pub confidence: f64,
    pub failing: usize,
    pub triggered: BTreeSet<String>,
    /// Faults reached by records the validator ruled true defects; fixed
    /// before the next cycle.
    pub confirmed: BTreeSet<String>,
    pub any_true_defect: bool,
}

/// Executes each cycle's suite, judges the records and fixes confirmed
/// defects before the next cycle.
pub struct SimValidator<'a> {
    sut: FaultySut,
    validator: &'a Validator,
    seed: u64,
    pub cycles: Vec<CycleLog>,
}

impl<'a> SimValidator<'a> {
    pub fn new(sut: FaultySut, validator: &'a Validator, seed: u64) -> Self {
        SimValidator {
            sut,
            validator,
            seed,
            cycles: Vec::new(),
        }
    }

    pub fn remaining_faults(&self) -> BTreeSet<String> {
        self.sut.faults.iter().map(|f| f.id.clone()).collect()
    }

    fn run_cycle(&mut self, cycle: usize, suite: &[TestCase]) -> Result<CycleLog, SimError> {
        let mut log = CycleLog {
            suite: suite.iter().map(|c| c.id.clone()).collect(),
            coverage: coverage(suite, &self.sut.model)?.fraction,
            confidence: 1.0,
            failing: 0,
            triggered: BTreeSet::new(),
            confirmed: BTreeSet::new(),
            any_true_defect: false,
        };
        let mut certainty = 0.0;
        for case in suite {
            let exec = execute_case(case, &self.sut, derive(self.seed, &format!("{cycle}/{}", case.id)))?;
            let verdict = self.validator.judge(&exec.record)?;
            certainty += verdict.certainty();
            if exec.record.outcome != Outcome::Pass {
                log.failing += 1;
            }
            if verdict.verdict == Verdict::TrueDefect {
                log.any_true_defect = true;
                log.confirmed.extend(exec.triggered.iter().cloned());
            }
            log.triggered.extend(exec.triggered);
        }
        if !suite.is_empty() {
            log.confidence = certainty / suite.len() as f64;
        }
        self.sut.fix(&log.confirmed);
        Ok(log)
    }
}

impl SuiteValidator for SimValidator<'_> {
    fn validate(&mut self, cycle: usize, suite: &[TestCase]) -> Result<f64, String> {
        let log = self.run_cycle(cycle, suite).map_err(|e| e.to_string())?;
        let c = log.confidence;
        self.cycles.push(log);
        Ok(c)
    }
}

/// Trains the ensemble's model on a seeded synthetic benchmark.
pub fn train_validator(records: usize, seed: u64) -> Result<Validator, SimError> {
    let data = synthetic_benchmark(records, derive(seed, "validator-data"));
    let (model, _, _) = train_model(&data, &DEFAULT_LAMBDA_GRID, derive(seed, "validator-split"))?;
    Ok(Validator {
        rules: default_rule_pack(),
        model,
        weights: VoteWeights::default(),
        threshold: DEFAULT_THRESHOLD,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeTrace {
    pub change_id: String,
    pub decision_id: String,
    pub defects: Vec<String>,
    pub cycles_used: usize,
    pub converged: bool,
    pub cycles: Vec<CycleLog>,
    pub coverage: f64,
    pub proposed: ProposedAction,
    /// What a fully informed reviewer would do.
    pub ideal: ProposedAction,
    pub disposition: Disposition,
    pub overridden: bool,
    /// Defects the pipeline confirmed and fixed.
    pub confirmed: BTreeSet<String>,
    /// Defects still present when the change shipped.
    pub escaped: BTreeSet<String>,
    pub deployed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekStats {
    pub week: u32,
    pub decisions: usize,
    pub reviewed: usize,
    pub overridden: usize,
    pub level: TrustLevel,
    pub override_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustSummary {
    pub final_level: TrustLevel,
    pub override_rate: f64,
    pub intervention_accuracy: f64,
    pub transitions: Vec<EscalationEvent>,
    pub weekly: Vec<WeekStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub scenario: String,
    pub arm: Arm,
    pub seed: u64,
    pub window: Window,
    pub injected: Vec<InjectedDefect>,
    pub changes: Vec<ChangeRecord>,
    pub deploys: Vec<DeployEvent>,
    pub incidents: Vec<IncidentEvent>,
    pub decisions: Vec<DecisionRecord>,
    pub traces: Vec<ChangeTrace>,
    pub detections: BTreeSet<String>,
    pub blocked_noncompliant: usize,
    pub bias_errors: usize,
    pub mean_equity_index: f64,
    pub coverage: f64,
    pub snapshot: MetricsSnapshot,
    pub trust: Option<TrustSummary>,
    pub audit: Vec<AuditEntry>,
    pub audit_head: String,
    pub audit_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: String,
    pub arm: Arm,
    pub seed: u64,
    pub changes: usize,
    pub decisions: usize,
    pub injected: usize,
    pub detected: usize,
    pub detection_rate: f64,
    pub blocked_noncompliant: usize,
    pub bias_error_rate: f64,
    pub mean_equity_index: f64,
    pub snapshot: MetricsSnapshot,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trust_level: Option<TrustLevel>,
    pub audit_entries: usize,
    pub audit_head: String,
    pub audit_ok: bool,
}

impl SimRun {
    pub fn lead_time_samples(&self) -> Vec<f64> {
        self.changes
            .iter()
            .filter_map(|c| c.deployed_at.map(|d| (d - c.committed_at).num_milliseconds() as f64 / 3_600_000.0))
            .collect()
    }

    pub fn bias_error_rate(&self) -> f64 {
        if self.decisions.is_empty() {
            0.0
        } else {
            self.bias_errors as f64 / self.decisions.len() as f64
        }
    }

    pub fn summary(&self) -> SimSummary {
        SimSummary {
            scenario: self.scenario.clone(),
            arm: self.arm,
            seed: self.seed,
            changes: self.changes.len(),
            decisions: self.decisions.len(),
            injected: self.injected.len(),
            detected: self.detections.len(),
            detection_rate: self.snapshot.detection_rate,
            blocked_noncompliant: self.blocked_noncompliant,
            bias_error_rate: self.bias_error_rate(),
            mean_equity_index: self.mean_equity_index,
            snapshot: self.snapshot.clone(),
            trust_level: self.trust.as_ref().map(|t| t.final_level),
            audit_entries: self.audit.len(),
            audit_head: self.audit_head.clone(),
            audit_ok: self.audit_ok,
        }
    }

    /// Recomputes the metrics snapshot from the event streams.
    pub fn recompute_snapshot(&self) -> Result<MetricsSnapshot, SimError> {
        Ok(snapshot(
            &self.changes,
            &self.deploys,
            &self.incidents,
            QualityInputs {
                coverage: self.coverage,
                detection_rate: self.detections.len() as f64 / self.injected.len().max(1) as f64,
                override_rate: self.trust.as_ref().map_or(0.0, |t| t.override_rate),
            },
            self.window,
        )?)
    }

    /// One JSON Lines file per event stream, `summary.json`, and the whole
    /// run as `run.json` for [`SimRun::load_dir`].
    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        fn lines<T: Serialize>(items: &[T]) -> String {
            items
                .iter()
                .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
                .collect()
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("changes.jsonl"), lines(&self.changes))?;
        std::fs::write(dir.join("deploys.jsonl"), lines(&self.deploys))?;
        std::fs::write(dir.join("incidents.jsonl"), lines(&self.incidents))?;
        std::fs::write(dir.join("decisions.jsonl"), lines(&self.decisions))?;
        std::fs::write(dir.join("traces.jsonl"), lines(&self.traces))?;
        std::fs::write(dir.join("defects.jsonl"), lines(&self.injected))?;
        let audit: String = self.audit.iter().map(|e| crate::audit_log::export_line(e) + "\n").collect();
        std::fs::write(dir.join("audit.jsonl"), audit)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary()).expect("serializable") + "\n",
        )?;
        std::fs::write(dir.join("run.json"), serde_json::to_string(self).expect("serializable"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<SimRun, SimError> {
        let text = std::fs::read_to_string(dir.join("run.json"))?;
        serde_json::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", dir.display())))
    }
}

fn hours(h: f64) -> Duration {
    Duration::milliseconds((h * 3_600_000.0).round() as i64)
}

fn draw_range(rng: &mut SeededRng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Per-group approval rates with a random bias per group, measured on 1000
/// synthetic subjects each.
fn fairness_snapshot(groups: &[String], bias: f64, rng: &mut SeededRng) -> Result<crate::fairness::ParityReport, SimError> {
    let mut table = OutcomeTable::default();
    for g in groups {
        let offset = if bias > 0.0 { rng.gen_range(-bias..bias) } else { 0.0 };
        let rate = (0.8 + offset).clamp(0.0, 1.0);
        table.groups.insert(
            g.clone(),
            GroupCount {
                positives: (1000.0 * rate).round() as u64,
                total: 1000,
            },
        );
    }
    Ok(parity(&table, DEFAULT_PARITY_THRESHOLD)?)
}

fn assign_defects(defects: &[InjectedDefect], n_changes: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = rng::seeded(seed);
    let mut per = vec![Vec::new(); n_changes];
    for d in defects {
        per[rng.gen_range(0..n_changes)].push(d.id.clone());
    }
    per
}

fn commit_times(cfg: &SimConfig, per_week: u32) -> Vec<DateTime<Utc>> {
    let n = (cfg.weeks * per_week) as i64;
    let step = Duration::weeks(cfg.weeks as i64).num_milliseconds() / n;
    (0..n).map(|i| sim_epoch() + Duration::milliseconds(i * step)).collect()
}

fn open_incident(
    cfg: &SimConfig,
    resolve: [f64; 2],
    id: String,
    deployed: DateTime<Utc>,
    rng: &mut SeededRng,
) -> IncidentEvent {
    let opened_at = deployed + hours(draw_range(rng, cfg.incident_open_after_hours));
    IncidentEvent {
        id,
        opened_at,
        resolved_at: Some(opened_at + hours(draw_range(rng, resolve))),
    }
}

pub fn run_pipeline(arm: Arm, cfg: &SimConfig) -> Result<SimRun, SimError> {
    cfg.validate()?;
    if cfg.kind != ScenarioKind::Pipeline {
        return Err(SimError::WrongKind(cfg.name.clone(), "pipeline"));
    }
    let (sut, reqs) = builtin_inputs(&cfg.sut)?;
    let (faulty, injected) = inject_defects(&sut, cfg.n_defects, &cfg.subtlety, derive(cfg.seed, "defects"))?;
    match arm {
        Arm::Manual => run_manual(cfg, &sut, &reqs, faulty, injected),
        Arm::Ai => run_ai(cfg, &sut, &reqs, faulty, injected),
    }
}

fn run_manual(
    cfg: &SimConfig,
    sut: &SutModel,
    reqs: &[RequirementRecord],
    faulty: FaultySut,
    injected: Vec<InjectedDefect>,
) -> Result<SimRun, SimError> {
    let p = &cfg.manual;
    let budget = cfg.ai.optimizer.budget;
    // A fixed suite: random affordable cases until nothing else fits.
    let pool = generate_cases(reqs, sut, derive(cfg.seed, "manual-generate")).cases;
    let mut rng = rng::seeded(derive(cfg.seed, "manual-suite"));
    let mut suite: Vec<TestCase> = Vec::new();
    let mut left = budget;
    loop {
        let options: Vec<&TestCase> = pool
            .iter()
            .filter(|c| c.cost <= left && !suite.iter().any(|s| s.id == c.id))
            .collect();
        let Some(pick) = options.choose(&mut rng) else { break };
        left -= pick.cost;
        suite.push((*pick).clone());
    }
    let suite_coverage = coverage(&suite, sut)?.fraction;
    let suite_ids: Vec<String> = suite.iter().map(|c| c.id.clone()).collect();

    let commits = commit_times(cfg, p.changes_per_week);
    let assigned = assign_defects(&injected, commits.len(), derive(cfg.seed, "assign-manual"));
    let mut audit = AuditChain::new();
    let mut run = empty_run(cfg, Arm::Manual, injected);
    run.coverage = suite_coverage;
    let mut equity = 0.0;
    for (i, (at, defects)) in commits.iter().zip(&assigned).enumerate() {
        let mut rng = rng::seeded(derive(cfg.seed, &format!("manual-change-{i}")));
        let ids: BTreeSet<String> = defects.iter().cloned().collect();
        let active = faulty.restricted(&ids);
        let triggered: BTreeSet<String> = suite.iter().flat_map(|c| active.triggered_by(c)).collect();
        let caught: BTreeSet<String> = triggered
            .iter()
            .filter(|_| rng.gen_bool(p.detection_skill))
            .cloned()
            .collect();
        let escaped: BTreeSet<String> = ids.difference(&caught).cloned().collect();
        let lead = p.lead_time_hours * rng.gen_range(0.9..1.1);
        let deployed_at = *at + hours(lead);
        let fairness = fairness_snapshot(&cfg.fairness_groups, p.bias, &mut rng)?;
        equity += fairness.equity_index;
        if !fairness.passed {
            run.bias_errors += 1;
        }
        let change_id = format!("{}-C{i:04}", Arm::Manual.label());
        let decision_id = format!("{}-{i:04}", Arm::Manual.label());
        let action = if caught.is_empty() {
            ProposedAction::PromoteBuild
        } else {
            ProposedAction::BlockBuild
        };
        let decision = DecisionRecord {
            id: decision_id.clone(),
            proposed_action: action,
            severity: DecisionSeverity::Routine,
            confidence: p.detection_skill,
            parity_gap: fairness.gap,
            compliance_flags: BTreeSet::new(),
            timestamp: deployed_at,
            rationale: format!("manual sign-off; {} defect(s) reported", caught.len()),
        };
        audit.append(
            "manual-qa",
            AuditKind::Decision,
            &decision.rationale,
            &canonical_payload(&decision),
            deployed_at,
        )?;
        run.decisions.push(decision);
        run.changes.push(ChangeRecord {
            id: change_id.clone(),
            committed_at: *at,
            deployed_at: Some(deployed_at),
        });
        let failed = !escaped.is_empty();
        run.deploys.push(DeployEvent {
            id: format!("{change_id}-deploy"),
            at: deployed_at,
            outcome: if failed { DeployOutcome::Failure } else { DeployOutcome::Success },
        });
        if failed {
            run.incidents
                .push(open_incident(cfg, p.resolve_hours, format!("{change_id}-incident"), deployed_at, &mut rng));
        }
        run.detections.extend(caught.iter().cloned());
        run.traces.push(ChangeTrace {
            change_id,
            decision_id,
            defects: defects.clone(),
            cycles_used: 0,
            converged: true,
            cycles: vec![CycleLog {
                suite: suite_ids.clone(),
                coverage: suite_coverage,
                confidence: p.detection_skill,
                failing: triggered.len(),
                triggered,
                confirmed: caught.clone(),
                any_true_defect: !caught.is_empty(),
            }],
            coverage: suite_coverage,
            proposed: action,
            ideal: action,
            disposition: Disposition::Applied,
            overridden: false,
            confirmed: caught,
            escaped,
            deployed: true,
        });
    }
    run.mean_equity_index = equity / commits.len() as f64;
    finish(run, audit, None)
}

fn empty_run(cfg: &SimConfig, arm: Arm, injected: Vec<InjectedDefect>) -> SimRun {
    let window = cfg.window();
    SimRun {
        scenario: cfg.name.clone(),
        arm,
        seed: cfg.seed,
        window,
        injected,
        changes: Vec::new(),
        deploys: Vec::new(),
        incidents: Vec::new(),
        decisions: Vec::new(),
        traces: Vec::new(),
        detections: BTreeSet::new(),
        blocked_noncompliant: 0,
        bias_errors: 0,
        mean_equity_index: 0.0,
        coverage: 0.0,
        snapshot: MetricsSnapshot {
            lead_time_hours: crate::metrics::MeanMedian { mean: 0.0, median: 0.0 },
            deploys_per_week: 0.0,
            change_failure_rate: 0.0,
            mttr_hours: 0.0,
            coverage: 0.0,
            detection_rate: 0.0,
            override_rate: 0.0,
            window,
        },
        trust: None,
        audit: Vec::new(),
        audit_head: String::new(),
        audit_ok: false,
    }
}

fn finish(mut run: SimRun, audit: AuditChain, trust: Option<TrustSummary>) -> Result<SimRun, SimError> {
    run.trust = trust;
    run.snapshot = run.recompute_snapshot()?;
    run.audit_ok = audit.verify().ok;
    run.audit_head = hex::encode(audit.head_digest());
    run.audit = audit.entries().to_vec();
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Submit(usize),
    Resolve(usize, bool),
    Expire,
    Deploy(usize),
}

struct AiChange {
    commit: DateTime<Utc>,
    trace: ChangeTrace,
    decision: DecisionRecord,
    rng: SeededRng,
    /// Triggered in the final cycle but not confirmed by the validator.
    residual: BTreeSet<String>,
    remaining: BTreeSet<String>,
}

fn run_ai(
    cfg: &SimConfig,
    sut: &SutModel,
    reqs: &[RequirementRecord],
    faulty: FaultySut,
    injected: Vec<InjectedDefect>,
) -> Result<SimRun, SimError> {
    let p = &cfg.ai;
    let validator = train_validator(p.validator_records, cfg.seed)?;
    // A separately drawn fault set the optimizer may use as its detection
    // estimate; it never sees the injected one.
    let (_, training) = inject_defects(sut, p.training_faults, &cfg.subtlety, derive(cfg.seed, "training-defects"))?;
    let estimator = TrainingFaults {
        faults: training
            .iter()
            .map(|d| KnownFault {
                unit: d.unit_id.clone(),
                subtlety: d.subtlety,
            })
            .collect(),
    };
    let faulty = faulty.with_flake_rate(p.flake_rate);
    let commits = commit_times(cfg, p.changes_per_week);
    let assigned = assign_defects(&injected, commits.len(), derive(cfg.seed, "assign-ai"));
    let mut flag_rng = rng::seeded(derive(cfg.seed, "compliance"));
    let flagged: BTreeSet<usize> = rand::seq::index::sample(&mut flag_rng, commits.len(), p.compliance_flagged)
        .into_iter()
        .collect();

    let mut run = empty_run(cfg, Arm::Ai, injected);
    let mut domain = DecisionDomain::in_memory(default_policy_pack());
    let mut queue: BTreeMap<(DateTime<Utc>, u64), Event> = BTreeMap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BTreeMap<(DateTime<Utc>, u64), Event>, at: DateTime<Utc>, e: Event| {
        queue.insert((at, seq), e);
        seq += 1;
    };

    let mut changes: Vec<AiChange> = Vec::with_capacity(commits.len());
    let mut equity = 0.0;
    for (i, (at, defects)) in commits.iter().zip(&assigned).enumerate() {
        let mut rng = rng::seeded(derive(cfg.seed, &format!("ai-change-{i}")));
        let ids: BTreeSet<String> = defects.iter().cloned().collect();
        let mut sim = SimValidator::new(faulty.restricted(&ids), &validator, derive(cfg.seed, &format!("exec-{i}")));
        let opt_cfg = OptimizerConfig {
            seed: derive(cfg.seed, &format!("loop-{i}")),
            ..p.optimizer.clone()
        };
        let report = run_feedback_loop(reqs, sut, &opt_cfg, &estimator, &mut sim)?;
        let last = sim.cycles.last().cloned();
        let confirmed: BTreeSet<String> = sim.cycles.iter().flat_map(|c| c.confirmed.iter().cloned()).collect();
        let (proposed, ideal, residual, confidence, cov) = match &last {
            Some(l) => {
                let residual: BTreeSet<String> = l.triggered.difference(&l.confirmed).cloned().collect();
                let act = |b: bool| if b { ProposedAction::BlockBuild } else { ProposedAction::PromoteBuild };
                (act(l.any_true_defect), act(!l.triggered.is_empty()), residual, l.confidence, l.coverage)
            }
            None => (ProposedAction::PromoteBuild, ProposedAction::PromoteBuild, BTreeSet::new(), 0.0, 0.0),
        };
        let high_risk = rng.gen_bool(p.high_risk_fraction);
        let spike = rng.gen_bool(p.bias_spike_rate);
        let fairness = fairness_snapshot(&cfg.fairness_groups, if spike { p.bias * 4.0 } else { p.bias }, &mut rng)?;
        equity += fairness.equity_index;
        if !fairness.passed {
            run.bias_errors += 1;
        }
        let pipeline = p.pipeline_base_hours + p.hours_per_cycle * report.cycles_used as f64;
        let submit_at = *at + hours(pipeline);
        let decision_id = format!("{}-{i:04}", Arm::Ai.label());
        let decision = DecisionRecord {
            id: decision_id.clone(),
            proposed_action: proposed,
            severity: if high_risk { DecisionSeverity::HighRisk } else { DecisionSeverity::Routine },
            confidence: confidence.clamp(0.0, 1.0),
            parity_gap: fairness.gap,
            compliance_flags: if flagged.contains(&i) {
                BTreeSet::from(["pii-in-test-data".to_string()])
            } else {
                BTreeSet::new()
            },
            timestamp: submit_at,
            rationale: format!(
                "{:?} after {} cycle(s): {} failing record(s) in the final suite, {} defect(s) confirmed, confidence {:.3}",
                proposed,
                report.cycles_used,
                last.as_ref().map_or(0, |l| l.failing),
                confirmed.len(),
                confidence
            ),
        };
        let trace = ChangeTrace {
            change_id: format!("{}-C{i:04}", Arm::Ai.label()),
            decision_id,
            defects: defects.clone(),
            cycles_used: report.cycles_used,
            converged: report.converged,
            cycles: sim.cycles.clone(),
            coverage: cov,
            proposed,
            ideal,
            disposition: Disposition::Queued,
            overridden: false,
            confirmed,
            escaped: BTreeSet::new(),
            deployed: false,
        };
        changes.push(AiChange {
            commit: *at,
            trace,
            decision,
            rng,
            residual,
            remaining: sim.remaining_faults(),
        });
        push(&mut queue, submit_at, Event::Submit(i));
    }

    let start = sim_epoch();
    let week_of = |t: DateTime<Utc>| ((t - start).num_milliseconds() / Duration::weeks(1).num_milliseconds()).max(0) as u32;
    let mut weekly: BTreeMap<u32, WeekStats> = BTreeMap::new();
    let mut deploy_at: BTreeMap<usize, DateTime<Utc>> = BTreeMap::new();

    while let Some(((now, _), event)) = queue.pop_first() {
        let week = week_of(now);
        let stats = weekly.entry(week).or_insert(WeekStats {
            week,
            decisions: 0,
            reviewed: 0,
            overridden: 0,
            level: domain.trust().level,
            override_rate: 0.0,
        });
        match event {
            Event::Submit(i) => {
                stats.decisions += 1;
                let c = &mut changes[i];
                let out = domain.submit(c.decision.clone(), now)?;
                c.trace.disposition = out.disposition;
                match out.disposition {
                    Disposition::Applied => {
                        let rework = if c.trace.proposed == ProposedAction::BlockBuild { p.rework_hours } else { 0.0 };
                        push(&mut queue, now + hours(rework), Event::Deploy(i));
                    }
                    Disposition::RolledBack => {
                        let rb = out.rollback.expect("rolled back");
                        let critical_rules: BTreeSet<&str> = domain
                            .policies()
                            .iter()
                            .filter(|r| r.severity == RuleSeverity::Critical)
                            .map(|r| r.id.as_str())
                            .collect();
                        if rb.reason.iter().any(|r| critical_rules.contains(r.as_str())) {
                            run.blocked_noncompliant += 1;
                        }
                    }
                    Disposition::Queued => {
                        let review = out.review.expect("queued");
                        if c.rng.gen_bool(p.review_no_show) {
                            push(&mut queue, review.deadline + Duration::milliseconds(1), Event::Expire);
                        } else {
                            let latency = draw_range(&mut c.rng, p.review_latency_hours);
                            let elapsed = (now - start).num_milliseconds() as f64 / Duration::weeks(1).num_milliseconds() as f64;
                            let t = if p.disagree_decay_weeks > 0.0 {
                                (elapsed / p.disagree_decay_weeks).min(1.0)
                            } else {
                                1.0
                            };
                            let disagree = p.disagree_start + (p.disagree_end - p.disagree_start) * t;
                            let reject = if c.trace.proposed != c.trace.ideal {
                                c.rng.gen_bool(p.reviewer_catch)
                            } else {
                                c.rng.gen_bool(disagree.clamp(0.0, 1.0))
                            };
                            push(&mut queue, now + hours(latency), Event::Resolve(i, reject));
                        }
                    }
                    Disposition::Blocked => {}
                }
            }
            Event::Resolve(i, reject) => {
                stats.reviewed += 1;
                let c = &mut changes[i];
                let (res, note) = if reject {
                    stats.overridden += 1;
                    (Resolution::Reject, "reviewer disagrees with the proposal")
                } else {
                    (Resolution::Approve, "reviewer agrees")
                };
                domain.resolve_review(&c.trace.decision_id, res, "reviewer", note, now)?;
                c.trace.overridden = reject;
                c.trace.disposition = if reject { Disposition::Blocked } else { Disposition::Applied };
                let action = match (reject, c.trace.proposed) {
                    (false, a) => a,
                    (true, ProposedAction::BlockBuild) => ProposedAction::PromoteBuild,
                    (true, _) => ProposedAction::BlockBuild,
                };
                if reject && action == ProposedAction::BlockBuild {
                    // the reviewer has the residual failures fixed by hand
                    let residual = c.residual.clone();
                    c.remaining.retain(|d| !residual.contains(d));
                }
                let rework = if action == ProposedAction::BlockBuild { p.rework_hours } else { 0.0 };
                push(&mut queue, now + hours(rework), Event::Deploy(i));
            }
            Event::Expire => {
                for item in domain.expire_reviews(now)? {
                    let i = changes
                        .iter()
                        .position(|c| c.trace.decision_id == item.decision.id)
                        .expect("every review belongs to a change");
                    changes[i].trace.disposition = Disposition::Blocked;
                    let residual = changes[i].residual.clone();
                    changes[i].remaining.retain(|d| !residual.contains(d));
                    push(&mut queue, now + hours(p.rework_hours), Event::Deploy(i));
                }
            }
            Event::Deploy(i) => {
                deploy_at.insert(i, now);
            }
        }
        let stats = weekly.get_mut(&week).expect("inserted above");
        stats.level = domain.trust().level;
        stats.override_rate = domain.trust().override_rate;
    }

    for (i, c) in changes.iter_mut().enumerate() {
        let deployed = deploy_at.get(&i).copied();
        c.trace.deployed = deployed.is_some();
        let change_id = c.trace.change_id.clone();
        run.changes.push(ChangeRecord {
            id: change_id.clone(),
            committed_at: c.commit,
            deployed_at: deployed,
        });
        if c.trace.disposition != Disposition::RolledBack {
            run.detections.extend(c.trace.confirmed.iter().cloned());
        }
        if let Some(at) = deployed {
            c.trace.escaped = c.remaining.clone();
            let failed = !c.remaining.is_empty();
            run.deploys.push(DeployEvent {
                id: format!("{change_id}-deploy"),
                at,
                outcome: if failed { DeployOutcome::Failure } else { DeployOutcome::Success },
            });
            if failed {
                run.incidents
                    .push(open_incident(cfg, p.resolve_hours, format!("{change_id}-incident"), at, &mut c.rng));
            }
        }
        run.decisions.push(c.decision.clone());
        run.traces.push(c.trace.clone());
    }
    run.deploys.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.id.cmp(&b.id)));
    run.coverage = run.traces.iter().map(|t| t.coverage).sum::<f64>() / run.traces.len().max(1) as f64;
    run.mean_equity_index = equity / commits.len() as f64;
    let trust = domain.trust();
    let summary = TrustSummary {
        final_level: trust.level,
        override_rate: trust.override_rate,
        intervention_accuracy: trust.intervention_accuracy,
        transitions: domain.transitions().to_vec(),
        weekly: weekly.into_values().collect(),
    };
    let audit = domain.audit().clone();
    finish(run, audit, Some(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub baseline: f64,
    pub treated: f64,
    /// `None` when the baseline is 0.
    pub percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub metrics: BTreeMap<String, MetricDelta>,
    pub ab: AbTestReport,
    pub bias_error_rates: (f64, f64),
}

pub fn compare(baseline: &SimRun, treated: &SimRun) -> Result<ComparisonReport, SimError> {
    if baseline.scenario != treated.scenario {
        return Err(SimError::Mismatch(baseline.scenario.clone(), treated.scenario.clone()));
    }
    let pairs = |s: &MetricsSnapshot| {
        [
            ("lead_time_mean_hours", s.lead_time_hours.mean),
            ("lead_time_median_hours", s.lead_time_hours.median),
            ("deploys_per_week", s.deploys_per_week),
            ("change_failure_rate", s.change_failure_rate),
            ("mttr_hours", s.mttr_hours),
            ("coverage", s.coverage),
            ("detection_rate", s.detection_rate),
            ("override_rate", s.override_rate),
        ]
    };
    let metrics = pairs(&baseline.snapshot)
        .into_iter()
        .zip(pairs(&treated.snapshot))
        .map(|((name, b), (_, t))| {
            (
                name.to_string(),
                MetricDelta {
                    baseline: b,
                    treated: t,
                    percent_change: percent_change(b, t).ok(),
                },
            )
        })
        .collect();
    let ab = ab_test(
        &baseline.lead_time_samples(),
        &treated.lead_time_samples(),
        DEFAULT_RESAMPLES,
        derive(baseline.seed ^ treated.seed, "ab"),
    )?;
    Ok(ComparisonReport {
        scenario: baseline.scenario.clone(),
        metrics,
        ab,
        bias_error_rates: (baseline.bias_error_rate(), treated.bias_error_rate()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub index: usize,
    pub flake_rate: f64,
    pub report: ConvergenceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub seed: u64,
    pub suites: Vec<BenchSuite>,
    pub converged: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Runs the feedback loop once per synthetic suite, each with its own defect
/// set and flake rate.
pub fn run_convergence_bench(cfg: &SimConfig) -> Result<BenchReport, SimError> {
    cfg.validate()?;
    let bench = match (&cfg.kind, &cfg.bench) {
        (ScenarioKind::ConvergenceBench, Some(b)) => b,
        _ => return Err(SimError::WrongKind(cfg.name.clone(), "convergence bench")),
    };
    let (sut, reqs) = builtin_inputs(&cfg.sut)?;
    let validator = train_validator(cfg.ai.validator_records, cfg.seed)?;
    let (_, training) = inject_defects(&sut, cfg.ai.training_faults, &cfg.subtlety, derive(cfg.seed, "training-defects"))?;
    let estimator = TrainingFaults {
        faults: training
            .iter()
            .map(|d| KnownFault {
                unit: d.unit_id.clone(),
                subtlety: d.subtlety,
            })
            .collect(),
    };
    let mut suites = Vec::new();
    for k in 0..bench.suites {
        let seed = derive(cfg.seed, &format!("suite-{k}"));
        let mut rng = rng::seeded(seed);
        let flake_rate = draw_range(&mut rng, bench.flake_range);
        let (faulty, _) = inject_defects(&sut, bench.n_defects, &cfg.subtlety, derive(seed, "defects"))?;
        let mut sim = SimValidator::new(faulty.with_flake_rate(flake_rate), &validator, derive(seed, "exec"));
        let opt_cfg = OptimizerConfig {
            seed: derive(seed, "loop"),
            ..cfg.ai.optimizer.clone()
        };
        let report = run_feedback_loop(&reqs, &sut, &opt_cfg, &estimator, &mut sim)?;
        suites.push(BenchSuite {
            index: k,
            flake_rate,
            report,
        });
    }
    let converged = suites.iter().filter(|s| s.report.converged).count();
    Ok(BenchReport {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        total: suites.len(),
        fraction: converged as f64 / suites.len().max(1) as f64,
        converged,
        suites,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub manual: SimRun,
    pub ai: SimRun,
    pub comparison: ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioOutcome {
    Pipeline(Box<PipelineOutcome>),
    ConvergenceBench(BenchReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSummary {
    Pipeline {
        manual: SimSummary,
        ai: SimSummary,
        comparison: ComparisonReport,
    },
    ConvergenceBench {
        scenario: String,
        seed: u64,
        converged: usize,
        total: usize,
        fraction: f64,
        cycles_used: Vec<usize>,
    },
}

impl ScenarioOutcome {
    pub fn summary(&self) -> ScenarioSummary {
        match self {
            ScenarioOutcome::Pipeline(p) => ScenarioSummary::Pipeline {
                manual: p.manual.summary(),
                ai: p.ai.summary(),
                comparison: p.comparison.clone(),
            },
            ScenarioOutcome::ConvergenceBench(b) => ScenarioSummary::ConvergenceBench {
                scenario: b.scenario.clone(),
                seed: b.seed,
                converged: b.converged,
                total: b.total,
                fraction: b.fraction,
                cycles_used: b.suites.iter().map(|s| s.report.cycles_used).collect(),
            },
        }
    }
}

/// Both arms plus their comparison, or the convergence bench.
pub fn simulate(cfg: &SimConfig) -> Result<ScenarioOutcome, SimError> {
    match cfg.kind {
        ScenarioKind::ConvergenceBench => Ok(ScenarioOutcome::ConvergenceBench(run_convergence_bench(cfg)?)),
        ScenarioKind::Pipeline => {
            let manual = run_pipeline(Arm::Manual, cfg)?;
            let ai = run_pipeline(Arm::Ai, cfg)?;
            let comparison = compare(&manual, &ai)?;
            Ok(ScenarioOutcome::Pipeline(Box::new(PipelineOutcome { manual, ai, comparison })))
        }
    }
}
