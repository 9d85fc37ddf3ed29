//! Budgeted suite selection by Monte Carlo tree search.
//!
//! A tree state is a partial suite; an action appends one affordable case.
//! Children are only expanded in pool order (a case may follow only cases
//! with a smaller pool index), so every subset has exactly one path through
//! the tree. Rollouts complete a state with any affordable cases, so every
//! evaluated suite is terminal: nothing left fits the remaining budget.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::{generate_cases, units_of_steps, SutModel, TestCase};
use crate::ingest::RequirementRecord;
use crate::rng;

pub const MAX_CYCLES: usize = 10;
pub const CONVERGENCE_EPSILON: f64 = 0.01;
pub const CONFIDENCE_TARGET: f64 = 0.95;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("optimizer config: {0}")]
    Config(String),
    #[error("no case fits the budget of {budget}")]
    EmptyPool { budget: u32 },
    #[error("node has no children")]
    NoChildren,
    #[error("case `{case}` steps on unknown endpoint `{endpoint}`")]
    UnknownEndpoint { case: String, endpoint: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    Random,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub coverage_weight: f64,
    pub detection_weight: f64,
    pub exploration_c: f64,
    pub budget: u32,
    pub iterations: usize,
    pub rollout_policy: RolloutPolicy,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            coverage_weight: 0.6,
            detection_weight: 0.4,
            exploration_c: std::f64::consts::SQRT_2,
            budget: 8,
            iterations: 2000,
            rollout_policy: RolloutPolicy::Random,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let err = |m: String| Err(OptimizerError::Config(m));
        if self.coverage_weight < 0.0 || self.detection_weight < 0.0 {
            return err("reward weights must be non-negative".into());
        }
        if (self.coverage_weight + self.detection_weight - 1.0).abs() > 1e-9 {
            return err(format!(
                "reward weights sum to {}, expected 1",
                self.coverage_weight + self.detection_weight
            ));
        }
        if self.budget == 0 {
            return err("budget must be positive".into());
        }
        if self.iterations == 0 {
            return err("iterations must be positive".into());
        }
        if !(self.exploration_c > 0.0) {
            return err("exploration constant must be positive".into());
        }
        Ok(())
    }
}

/// Estimated share of defects a suite would catch. Implementations must be
/// monotone: adding a case never lowers the estimate.
pub trait DetectionEstimator {
    fn estimate(&self, suite: &[&TestCase]) -> f64;
}

/// Same estimate for every suite.
#[derive(Debug, Clone, Copy)]
pub struct FixedDetection(pub f64);

impl DetectionEstimator for FixedDetection {
    fn estimate(&self, _suite: &[&TestCase]) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownFault {
    pub unit: String,
    pub subtlety: f64,
}

/// Share of a training fault set the suite triggers. A fault is triggered by a
/// case covering its unit with oracle strength at least its subtlety.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingFaults {
    pub faults: Vec<KnownFault>,
}

impl DetectionEstimator for TrainingFaults {
    fn estimate(&self, suite: &[&TestCase]) -> f64 {
        if self.faults.is_empty() {
            return 0.0;
        }
        let hit = self
            .faults
            .iter()
            .filter(|f| {
                suite
                    .iter()
                    .any(|c| c.covered_units.contains(&f.unit) && c.oracle_strength() >= f.subtlety)
            })
            .count();
        hit as f64 / self.faults.len() as f64
    }
}

pub fn composite_reward(coverage: f64, detection: f64, cfg: &OptimizerConfig) -> f64 {
    cfg.coverage_weight * coverage + cfg.detection_weight * detection
}

pub fn reward(suite: &[TestCase], sut: &SutModel, detection: f64, cfg: &OptimizerConfig) -> Result<f64, OptimizerError> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&detection) {
        return Err(OptimizerError::Config(format!("detection estimate {detection} outside [0, 1]")));
    }
    let cov = crate::generation::coverage(suite, sut).map_err(|e| OptimizerError::Config(e.to_string()))?;
    Ok(composite_reward(cov.fraction, detection, cfg))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MctsNode {
    pub chosen: Vec<String>,
    pub visits: u64,
    pub total_reward: f64,
    pub children: BTreeMap<String, MctsNode>,
}

impl MctsNode {
    pub fn mean_reward(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.total_reward / self.visits as f64)
    }
}

fn uct_pick<'a>(parent_visits: u64, children: impl Iterator<Item = (&'a str, u64, f64)>, c: f64) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    let mut unvisited: Option<&str> = None;
    let ln_n = (parent_visits.max(1) as f64).ln();
    for (id, visits, total) in children {
        if visits == 0 {
            if unvisited.is_none_or(|u| id < u) {
                unvisited = Some(id);
            }
            continue;
        }
        let score = total / visits as f64 + c * (ln_n / visits as f64).sqrt();
        let better = match best {
            None => true,
            Some((bid, bs)) => score > bs || (score == bs && id < bid),
        };
        if better {
            best = Some((id, score));
        }
    }
    unvisited.or(best.map(|b| b.0))
}

/// Unvisited children first (lowest id), then the UCT argmax with ties to
/// the lowest id.
pub fn uct_select(node: &MctsNode, c: f64) -> Result<String, OptimizerError> {
    uct_pick(
        node.visits,
        node.children.iter().map(|(id, ch)| (id.as_str(), ch.visits, ch.total_reward)),
        c,
    )
    .map(str::to_string)
    .ok_or(OptimizerError::NoChildren)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub iterations: usize,
    pub nodes: usize,
    pub greedy_reward: f64,
    /// `(iteration, reward)` at every improvement of the best terminal;
    /// iteration 0 is the greedy baseline.
    pub improvements: Vec<(usize, f64)>,
    pub excluded: Vec<String>,
    /// Root and its direct children.
    pub root: MctsNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedSuite {
    pub suite: Vec<TestCase>,
    pub reward: f64,
    pub coverage: f64,
    pub detection: f64,
    pub cost: u32,
    pub stats: SearchStats,
}

impl OptimizedSuite {
    pub fn case_ids(&self) -> Vec<&str> {
        self.suite.iter().map(|c| c.id.as_str()).collect()
    }
}

struct Node {
    /// Pool index of the case appended to reach this node.
    case: Option<usize>,
    parent: Option<usize>,
    children: Option<Vec<usize>>,
    visits: u64,
    total: f64,
}

struct Search<'a> {
    pool: Vec<&'a TestCase>,
    masks: Vec<Vec<u64>>,
    n_units: usize,
    cfg: &'a OptimizerConfig,
    estimator: &'a dyn DetectionEstimator,
}

impl<'a> Search<'a> {
    fn mask_of(&self, chosen: &[usize]) -> Vec<u64> {
        let mut m = vec![0u64; self.masks.first().map_or(0, Vec::len)];
        for &i in chosen {
            for (a, b) in m.iter_mut().zip(&self.masks[i]) {
                *a |= b;
            }
        }
        m
    }

    fn evaluate(&self, chosen: &[usize]) -> (f64, f64, f64) {
        let covered: u32 = self.mask_of(chosen).iter().map(|w| w.count_ones()).sum();
        let coverage = if self.n_units == 0 { 0.0 } else { covered as f64 / self.n_units as f64 };
        let cases: Vec<&TestCase> = chosen.iter().map(|&i| self.pool[i]).collect();
        let detection = self.estimator.estimate(&cases).clamp(0.0, 1.0);
        (composite_reward(coverage, detection, self.cfg), coverage, detection)
    }

    fn spent(&self, chosen: &[usize]) -> u32 {
        chosen.iter().map(|&i| self.pool[i].cost).sum()
    }

    fn affordable(&self, chosen: &[usize], after: Option<usize>) -> Vec<usize> {
        let left = self.cfg.budget - self.spent(chosen);
        let start = after.map_or(0, |a| a + 1);
        (start..self.pool.len())
            .filter(|i| !chosen.contains(i) && self.pool[*i].cost <= left)
            .collect()
    }

    fn gain(&self, mask: &[u64], i: usize) -> u32 {
        mask.iter().zip(&self.masks[i]).map(|(a, b)| (b & !a).count_ones()).sum()
    }

    /// Highest marginal coverage per step, ties to the lower pool index.
    fn greedy_complete(&self, chosen: &mut Vec<usize>) {
        loop {
            let options = self.affordable(chosen, None);
            let mask = self.mask_of(chosen);
            let Some(&pick) = options.iter().max_by(|&&a, &&b| {
                self.gain(&mask, a).cmp(&self.gain(&mask, b)).then(b.cmp(&a))
            }) else {
                return;
            };
            chosen.push(pick);
        }
    }

    fn random_complete(&self, chosen: &mut Vec<usize>, rng: &mut rng::SeededRng) {
        loop {
            let options = self.affordable(chosen, None);
            match options.choose(rng) {
                Some(&pick) => chosen.push(pick),
                None => return,
            }
        }
    }
}

pub fn optimize_suite(
    pool: &[TestCase],
    sut: &SutModel,
    cfg: &OptimizerConfig,
    estimator: &dyn DetectionEstimator,
) -> Result<OptimizedSuite, OptimizerError> {
    cfg.validate()?;
    let unit_index: BTreeMap<&str, usize> = sut
        .coverage_units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let words = sut.coverage_units.len().div_ceil(64).max(1);

    let mut sorted: Vec<&TestCase> = pool.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    let mut masks = Vec::new();
    for case in sorted {
        for step in &case.steps {
            if sut.endpoint(&step.endpoint_id).is_none() {
                return Err(OptimizerError::UnknownEndpoint {
                    case: case.id.clone(),
                    endpoint: step.endpoint_id.clone(),
                });
            }
        }
        if case.cost > cfg.budget {
            excluded.push(case.id.clone());
            continue;
        }
        let mut m = vec![0u64; words];
        for u in units_of_steps(&case.steps, sut) {
            if let Some(&i) = unit_index.get(u.as_str()) {
                m[i / 64] |= 1 << (i % 64);
            }
        }
        masks.push(m);
        kept.push(case);
    }
    if kept.is_empty() {
        return Err(OptimizerError::EmptyPool { budget: cfg.budget });
    }
    let search = Search {
        pool: kept,
        masks,
        n_units: sut.coverage_units.len(),
        cfg,
        estimator,
    };

    let mut greedy = Vec::new();
    search.greedy_complete(&mut greedy);
    let greedy_reward = search.evaluate(&greedy).0;
    let mut best = (greedy.clone(), greedy_reward);
    let mut improvements = vec![(0, greedy_reward)];

    let mut rng = rng::seeded(cfg.seed);
    let mut arena = vec![Node {
        case: None,
        parent: None,
        children: None,
        visits: 0,
        total: 0.0,
    }];
    for it in 1..=cfg.iterations {
        let mut at = 0usize;
        let mut chosen: Vec<usize> = Vec::new();
        // selection and expansion
        loop {
            if arena[at].children.is_none() {
                let kids: Vec<usize> = search
                    .affordable(&chosen, chosen.last().copied())
                    .into_iter()
                    .map(|case| {
                        arena.push(Node {
                            case: Some(case),
                            parent: Some(at),
                            children: None,
                            visits: 0,
                            total: 0.0,
                        });
                        arena.len() - 1
                    })
                    .collect();
                arena[at].children = Some(kids);
            }
            let kids = arena[at].children.as_ref().expect("expanded above");
            if kids.is_empty() {
                break;
            }
            let ids: Vec<(&str, u64, f64, usize)> = kids
                .iter()
                .map(|&k| {
                    let n = &arena[k];
                    (search.pool[n.case.expect("child has a case")].id.as_str(), n.visits, n.total, k)
                })
                .collect();
            let pick = uct_pick(
                arena[at].visits,
                ids.iter().map(|(id, v, t, _)| (*id, *v, *t)),
                cfg.exploration_c,
            )
            .expect("non-empty children");
            let (_, visits, _, next) = *ids.iter().find(|e| e.0 == pick).expect("picked from ids");
            at = next;
            chosen.push(arena[at].case.expect("child has a case"));
            if visits == 0 {
                break;
            }
        }
        // rollout
        let mut suite = chosen.clone();
        match cfg.rollout_policy {
            RolloutPolicy::Random => search.random_complete(&mut suite, &mut rng),
            RolloutPolicy::Greedy => search.greedy_complete(&mut suite),
        }
        let r = search.evaluate(&suite).0;
        if r > best.1 + 1e-12 {
            best = (suite, r);
            improvements.push((it, r));
        }
        // backpropagation
        let mut cur = Some(at);
        while let Some(i) = cur {
            arena[i].visits += 1;
            arena[i].total += r;
            cur = arena[i].parent;
        }
    }

    let (reward, coverage, detection) = search.evaluate(&best.0);
    let root_children = arena[0]
        .children
        .iter()
        .flatten()
        .map(|&k| {
            let id = search.pool[arena[k].case.expect("child has a case")].id.clone();
            (
                id.clone(),
                MctsNode {
                    chosen: vec![id],
                    visits: arena[k].visits,
                    total_reward: arena[k].total,
                    children: BTreeMap::new(),
                },
            )
        })
        .collect();
    let suite: Vec<TestCase> = best.0.iter().map(|&i| search.pool[i].clone()).collect();
    Ok(OptimizedSuite {
        cost: search.spent(&best.0),
        suite,
        reward,
        coverage,
        detection,
        stats: SearchStats {
            iterations: cfg.iterations,
            nodes: arena.len(),
            greedy_reward,
            improvements,
            excluded,
            root: MctsNode {
                chosen: Vec::new(),
                visits: arena[0].visits,
                total_reward: arena[0].total,
                children: root_children,
            },
        },
    })
}

/// Reward of the whole affordable-or-not pool: an upper bound for any suite
/// when the estimator is monotone.
pub fn reward_ceiling(pool: &[TestCase], sut: &SutModel, cfg: &OptimizerConfig, estimator: &dyn DetectionEstimator) -> f64 {
    let units: BTreeSet<String> = pool.iter().flat_map(|c| units_of_steps(&c.steps, sut)).collect();
    let coverage = if sut.coverage_units.is_empty() {
        0.0
    } else {
        units.iter().filter(|u| sut.coverage_units.contains(*u)).count() as f64 / sut.coverage_units.len() as f64
    };
    let all: Vec<&TestCase> = pool.iter().collect();
    composite_reward(coverage, estimator.estimate(&all).clamp(0.0, 1.0), cfg)
}

/// Judges an optimized suite and reports the ensemble's confidence in it.
pub trait SuiteValidator {
    fn validate(&mut self, cycle: usize, suite: &[TestCase]) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub cycles_used: usize,
    pub converged: bool,
    pub aborted: bool,
    pub best_reward_history: Vec<f64>,
    pub confidence_history: Vec<f64>,
    pub final_confidence: f64,
    pub reward_ceiling: f64,
    pub best_suite: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

/// Generate, optimize and validate for at most ten cycles.
///
/// A cycle converges when the best reward has stopped improving (gain below
/// ε over the previous cycle, or already within ε of the pool's reward
/// ceiling) and the validator's confidence reaches 0.95. The first cycle has
/// no previous best, so only the ceiling test applies there.
pub fn run_feedback_loop(
    reqs: &[RequirementRecord],
    sut: &SutModel,
    cfg: &OptimizerConfig,
    estimator: &dyn DetectionEstimator,
    validator: &mut dyn SuiteValidator,
) -> Result<ConvergenceReport, OptimizerError> {
    cfg.validate()?;
    let mut report = ConvergenceReport {
        cycles_used: 0,
        converged: false,
        aborted: false,
        best_reward_history: Vec::new(),
        confidence_history: Vec::new(),
        final_confidence: 0.0,
        reward_ceiling: 0.0,
        best_suite: Vec::new(),
        abort_reason: None,
    };
    let mut best: Option<f64> = None;
    for cycle in 1..=MAX_CYCLES {
        report.cycles_used = cycle;
        let generated = generate_cases(reqs, sut, rng::derive(cfg.seed, &format!("generate-{cycle}")));
        let ceiling = reward_ceiling(&generated.cases, sut, cfg, estimator);
        report.reward_ceiling = report.reward_ceiling.max(ceiling);
        let cycle_cfg = OptimizerConfig {
            seed: rng::derive(cfg.seed, &format!("optimize-{cycle}")),
            ..cfg.clone()
        };
        let opt = optimize_suite(&generated.cases, sut, &cycle_cfg, estimator)?;
        let confidence = match validator.validate(cycle, &opt.suite) {
            Ok(c) => c,
            Err(e) => {
                report.aborted = true;
                report.abort_reason = Some(e);
                return Ok(report);
            }
        };
        let previous = best;
        if best.is_none_or(|b| opt.reward > b) {
            best = Some(opt.reward);
            report.best_suite = opt.suite.iter().map(|c| c.id.clone()).collect();
        }
        let current = best.expect("set above");
        report.best_reward_history.push(current);
        report.confidence_history.push(confidence);
        report.final_confidence = confidence;
        let settled = report.reward_ceiling - current < CONVERGENCE_EPSILON
            || previous.is_some_and(|p| current - p < CONVERGENCE_EPSILON);
        if settled && confidence >= CONFIDENCE_TARGET {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Deserialize)]
pub struct PoolFixture {
    pub sut: SutModel,
    pub cases: Vec<TestCase>,
    pub faults: Vec<KnownFault>,
}

/// The 20-case reference pool used to check search quality.
pub fn reference_pool() -> PoolFixture {
    serde_json::from_str(include_str!("../fixtures/optimizer_pool.json")).expect("shipped pool fixture parses")
}
