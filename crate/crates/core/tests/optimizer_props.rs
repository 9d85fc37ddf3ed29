use std::collections::BTreeSet;

use proptest::prelude::*;
use veriflow_core::generation::TestCase;
use veriflow_core::optimizer::{
    optimize_suite, reference_pool, run_feedback_loop, FixedDetection, KnownFault, OptimizerConfig, PoolFixture,
    RolloutPolicy, SuiteValidator, TrainingFaults,
};

fn oracle_reward(fx: &PoolFixture, picked: &[&TestCase]) -> f64 {
    let mut units = BTreeSet::new();
    for c in picked {
        for s in &c.steps {
            let ep = fx.sut.endpoints.iter().find(|e| e.id == s.endpoint_id).unwrap();
            units.extend(ep.units.iter().cloned());
        }
    }
    let cov = units.len() as f64 / fx.sut.coverage_units.len() as f64;
    let caught = fx
        .faults
        .iter()
        .filter(|f| {
            picked.iter().any(|c| {
                let strength = (c.expected.assertions.len() as f64 / (1 + c.steps.len()) as f64).min(1.0);
                c.covered_units.contains(&f.unit) && strength >= f.subtlety
            })
        })
        .count();
    0.6 * cov + 0.4 * caught as f64 / fx.faults.len() as f64
}

/// Every subset within budget, by recursion over the pool.
fn exhaustive_optimum(fx: &PoolFixture, budget: u32) -> f64 {
    fn go<'a>(fx: &'a PoolFixture, i: usize, left: u32, acc: &mut Vec<&'a TestCase>, best: &mut f64) {
        if i == fx.cases.len() {
            *best = best.max(oracle_reward(fx, acc));
            return;
        }
        go(fx, i + 1, left, acc, best);
        let c = &fx.cases[i];
        if c.cost <= left {
            acc.push(c);
            go(fx, i + 1, left - c.cost, acc, best);
            acc.pop();
        }
    }
    let mut best = 0.0;
    go(fx, 0, budget, &mut Vec::new(), &mut best);
    best
}

fn estimator(fx: &PoolFixture) -> TrainingFaults {
    TrainingFaults {
        faults: fx.faults.clone(),
    }
}

#[test]
fn reference_pool_shape() {
    let fx = reference_pool();
    assert_eq!(fx.cases.len(), 20);
    assert!(fx.cases.iter().all(|c| c.cost >= 2 && c.cost <= 4));
}

#[test]
fn mcts_within_five_percent_of_exhaustive_optimum() {
    let fx = reference_pool();
    let optimum = exhaustive_optimum(&fx, 8);
    let est = estimator(&fx);
    for seed in 1..=5 {
        let cfg = OptimizerConfig {
            budget: 8,
            seed,
            ..OptimizerConfig::default()
        };
        let out = optimize_suite(&fx.cases, &fx.sut, &cfg, &est).unwrap();
        let picked: Vec<&TestCase> = out.suite.iter().collect();
        assert!((oracle_reward(&fx, &picked) - out.reward).abs() < 1e-12);
        assert!(out.reward >= 0.95 * optimum, "seed {seed}: {} vs optimum {optimum}", out.reward);
        assert!(out.reward >= out.stats.greedy_reward - 1e-9);
        assert!(out.cost <= 8);
    }
}

#[test]
fn seed_42_example() {
    let fx = reference_pool();
    let optimum = exhaustive_optimum(&fx, 8);
    let cfg = OptimizerConfig {
        budget: 8,
        seed: 42,
        ..OptimizerConfig::default()
    };
    let out = optimize_suite(&fx.cases, &fx.sut, &cfg, &estimator(&fx)).unwrap();
    assert!(out.reward >= 0.95 * optimum);
}

#[test]
fn greedy_rollout_also_beats_baseline() {
    let fx = reference_pool();
    let cfg = OptimizerConfig {
        budget: 8,
        rollout_policy: RolloutPolicy::Greedy,
        iterations: 300,
        ..OptimizerConfig::default()
    };
    let out = optimize_suite(&fx.cases, &fx.sut, &cfg, &estimator(&fx)).unwrap();
    assert!(out.reward >= out.stats.greedy_reward - 1e-9);
}

#[test]
fn over_budget_cases_are_excluded_with_warning() {
    let fx = reference_pool();
    let cfg = OptimizerConfig {
        budget: 3,
        iterations: 200,
        ..OptimizerConfig::default()
    };
    let out = optimize_suite(&fx.cases, &fx.sut, &cfg, &FixedDetection(0.3)).unwrap();
    let expect: Vec<String> = fx.cases.iter().filter(|c| c.cost > 3).map(|c| c.id.clone()).collect();
    assert_eq!(out.stats.excluded, expect);
    assert!(out.suite.iter().all(|c| c.cost <= 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn search_invariants(
        budget in 2u32..14,
        seed in any::<u64>(),
        iterations in 1usize..300,
        subset in prop::collection::btree_set(0usize..20, 1..20),
    ) {
        let fx = reference_pool();
        let pool: Vec<TestCase> = subset.iter().map(|&i| fx.cases[i].clone()).collect();
        let cfg = OptimizerConfig { budget, seed, iterations, ..OptimizerConfig::default() };
        let est = estimator(&fx);
        match optimize_suite(&pool, &fx.sut, &cfg, &est) {
            Err(_) => prop_assert!(pool.iter().all(|c| c.cost > budget)),
            Ok(out) => {
                prop_assert!(out.cost <= budget);
                prop_assert!(out.reward >= out.stats.greedy_reward - 1e-9);
                prop_assert!((0.0..=1.0).contains(&out.reward));
                // terminal: nothing else fits
                let left = budget - out.cost;
                let ids: BTreeSet<&str> = out.suite.iter().map(|c| c.id.as_str()).collect();
                prop_assert!(pool.iter().all(|c| ids.contains(c.id.as_str()) || c.cost > left));
                // best-so-far sequence strictly improves
                prop_assert!(out.stats.improvements.windows(2).all(|w| w[1].1 > w[0].1 && w[1].0 > w[0].0));
                let root = &out.stats.root;
                prop_assert_eq!(root.visits as usize, iterations);
                prop_assert!(root.children.values().map(|c| c.visits).sum::<u64>() <= root.visits);
                for ch in root.children.values() {
                    if let Some(m) = ch.mean_reward() {
                        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
                    }
                }
                let again = optimize_suite(&pool, &fx.sut, &cfg, &est).unwrap();
                prop_assert_eq!(again.case_ids(), out.case_ids());
            }
        }
    }
}

struct Capped {
    cap: f64,
    fail_at: Option<usize>,
}

impl SuiteValidator for Capped {
    fn validate(&mut self, cycle: usize, _suite: &[TestCase]) -> Result<f64, String> {
        if Some(cycle) == self.fail_at {
            return Err("validator offline".into());
        }
        Ok(self.cap)
    }
}

fn bank_inputs() -> (Vec<veriflow_core::ingest::RequirementRecord>, veriflow_core::generation::SutModel) {
    let sut = veriflow_core::generation::load_sut_model(include_str!("../fixtures/bank.json")).unwrap();
    let reqs = veriflow_core::ingest::parse_requirements(include_str!("../fixtures/bank_requirements.txt")).unwrap();
    (reqs, sut)
}

#[test]
fn feedback_loop_converges_immediately_when_optimal() {
    let (reqs, sut) = bank_inputs();
    // Budget large enough for the whole pool: the first cycle hits the ceiling.
    let cfg = OptimizerConfig {
        budget: 1000,
        iterations: 50,
        ..OptimizerConfig::default()
    };
    let est = TrainingFaults {
        faults: vec![KnownFault {
            unit: "transfer.debit".into(),
            subtlety: 0.1,
        }],
    };
    let r = run_feedback_loop(&reqs, &sut, &cfg, &est, &mut Capped { cap: 0.97, fail_at: None }).unwrap();
    assert!(r.converged);
    assert_eq!(r.cycles_used, 1);
}

#[test]
fn feedback_loop_stops_at_ten_without_confidence() {
    let (reqs, sut) = bank_inputs();
    let cfg = OptimizerConfig {
        budget: 12,
        iterations: 50,
        ..OptimizerConfig::default()
    };
    let r = run_feedback_loop(&reqs, &sut, &cfg, &FixedDetection(0.5), &mut Capped { cap: 0.90, fail_at: None }).unwrap();
    assert!(!r.converged);
    assert_eq!(r.cycles_used, 10);
    assert_eq!(r.best_reward_history.len(), 10);
    assert!(r.best_reward_history.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn feedback_loop_aborts_on_validator_failure() {
    let (reqs, sut) = bank_inputs();
    let cfg = OptimizerConfig {
        budget: 12,
        iterations: 50,
        ..OptimizerConfig::default()
    };
    let r = run_feedback_loop(&reqs, &sut, &cfg, &FixedDetection(0.5), &mut Capped { cap: 0.5, fail_at: Some(3) }).unwrap();
    assert!(r.aborted);
    assert_eq!(r.cycles_used, 3);
    assert_eq!(r.best_reward_history.len(), 2);
}

