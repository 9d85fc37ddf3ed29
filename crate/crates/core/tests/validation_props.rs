use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use veriflow_core::fairness::permutation_attribution;
use veriflow_core::validation::*;

fn dataset(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let y = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
    (x, y)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|p| p * p).sum::<f64>().sqrt().max(b.iter().map(|q| q * q).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

#[test]
fn gradient_matches_central_differences() {
    let (x, y) = dataset(40, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    for _ in 0..20 {
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let lambda = rng.gen_range(0.0..1.0);
        let (_, gw, gb) = logistic_loss_and_grad(&x, &y, &w, b, lambda);
        let mut numeric = Vec::new();
        for j in 0..6 {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += h;
            down[j] -= h;
            let fu = logistic_loss_and_grad(&x, &y, &up, b, lambda).0;
            let fd = logistic_loss_and_grad(&x, &y, &down, b, lambda).0;
            numeric.push((fu - fd) / (2.0 * h));
        }
        let fu = logistic_loss_and_grad(&x, &y, &w, b + h, lambda).0;
        let fd = logistic_loss_and_grad(&x, &y, &w, b - h, lambda).0;
        numeric.push((fu - fd) / (2.0 * h));
        let mut analytic = gw.clone();
        analytic.push(gb);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "relative error {e}");
    }
}

/// 60 failing records whose max signal alone separates the classes.
fn separable() -> Vec<LabeledRecord> {
    let base = synthetic_benchmark(60, 1);
    base.into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            let defect = i % 2 == 0;
            r.record.outcome = Outcome::Fail;
            let s = if defect { 0.6 + (i as f64) / 300.0 } else { 0.1 + (i as f64) / 300.0 };
            r.record.observed = [("u0".to_string(), s)].into_iter().collect();
            r.label = if defect { Verdict::TrueDefect } else { Verdict::FalseAlarm };
            r
        })
        .collect()
}

/// Searches single-feature thresholds for a perfect split.
fn axis_separator(data: &[LabeledRecord]) -> Option<(usize, f64)> {
    let xs: Vec<(Vec<f64>, bool)> = data
        .iter()
        .map(|r| (r.record.features().0, r.label == Verdict::TrueDefect))
        .collect();
    for j in 0..FEATURES.len() {
        let mut cuts: Vec<f64> = xs.iter().map(|(x, _)| x[j]).collect();
        cuts.sort_by(f64::total_cmp);
        for c in cuts {
            if xs.iter().all(|(x, y)| (x[j] >= c) == *y) {
                return Some((j, c));
            }
        }
    }
    None
}

#[test]
fn separable_set_gives_perfect_test_precision() {
    let data = separable();
    let (feature, _) = axis_separator(&data).expect("fixture is separable");
    assert_eq!(FEATURES[feature], "max_signal");
    let (_, report, split) = train_model(&data, &DEFAULT_LAMBDA_GRID, 1).unwrap();
    assert_eq!(report.test_precision, 1.0);
    assert_eq!(report.folds, 5);
    assert_eq!(split.test.len(), 6);
    assert!(DEFAULT_LAMBDA_GRID.contains(&report.chosen_lambda));
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_benchmark(120, 4);
    let a = train_model(&data, &DEFAULT_LAMBDA_GRID, 9).unwrap();
    let b = train_model(&data, &DEFAULT_LAMBDA_GRID, 9).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn ensemble_lowers_false_negatives_on_benchmark() {
    let started = Instant::now();
    let data = synthetic_benchmark(500, 2024);
    let (model, _, split) = train_model(&data, &DEFAULT_LAMBDA_GRID, 2024).unwrap();
    let rules = default_rule_pack();
    let held_out: Vec<&LabeledRecord> = split.val.iter().chain(&split.test).map(|&i| &data[i]).collect();
    let fnr = |pred: &dyn Fn(&ExecutionRecord) -> bool| {
        ClassifierMetrics::from_pairs(
            held_out
                .iter()
                .map(|r| (pred(&r.record), r.label == Verdict::TrueDefect)),
        )
        .false_negative_rate
    };
    let rules_only = fnr(&|r| rule_score(&rules, r).unwrap() >= 0.5);
    let model_only = fnr(&|r| predict(&model, r) >= 0.5);
    let v = Validator {
        rules: rules.clone(),
        model: model.clone(),
        weights: VoteWeights::default(),
        threshold: 0.5,
    };
    let ensemble = fnr(&|r| v.judge(r).unwrap().verdict == Verdict::TrueDefect);
    eprintln!("FNR rules {rules_only:.4} model {model_only:.4} ensemble {ensemble:.4} in {:?}", started.elapsed());
    assert!(ensemble <= rules_only);
    assert!(ensemble <= model_only);
}

#[test]
fn logistic_attribution_within_sampling_tolerance() {
    let data = synthetic_benchmark(300, 8);
    let (model, _, split) = train_model(&data, &DEFAULT_LAMBDA_GRID, 8).unwrap();
    let background: Vec<Vec<f64>> = split.train.iter().map(|&i| data[i].record.features().0).collect();
    for &i in split.test.iter().take(10) {
        let x = data[i].record.features().0;
        let inst = FEATURES.iter().map(|f| f.to_string()).zip(x).collect();
        let r = permutation_attribution(&model, &data[i].record.case_id, &inst, &background, 100, 3).unwrap();
        let delta = r.prediction - r.baseline;
        let sum: f64 = r.per_feature.values().sum();
        assert!((sum - delta).abs() <= delta.abs() * 0.05 + 0.01);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confidence_is_the_declared_mix(rs in 0.0..=1.0f64, ms in 0.0..=1.0f64, step in 0..=10u32, th in 0.0..=1.0f64) {
        let w = VoteWeights::new(step as f64 / 10.0, 1.0 - step as f64 / 10.0).unwrap();
        let v = ensemble_verdict("x", rs, ms, w, th).unwrap();
        prop_assert_eq!(v.confidence, w.w_rule * v.rule_score + w.w_model * v.model_score);
        prop_assert_eq!(v.verdict == Verdict::TrueDefect, v.confidence >= th);
    }

    #[test]
    fn split_is_partition(n in 2usize..200, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let labels: Vec<Verdict> = (0..n)
            .map(|i| if (i as f64) < n as f64 * frac { Verdict::TrueDefect } else { Verdict::FalseAlarm })
            .collect();
        let s = stratified_split(&labels, seed);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for class in [Verdict::TrueDefect, Verdict::FalseAlarm] {
            let m = labels.iter().filter(|l| **l == class).count() as f64;
            let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == class).count() as f64;
            prop_assert!((count(&s.train) - 0.7 * m).abs() <= 0.5 + 1e-9);
            prop_assert!((count(&s.val) - 0.2 * m).abs() <= 1.0 + 1e-9);
        }
    }
}
