use std::collections::BTreeMap;

use proptest::prelude::*;
use veriflow_core::fairness::{
    anonymize, check_k_anonymity, parity, permutation_attribution, FnModel, Generalization, GroupCount,
    OutcomeTable, QuasiIdentifierTable,
};

fn outcome_table() -> impl Strategy<Value = OutcomeTable> {
    prop::collection::vec((1u64..200).prop_flat_map(|t| (0..=t, Just(t))), 1..=6).prop_map(|gs| OutcomeTable {
        groups: gs
            .into_iter()
            .enumerate()
            .map(|(i, (p, t))| (format!("g{i}"), GroupCount { positives: p, total: t }))
            .collect(),
    })
}

fn brute_gap(t: &OutcomeTable) -> f64 {
    let rates: Vec<f64> = t.groups.values().map(|c| c.positives as f64 / c.total as f64).collect();
    let mut gap: f64 = 0.0;
    for i in 0..rates.len() {
        for j in 0..rates.len() {
            gap = gap.max((rates[i] - rates[j]).abs());
        }
    }
    gap
}

fn ladder() -> Vec<Generalization> {
    vec![
        Generalization::Exact,
        Generalization::Round { width: 10.0 },
        Generalization::Round { width: 50.0 },
        Generalization::Suppress,
    ]
}

fn qi_table() -> impl Strategy<Value = QuasiIdentifierTable> {
    (1..=3usize)
        .prop_flat_map(|cols| (Just(cols), prop::collection::vec(prop::collection::vec(0u32..100, cols), 0..=30)))
        .prop_map(|(cols, rows)| {
            let columns: Vec<String> = (0..cols).map(|c| format!("q{c}")).collect();
            QuasiIdentifierTable {
                hierarchies: columns.iter().map(|c| (c.clone(), ladder())).collect(),
                columns,
                rows: rows
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v.to_string()).collect())
                    .collect(),
            }
        })
}

/// Size of each row's class by pairwise comparison, no hashing or sorting.
fn brute_k_ok(rows: &[Vec<String>], k: usize) -> (bool, usize) {
    let mut undersized_rows = 0;
    for r in rows {
        let n = rows.iter().filter(|o| *o == r).count();
        if n < k {
            undersized_rows += 1;
        }
    }
    (undersized_rows == 0, undersized_rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parity_matches_pairwise_oracle(t in outcome_table()) {
        let r = parity(&t, 0.05).unwrap();
        let gap = brute_gap(&t);
        prop_assert!((r.gap - gap).abs() < 1e-12);
        prop_assert_eq!(r.passed, gap < 0.05);
        prop_assert!((0.0..=1.0).contains(&r.gap));
        prop_assert!((0.0..=1.0).contains(&r.equity_index));
        let hi = r.rates.values().copied().fold(0.0, f64::max);
        let lo = r.rates.values().copied().fold(1.0, f64::min);
        if hi > 0.0 {
            prop_assert!((r.equity_index * hi - lo).abs() < 1e-12);
        }
    }

    #[test]
    fn k_anonymity_matches_pairwise_oracle(t in qi_table(), k in 1usize..7) {
        let r = check_k_anonymity(&t, k);
        let (ok, undersized) = brute_k_ok(&t.rows, k);
        prop_assert_eq!(r.passed, ok);
        prop_assert_eq!(r.violating.iter().map(|c| c.size).sum::<usize>(), undersized);
    }

    #[test]
    fn anonymize_reaches_k5(t in qi_table()) {
        prop_assume!(t.rows.len() >= 5);
        let out = anonymize(&t, 5).unwrap();
        prop_assert!(check_k_anonymity(&out.table, 5).passed);
        prop_assert_eq!(out.table.rows.len(), t.rows.len());
        prop_assert_eq!(out.trace.len(), out.levels.iter().sum::<usize>());
        // Every output cell is the original cell at its column's final rung.
        for (orig, anon) in t.rows.iter().zip(&out.table.rows) {
            for c in 0..t.columns.len() {
                prop_assert_eq!(&anon[c], &ladder()[out.levels[c]].apply(&orig[c]));
            }
        }
    }

    #[test]
    fn linear_attribution_is_additive(
        w in prop::collection::vec(-5.0..5.0f64, 3),
        b in -2.0..2.0f64,
        inst in prop::collection::vec(-10.0..10.0f64, 3),
        bg in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..20),
        seed in any::<u64>(),
    ) {
        let wc = w.clone();
        let model = FnModel {
            features: vec!["x0".into(), "x1".into(), "x2".into()],
            f: move |x: &[f64]| wc.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b,
        };
        let instance: BTreeMap<String, f64> = (0..3).map(|i| (format!("x{i}"), inst[i])).collect();
        let r = permutation_attribution(&model, "p", &instance, &bg, 20, seed).unwrap();
        let delta = r.prediction - r.baseline;
        prop_assert!((r.per_feature.values().sum::<f64>() - delta).abs() < 1e-9);
        // closed form: w_j (x_j − mean background_j)
        for j in 0..3 {
            let mean_j = bg.iter().map(|row| row[j]).sum::<f64>() / bg.len() as f64;
            let key = format!("x{}", j);
            prop_assert!((r.per_feature[&key] - w[j] * (inst[j] - mean_j)).abs() < 1e-9);
        }
    }
}

#[test]
fn two_column_greedy_fixture() {
    // Level 0: all 10 rows unique. Decade-age and 3-digit-zip each still
    // leave 10 undersized rows, so the tie goes to the leftmost column (age).
    // Next step: suppressing age leaves zip classes {4,3,3}, all undersized,
    // while prefixing zip yields {20-29,941*}:5 and {30-39,941*}:5. So zip wins.
    let rows = [
        ("21", "94107"),
        ("23", "94107"),
        ("25", "94110"),
        ("27", "94110"),
        ("29", "94112"),
        ("34", "94107"),
        ("36", "94107"),
        ("38", "94110"),
        ("33", "94112"),
        ("31", "94112"),
    ];
    let t = QuasiIdentifierTable {
        columns: vec!["age".into(), "zip".into()],
        rows: rows.iter().map(|(a, z)| vec![a.to_string(), z.to_string()]).collect(),
        hierarchies: BTreeMap::from([
            (
                "age".to_string(),
                vec![Generalization::Exact, Generalization::Round { width: 10.0 }, Generalization::Suppress],
            ),
            (
                "zip".to_string(),
                vec![Generalization::Exact, Generalization::Prefix { len: 3 }, Generalization::Suppress],
            ),
        ]),
    };
    let out = anonymize(&t, 5).unwrap();
    assert_eq!(out.trace, vec!["age", "zip"]);
    assert_eq!(out.levels, vec![1, 1]);
    assert_eq!(out.table.rows[0], vec!["20-29", "941*"]);
    assert_eq!(out.table.rows[9], vec!["30-39", "941*"]);
}
