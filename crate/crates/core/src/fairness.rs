//! Demographic parity, k-anonymity and permutation feature attribution.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const DEFAULT_PARITY_THRESHOLD: f64 = 0.05;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_PERMUTATIONS: usize = 100;
pub const MAX_BACKGROUND: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum FairnessError {
    #[error("outcome table has no groups")]
    NoGroups,
    #[error("group `{0}` has total 0")]
    ZeroTotal(String),
    #[error("group `{0}` has more positives than total")]
    PositivesExceedTotal(String),
    #[error("row {row} has {found} values, expected {expected}")]
    Arity { row: usize, found: usize, expected: usize },
    #[error("column `{0}` has no generalization ladder")]
    MissingLadder(String),
    #[error("ladder for `{0}` must end in suppression")]
    LadderNotSuppressing(String),
    #[error("k = {k} exceeds row count {rows}")]
    KTooLarge { k: usize, rows: usize },
    #[error("instance features do not match model schema: {0}")]
    FeatureMismatch(String),
    #[error("background set is empty")]
    EmptyBackground,
    #[error("at least one permutation required")]
    NoPermutations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub positives: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub groups: BTreeMap<String, GroupCount>,
}

impl OutcomeTable {
    pub fn record(&mut self, group: &str, positive: bool) {
        let g = self.groups.entry(group.to_string()).or_insert(GroupCount { positives: 0, total: 0 });
        g.total += 1;
        g.positives += positive as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub rates: BTreeMap<String, f64>,
    pub gap: f64,
    pub equity_index: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub fn parity(table: &OutcomeTable, threshold: f64) -> Result<ParityReport, FairnessError> {
    if table.groups.is_empty() {
        return Err(FairnessError::NoGroups);
    }
    let mut rates = BTreeMap::new();
    for (g, c) in &table.groups {
        if c.total == 0 {
            return Err(FairnessError::ZeroTotal(g.clone()));
        }
        if c.positives > c.total {
            return Err(FairnessError::PositivesExceedTotal(g.clone()));
        }
        rates.insert(g.clone(), c.positives as f64 / c.total as f64);
    }
    let lo = rates.values().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = hi - lo;
    Ok(ParityReport {
        rates,
        gap,
        equity_index: if hi == 0.0 { 1.0 } else { lo / hi },
        threshold,
        passed: gap < threshold,
    })
}

/// One rung of a generalization ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generalization {
    Exact,
    /// Numeric bucketing, rendered `lo-hi`.
    Round { width: f64 },
    /// Keep the first `len` characters.
    Prefix { len: usize },
    Suppress,
}

impl Generalization {
    pub fn apply(&self, value: &str) -> String {
        match self {
            Generalization::Exact => value.to_string(),
            Generalization::Round { width } => match value.trim().parse::<f64>() {
                Ok(x) if *width > 0.0 => {
                    let lo = (x / width).floor() * width;
                    let hi = lo + width - if width.fract() == 0.0 { 1.0 } else { 0.0 };
                    format!("{lo}-{hi}")
                }
                _ => "*".to_string(),
            },
            Generalization::Prefix { len } => {
                let head: String = value.chars().take(*len).collect();
                if head.chars().count() < value.chars().count() {
                    format!("{head}*")
                } else {
                    head
                }
            }
            Generalization::Suppress => "*".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiIdentifierTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default)]
    pub hierarchies: BTreeMap<String, Vec<Generalization>>,
}

impl QuasiIdentifierTable {
    fn check_arity(&self) -> Result<(), FairnessError> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != self.columns.len() {
                return Err(FairnessError::Arity {
                    row: i,
                    found: r.len(),
                    expected: self.columns.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceClass {
    pub values: Vec<String>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KAnonymityReport {
    pub k: usize,
    pub passed: bool,
    /// Classes smaller than k, in value order.
    pub violating: Vec<EquivalenceClass>,
}

fn classes(rows: &[Vec<String>]) -> BTreeMap<&[String], usize> {
    let mut out: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in rows {
        *out.entry(r.as_slice()).or_default() += 1;
    }
    out
}

pub fn check_k_anonymity(t: &QuasiIdentifierTable, k: usize) -> KAnonymityReport {
    let violating: Vec<EquivalenceClass> = classes(&t.rows)
        .into_iter()
        .filter(|(_, n)| *n < k)
        .map(|(v, n)| EquivalenceClass {
            values: v.to_vec(),
            size: n,
        })
        .collect();
    KAnonymityReport {
        k,
        passed: violating.is_empty(),
        violating,
    }
}

fn violating_rows(rows: &[Vec<String>], k: usize) -> usize {
    classes(rows).values().filter(|n| **n < k).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anonymization {
    pub table: QuasiIdentifierTable,
    /// Ladder level reached per column.
    pub levels: Vec<usize>,
    /// Column generalized at each greedy step.
    pub trace: Vec<String>,
}

/// Greedy generalization: each step raises by one level the column whose
/// next rung leaves the fewest rows in undersized classes (leftmost wins
/// ties), until the table is k-anonymous.
pub fn anonymize(t: &QuasiIdentifierTable, k: usize) -> Result<Anonymization, FairnessError> {
    t.check_arity()?;
    let ladders: Vec<&Vec<Generalization>> = t
        .columns
        .iter()
        .map(|c| {
            let l = t.hierarchies.get(c).ok_or_else(|| FairnessError::MissingLadder(c.clone()))?;
            if l.last() != Some(&Generalization::Suppress) {
                return Err(FairnessError::LadderNotSuppressing(c.clone()));
            }
            Ok(l)
        })
        .collect::<Result<_, _>>()?;

    let render = |levels: &[usize]| -> Vec<Vec<String>> {
        t.rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(c, v)| ladders[c][levels[c]].apply(v)).collect())
            .collect()
    };

    let mut levels = vec![0usize; t.columns.len()];
    let mut rows = render(&levels);
    let mut trace = Vec::new();
    if check_k_anonymity_rows(&rows, k) {
        return Ok(Anonymization {
            table: QuasiIdentifierTable { rows, ..t.clone() },
            levels,
            trace,
        });
    }
    if k > t.rows.len() {
        return Err(FairnessError::KTooLarge { k, rows: t.rows.len() });
    }
    while !check_k_anonymity_rows(&rows, k) {
        let mut best: Option<(usize, usize, Vec<Vec<String>>)> = None;
        for c in 0..levels.len() {
            if levels[c] + 1 >= ladders[c].len() {
                continue;
            }
            let mut trial = levels.clone();
            trial[c] += 1;
            let trial_rows = render(&trial);
            let score = violating_rows(&trial_rows, k);
            if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                best = Some((c, score, trial_rows));
            }
        }
        let (c, _, next) = best.expect("all columns suppressed implies one class of size >= k");
        levels[c] += 1;
        trace.push(t.columns[c].clone());
        rows = next;
    }
    Ok(Anonymization {
        table: QuasiIdentifierTable { rows, ..t.clone() },
        levels,
        trace,
    })
}

fn check_k_anonymity_rows(rows: &[Vec<String>], k: usize) -> bool {
    violating_rows(rows, k) == 0
}

/// A scoring function over a named feature vector.
pub trait ScoreModel {
    fn feature_names(&self) -> Vec<String>;
    fn score(&self, x: &[f64]) -> f64;
}

/// Wraps a closure as a [`ScoreModel`].
pub struct FnModel<F> {
    pub features: Vec<String>,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64> ScoreModel for FnModel<F> {
    fn feature_names(&self) -> Vec<String> {
        self.features.clone()
    }

    fn score(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub instance_id: String,
    pub per_feature: BTreeMap<String, f64>,
    pub baseline: f64,
    pub prediction: f64,
    pub n_permutations: usize,
    pub seed: u64,
    /// `|Σ per_feature − (prediction − baseline)|`.
    pub efficiency_gap: f64,
}

/// Sampled Shapley values. For every sampled ordering and every background
/// row, features are switched from the background value to the instance
/// value in order and each is credited with the change in score.
pub fn permutation_attribution<M: ScoreModel + ?Sized>(
    model: &M,
    instance_id: &str,
    instance: &BTreeMap<String, f64>,
    background: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
) -> Result<AttributionReport, FairnessError> {
    let names = model.feature_names();
    let provided: BTreeSet<&String> = instance.keys().collect();
    let expected: BTreeSet<&String> = names.iter().collect();
    if provided != expected {
        let diff: Vec<String> = provided
            .symmetric_difference(&expected)
            .map(|s| s.to_string())
            .collect();
        return Err(FairnessError::FeatureMismatch(diff.join(",")));
    }
    if background.is_empty() {
        return Err(FairnessError::EmptyBackground);
    }
    if n_perm == 0 {
        return Err(FairnessError::NoPermutations);
    }
    let d = names.len();
    if let Some((row, r)) = background.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(FairnessError::Arity {
            row,
            found: r.len(),
            expected: d,
        });
    }
    let mut rng = rng::seeded(seed);
    let bg: Vec<&Vec<f64>> = if background.len() > MAX_BACKGROUND {
        let mut picked = index::sample(&mut rng, background.len(), MAX_BACKGROUND).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| &background[i]).collect()
    } else {
        background.iter().collect()
    };
    let x: Vec<f64> = names.iter().map(|n| instance[n]).collect();
    let prediction = model.score(&x);
    let baseline = bg.iter().map(|z| model.score(z)).sum::<f64>() / bg.len() as f64;

    let mut phi = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        for z in &bg {
            let mut cur = (*z).clone();
            let mut prev = model.score(&cur);
            for &j in &order {
                cur[j] = x[j];
                let next = model.score(&cur);
                phi[j] += next - prev;
                prev = next;
            }
        }
    }
    let denom = (n_perm * bg.len()) as f64;
    let per_feature: BTreeMap<String, f64> = names.iter().cloned().zip(phi.iter().map(|p| p / denom)).collect();
    let efficiency_gap = (per_feature.values().sum::<f64>() - (prediction - baseline)).abs();
    Ok(AttributionReport {
        instance_id: instance_id.to_string(),
        per_feature,
        baseline,
        prediction,
        n_permutations: n_perm,
        seed,
        efficiency_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(groups: &[(&str, u64, u64)]) -> OutcomeTable {
        OutcomeTable {
            groups: groups
                .iter()
                .map(|(g, p, t)| (g.to_string(), GroupCount { positives: *p, total: *t }))
                .collect(),
        }
    }

    #[test]
    fn parity_examples() {
        let even = parity(&table(&[("A", 50, 100), ("B", 50, 100)]), 0.05).unwrap();
        assert_eq!(even.gap, 0.0);
        assert!(even.passed);
        let three = parity(&table(&[("A", 60, 100), ("B", 50, 100), ("C", 55, 100)]), 0.05).unwrap();
        assert!((three.gap - 0.10).abs() < 1e-12);
        assert!((three.equity_index - 0.8333).abs() < 1e-4);
        assert!(!three.passed);
        assert_eq!(parity(&table(&[("A", 3, 10)]), 0.05).unwrap().gap, 0.0);
        assert_eq!(parity(&table(&[("A", 0, 10), ("B", 0, 5)]), 0.05).unwrap().equity_index, 1.0);
        assert_eq!(parity(&table(&[("A", 0, 0)]), 0.05), Err(FairnessError::ZeroTotal("A".into())));
        assert_eq!(parity(&OutcomeTable::default(), 0.05), Err(FairnessError::NoGroups));
    }

    fn qi(rows: &[&[&str]]) -> QuasiIdentifierTable {
        QuasiIdentifierTable {
            columns: (0..rows.first().map_or(1, |r| r.len())).map(|i| format!("c{i}")).collect(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
            hierarchies: BTreeMap::new(),
        }
    }

    #[test]
    fn k_anonymity_examples() {
        let mut rows: Vec<&[&str]> = Vec::new();
        rows.extend(std::iter::repeat_n(&["a"][..], 5));
        rows.extend(std::iter::repeat_n(&["b"][..], 7));
        rows.extend(std::iter::repeat_n(&["c"][..], 5));
        assert!(check_k_anonymity(&qi(&rows), 5).passed);
        rows.truncate(16);
        let r = check_k_anonymity(&qi(&rows), 5);
        assert!(!r.passed);
        assert_eq!(
            r.violating,
            vec![EquivalenceClass {
                values: vec!["c".into()],
                size: 4
            }]
        );
        assert!(check_k_anonymity(&qi(&[]), 5).passed);
    }

    #[test]
    fn generalization_rungs() {
        assert_eq!(Generalization::Round { width: 10.0 }.apply("23"), "20-29");
        assert_eq!(Generalization::Round { width: 0.5 }.apply("1.2"), "1-1.5");
        assert_eq!(Generalization::Prefix { len: 3 }.apply("94107"), "941*");
        assert_eq!(Generalization::Prefix { len: 3 }.apply("941"), "941");
        assert_eq!(Generalization::Suppress.apply("x"), "*");
    }

    fn ages() -> QuasiIdentifierTable {
        QuasiIdentifierTable {
            columns: vec!["age".into()],
            rows: ["21", "22", "23", "24", "60"].iter().map(|a| vec![a.to_string()]).collect(),
            hierarchies: BTreeMap::from([(
                "age".to_string(),
                vec![
                    Generalization::Exact,
                    Generalization::Round { width: 10.0 },
                    Generalization::Suppress,
                ],
            )]),
        }
    }

    #[test]
    fn age_fixture_suppresses_fully() {
        // decade level leaves {20-29: 4, 60-69: 1}, so the greedy walk must
        // continue to suppression.
        let out = anonymize(&ages(), 5).unwrap();
        assert_eq!(out.levels, vec![2]);
        assert_eq!(out.trace, vec!["age", "age"]);
        assert!(out.table.rows.iter().all(|r| r == &vec!["*".to_string()]));
        assert!(matches!(anonymize(&ages(), 6), Err(FairnessError::KTooLarge { k: 6, rows: 5 })));
    }

    #[test]
    fn already_anonymous_is_unchanged() {
        let out = anonymize(&ages(), 1).unwrap();
        assert_eq!(out.table, ages());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn ladder_must_end_in_suppression() {
        let mut t = ages();
        t.hierarchies.get_mut("age").unwrap().pop();
        assert_eq!(anonymize(&t, 2), Err(FairnessError::LadderNotSuppressing("age".into())));
    }

    #[test]
    fn constant_model_gets_zero_credit() {
        let m = FnModel {
            features: vec!["a".into(), "b".into()],
            f: |_: &[f64]| 0.7,
        };
        let inst = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 2.0)]);
        let r = permutation_attribution(&m, "i", &inst, &[vec![0.0, 0.0], vec![3.0, 1.0]], 10, 1).unwrap();
        assert!(r.per_feature.values().all(|v| *v == 0.0));
    }

    #[test]
    fn single_feature_linear_is_exact() {
        let m = FnModel {
            features: vec!["a".into()],
            f: |x: &[f64]| 2.0 * x[0] + 1.0,
        };
        let inst = BTreeMap::from([("a".to_string(), 5.0)]);
        let r = permutation_attribution(&m, "i", &inst, &[vec![1.0], vec![3.0]], 3, 0).unwrap();
        // prediction 11, baseline mean(3, 7) = 5
        assert_eq!(r.prediction, 11.0);
        assert_eq!(r.baseline, 5.0);
        assert!((r.per_feature["a"] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attribution_input_checks() {
        let m = FnModel {
            features: vec!["a".into()],
            f: |x: &[f64]| x[0],
        };
        let wrong = BTreeMap::from([("b".to_string(), 1.0)]);
        assert!(matches!(
            permutation_attribution(&m, "i", &wrong, &[vec![0.0]], 1, 0),
            Err(FairnessError::FeatureMismatch(_))
        ));
        let ok = BTreeMap::from([("a".to_string(), 1.0)]);
        assert_eq!(
            permutation_attribution(&m, "i", &ok, &[], 1, 0),
            Err(FairnessError::EmptyBackground)
        );
        assert_eq!(
            permutation_attribution(&m, "i", &ok, &[vec![0.0]], 0, 0),
            Err(FairnessError::NoPermutations)
        );
    }
}
