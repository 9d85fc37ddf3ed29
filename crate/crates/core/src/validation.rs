//! Defect-vs-false-alarm classification by a weighted rule/model vote.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::ExpectedOutcome;
use crate::ingest::{Condition, Scalar};
use crate::rng;

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
pub const FOLDS: usize = 5;
pub const MAX_STEPS: usize = 10_000;
pub const GRAD_TOL: f64 = 1e-6;
pub const MIN_TRAINING_RECORDS: usize = 50;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub const FEATURES: [&str; 6] = [
    "outcome_fail",
    "outcome_error",
    "duration_z",
    "covered_unit_count",
    "hist_failure_rate",
    "max_signal",
];

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("rule set is empty")]
    NoRules,
    #[error("rule `{0}` must have positive weight")]
    RuleWeight(String),
    #[error("rule `{id}` reads unknown field `{field}`")]
    RuleField { id: String, field: String },
    #[error("invalid rule pack: {0}")]
    RulePack(String),
    #[error("need at least {MIN_TRAINING_RECORDS} labeled records, got {0}")]
    TooFewRecords(usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("record `{0}` passed but is labeled a true defect")]
    PassLabeledDefect(String),
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("vote weights must be non-negative and sum to 1, got ({0}, {1})")]
    VoteWeights(f64, f64),
    #[error("score {0} outside [0, 1]")]
    Score(f64),
    #[error("no gold label for `{0}`")]
    MissingGold(String),
    #[error("weight count {weights} does not match schema size {schema}")]
    Schema { weights: usize, schema: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub case_id: String,
    pub outcome: Outcome,
    /// Signal strength per coverage unit.
    pub observed: BTreeMap<String, f64>,
    pub expected: ExpectedOutcome,
    pub duration: f64,
    #[serde(default)]
    pub context: BTreeMap<String, Scalar>,
}

impl ExecutionRecord {
    pub fn max_signal(&self) -> Option<f64> {
        self.observed.values().copied().reduce(f64::max)
    }

    fn context_number(&self, key: &str) -> Option<f64> {
        self.context.get(key).and_then(Scalar::as_f64)
    }

    /// Value a rule predicate reads: `outcome`, `duration`, `assertions`,
    /// `signal.max`, `signal.<unit>` or `context.<key>`.
    pub fn field(&self, path: &str) -> Option<Scalar> {
        match path {
            "outcome" => Some(Scalar::Text(self.outcome.as_str().to_string())),
            "duration" => Some(Scalar::Number(self.duration)),
            "assertions" => Some(Scalar::Number(self.expected.assertions.len() as f64)),
            "signal.max" => self.max_signal().map(Scalar::Number),
            _ => {
                if let Some(unit) = path.strip_prefix("signal.") {
                    self.observed.get(unit).map(|v| Scalar::Number(*v))
                } else if let Some(key) = path.strip_prefix("context.") {
                    self.context.get(key).cloned()
                } else {
                    None
                }
            }
        }
    }

    /// Feature vector in [`FEATURES`] order plus the names that were missing
    /// from the record and defaulted to 0.
    pub fn features(&self) -> (Vec<f64>, Vec<&'static str>) {
        let mut missing = Vec::new();
        let duration_z = match (self.context_number("duration_mean"), self.context_number("duration_std")) {
            (Some(m), Some(s)) if s > 0.0 => (self.duration - m) / s,
            _ => {
                missing.push("duration_z");
                0.0
            }
        };
        let units = self.context_number("covered_units").unwrap_or_else(|| {
            missing.push("covered_unit_count");
            0.0
        });
        let hist = self.context_number("hist_failure_rate").unwrap_or_else(|| {
            missing.push("hist_failure_rate");
            0.0
        });
        let x = vec![
            (self.outcome == Outcome::Fail) as u8 as f64,
            (self.outcome == Outcome::Error) as u8 as f64,
            duration_z,
            units,
            hist,
            self.max_signal().unwrap_or(0.0),
        ];
        (x, missing)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    /// The subject is a record field path (see [`ExecutionRecord::field`]).
    pub predicate: Condition,
    #[serde(default = "one")]
    pub weight: f64,
}

impl Rule {
    pub fn matches(&self, rec: &ExecutionRecord) -> bool {
        let p = &self.predicate;
        p.comparator.holds(rec.field(&p.subject).as_ref(), p.value.as_ref())
    }
}

fn known_field(path: &str) -> bool {
    matches!(path, "outcome" | "duration" | "assertions")
        || ["signal.", "context."]
            .iter()
            .any(|p| path.strip_prefix(p).is_some_and(|rest| !rest.is_empty()))
}

pub fn load_rule_pack(doc: &str) -> Result<Vec<Rule>, ValidationError> {
    let rules: Vec<Rule> = serde_json::from_str(doc).map_err(|e| ValidationError::RulePack(e.to_string()))?;
    for r in &rules {
        if !(r.weight > 0.0) {
            return Err(ValidationError::RuleWeight(r.id.clone()));
        }
        let p = &r.predicate;
        if Condition::new(p.subject.clone(), p.comparator, p.value.clone()).is_none() {
            return Err(ValidationError::RulePack(format!("rule `{}` has an ill-typed predicate", r.id)));
        }
        if !known_field(&r.predicate.subject) {
            return Err(ValidationError::RuleField {
                id: r.id.clone(),
                field: r.predicate.subject.clone(),
            });
        }
    }
    Ok(rules)
}

pub fn default_rule_pack() -> Vec<Rule> {
    load_rule_pack(include_str!("../fixtures/rules.json")).expect("shipped rule pack is valid")
}

/// Satisfied weight over total weight.
pub fn rule_score(rules: &[Rule], rec: &ExecutionRecord) -> Result<f64, ValidationError> {
    if rules.is_empty() {
        return Err(ValidationError::NoRules);
    }
    let total: f64 = rules.iter().map(|r| r.weight).sum();
    let hit: f64 = rules.iter().filter(|r| r.matches(rec)).map(|r| r.weight).sum();
    Ok(hit / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub feature_schema: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64, lambda: f64) -> Result<Self, ValidationError> {
        if weights.len() != FEATURES.len() {
            return Err(ValidationError::Schema {
                weights: weights.len(),
                schema: FEATURES.len(),
            });
        }
        Ok(LinearModel {
            feature_schema: FEATURES.iter().map(|s| s.to_string()).collect(),
            weights,
            bias,
            lambda,
        })
    }

    pub fn predict_features(&self, x: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

impl crate::fairness::ScoreModel for LinearModel {
    fn feature_names(&self) -> Vec<String> {
        self.feature_schema.clone()
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.predict_features(x)
    }
}

/// `σ(w·x + b)`. Features missing from the record count as 0.
pub fn predict(model: &LinearModel, rec: &ExecutionRecord) -> f64 {
    model.predict_features(&rec.features().0)
}

/// Mean logistic loss plus `λ/2·‖w‖²` (bias unpenalized) and its gradient
/// `(∂w, ∂b)`.
pub fn logistic_loss_and_grad(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = b + w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
        // log(1 + e^z) − y·z, computed without overflow
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - yi * z;
        let r = sigmoid(z) - yi;
        for (g, v) in gw.iter_mut().zip(xi) {
            *g += r * v;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, wj) in gw.iter_mut().zip(w) {
        *g = *g / n + lambda * wj;
    }
    loss += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    (loss, gw, gb)
}

/// Mean unregularized log-loss.
pub fn log_loss(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> f64 {
    logistic_loss_and_grad(x, y, w, b, 0.0).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub steps: usize,
    pub grad_norm: f64,
}

/// Plain gradient descent with step `1/L`, where `L` bounds the Lipschitz
/// constant of the gradient for the given data.
pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], lambda: f64) -> (Vec<f64>, f64, FitStats) {
    let d = x.first().map_or(0, Vec::len);
    let max_sq = x
        .iter()
        .map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + lambda);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut stats = FitStats {
        steps: 0,
        grad_norm: f64::INFINITY,
    };
    while stats.steps < MAX_STEPS {
        let (_, gw, gb) = logistic_loss_and_grad(x, y, &w, b, lambda);
        stats.grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if stats.grad_norm < GRAD_TOL {
            break;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= step * g;
        }
        b -= step * gb;
        stats.steps += 1;
    }
    (w, b, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TrueDefect,
    FalseAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub record: ExecutionRecord,
    pub label: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

pub const SPLIT: SplitFractions = SplitFractions {
    train: 0.7,
    val: 0.2,
    test: 0.1,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/20/10 split within each class.
pub fn stratified_split(labels: &[Verdict], seed: u64) -> Split {
    let mut rng = rng::seeded(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [Verdict::TrueDefect, Verdict::FalseAlarm] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (n * SPLIT.train).round() as usize;
        let n_val = ((n * SPLIT.val).round() as usize).min(idx.len() - n_train);
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Scaler { mean, std }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect())
            .collect()
    }

    /// Raw-space weights for a model fit on scaled inputs.
    fn unscale(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let raw: Vec<f64> = w.iter().zip(&self.std).map(|(wj, s)| wj / s).collect();
        let shift: f64 = raw.iter().zip(&self.mean).map(|(wj, m)| wj * m).sum();
        (raw, b - shift)
    }
}

fn fit_raw(x: &[Vec<f64>], y: &[f64], lambda: f64) -> (Vec<f64>, f64, FitStats) {
    let scaler = Scaler::fit(x);
    let (w, b, stats) = fit_logistic(&scaler.apply(x), y, lambda);
    let (w, b) = scaler.unscale(&w, b);
    (w, b, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub precision: f64,
    pub recall: f64,
    pub false_negative_rate: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassifierMetrics {
    /// Precision is 1 when nothing is predicted positive; recall is 1 and
    /// FNR 0 when there are no positives.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (pred, gold) in pairs {
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let ratio = |a: usize, b: usize, empty: f64| if a + b == 0 { empty } else { a as f64 / (a + b) as f64 };
        ClassifierMetrics {
            precision: ratio(tp, fp, 1.0),
            recall: ratio(tp, fn_, 1.0),
            false_negative_rate: ratio(fn_, tp, 0.0),
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub split: SplitFractions,
    pub split_sizes: [usize; 3],
    pub folds: usize,
    pub cv_losses: Vec<(f64, f64)>,
    pub chosen_lambda: f64,
    pub test_precision: f64,
    pub test_recall: f64,
    pub false_negative_rate: f64,
    pub fit: FitStats,
}

pub fn train_model(
    dataset: &[LabeledRecord],
    lambda_grid: &[f64],
    seed: u64,
) -> Result<(LinearModel, TrainReport, Split), ValidationError> {
    if lambda_grid.is_empty() {
        return Err(ValidationError::EmptyGrid);
    }
    if dataset.len() < MIN_TRAINING_RECORDS {
        return Err(ValidationError::TooFewRecords(dataset.len()));
    }
    if let Some(bad) = dataset
        .iter()
        .find(|r| r.record.outcome == Outcome::Pass && r.label == Verdict::TrueDefect)
    {
        return Err(ValidationError::PassLabeledDefect(bad.record.case_id.clone()));
    }
    let labels: Vec<Verdict> = dataset.iter().map(|r| r.label).collect();
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(ValidationError::SingleClass);
    }
    let x: Vec<Vec<f64>> = dataset.iter().map(|r| r.record.features().0).collect();
    let y: Vec<f64> = labels.iter().map(|l| (*l == Verdict::TrueDefect) as u8 as f64).collect();
    let split = stratified_split(&labels, seed);

    // Fold assignment: round-robin within class over the shuffled order.
    let mut rng = rng::seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut fold_of = BTreeMap::new();
    for class in [1.0, 0.0] {
        let mut idx: Vec<usize> = split.train.iter().copied().filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of.insert(i, k % FOLDS);
        }
    }
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
    };

    let mut cv_losses = Vec::new();
    for &lambda in lambda_grid {
        let mut total = 0.0;
        let mut used = 0;
        for f in 0..FOLDS {
            let (tr, va): (Vec<usize>, Vec<usize>) = split.train.iter().partition(|i| fold_of[*i] != f);
            let (xt, yt) = pick(&tr);
            let (xv, yv) = pick(&va);
            if xv.is_empty() || xt.is_empty() {
                continue;
            }
            let (w, b, _) = fit_raw(&xt, &yt, lambda);
            total += log_loss(&xv, &yv, &w, b);
            used += 1;
        }
        cv_losses.push((lambda, total / used.max(1) as f64));
    }
    let chosen_lambda = cv_losses
        .iter()
        .fold(None::<(f64, f64)>, |best, &(l, loss)| match best {
            Some((_, bl)) if bl <= loss => best,
            _ => Some((l, loss)),
        })
        .map(|(l, _)| l)
        .expect("grid non-empty");

    let final_idx: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    let (xf, yf) = pick(&final_idx);
    let (w, b, fit) = fit_raw(&xf, &yf, chosen_lambda);
    let model = LinearModel::new(w, b, chosen_lambda)?;

    let test = ClassifierMetrics::from_pairs(
        split
            .test
            .iter()
            .map(|&i| (model.predict_features(&x[i]) >= DEFAULT_THRESHOLD, y[i] == 1.0)),
    );
    let report = TrainReport {
        split: SPLIT,
        split_sizes: [split.train.len(), split.val.len(), split.test.len()],
        folds: FOLDS,
        cv_losses,
        chosen_lambda,
        test_precision: test.precision,
        test_recall: test.recall,
        false_negative_rate: test.false_negative_rate,
        fit,
    };
    Ok((model, report, split))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteWeights {
    pub w_rule: f64,
    pub w_model: f64,
}

impl Default for VoteWeights {
    fn default() -> Self {
        VoteWeights {
            w_rule: 0.4,
            w_model: 0.6,
        }
    }
}

impl VoteWeights {
    pub fn new(w_rule: f64, w_model: f64) -> Result<Self, ValidationError> {
        if w_rule < 0.0 || w_model < 0.0 || (w_rule + w_model - 1.0).abs() > 1e-9 {
            return Err(ValidationError::VoteWeights(w_rule, w_model));
        }
        Ok(VoteWeights { w_rule, w_model })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub case_id: String,
    pub verdict: Verdict,
    pub confidence: f64,
    pub rule_score: f64,
    pub model_score: f64,
    pub vote_weights: VoteWeights,
}

impl VerdictRecord {
    /// Confidence in whichever verdict was reached.
    pub fn certainty(&self) -> f64 {
        match self.verdict {
            Verdict::TrueDefect => self.confidence,
            Verdict::FalseAlarm => 1.0 - self.confidence,
        }
    }
}

pub fn ensemble_verdict(
    case_id: &str,
    rule_score: f64,
    model_score: f64,
    weights: VoteWeights,
    threshold: f64,
) -> Result<VerdictRecord, ValidationError> {
    VoteWeights::new(weights.w_rule, weights.w_model)?;
    for s in [rule_score, model_score] {
        if !(0.0..=1.0).contains(&s) {
            return Err(ValidationError::Score(s));
        }
    }
    let confidence = weights.w_rule * rule_score + weights.w_model * model_score;
    Ok(VerdictRecord {
        case_id: case_id.to_string(),
        verdict: if confidence >= threshold {
            Verdict::TrueDefect
        } else {
            Verdict::FalseAlarm
        },
        confidence,
        rule_score,
        model_score,
        vote_weights: weights,
    })
}

/// Rules, model and vote weights bundled for scoring execution records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validator {
    pub rules: Vec<Rule>,
    pub model: LinearModel,
    pub weights: VoteWeights,
    pub threshold: f64,
}

impl Validator {
    /// Passing records are never defects and skip scoring.
    pub fn judge(&self, rec: &ExecutionRecord) -> Result<VerdictRecord, ValidationError> {
        if rec.outcome == Outcome::Pass {
            return ensemble_verdict(&rec.case_id, 0.0, 0.0, self.weights, self.threshold);
        }
        ensemble_verdict(
            &rec.case_id,
            rule_score(&self.rules, rec)?,
            predict(&self.model, rec),
            self.weights,
            self.threshold,
        )
    }
}

pub fn evaluate_classifier(
    verdicts: &[VerdictRecord],
    gold: &BTreeMap<String, Verdict>,
) -> Result<ClassifierMetrics, ValidationError> {
    let pairs = verdicts
        .iter()
        .map(|v| {
            let g = gold.get(&v.case_id).ok_or_else(|| ValidationError::MissingGold(v.case_id.clone()))?;
            Ok((v.verdict == Verdict::TrueDefect, *g == Verdict::TrueDefect))
        })
        .collect::<Result<Vec<_>, ValidationError>>()?;
    Ok(ClassifierMetrics::from_pairs(pairs))
}

/// Picks `w_rule` from `{0, 0.1, …, 1}` maximizing validation F1, breaking
/// ties toward the default 0.4.
pub fn tune_vote_weights(
    rules: &[Rule],
    model: &LinearModel,
    val: &[LabeledRecord],
    threshold: f64,
) -> Result<VoteWeights, ValidationError> {
    let scored: Vec<(f64, f64, bool)> = val
        .iter()
        .map(|r| {
            Ok((
                rule_score(rules, &r.record)?,
                predict(model, &r.record),
                r.label == Verdict::TrueDefect,
            ))
        })
        .collect::<Result<_, ValidationError>>()?;
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, VoteWeights::default());
    for step in 0..=10 {
        let w = VoteWeights::new(step as f64 / 10.0, 1.0 - step as f64 / 10.0)?;
        let m = ClassifierMetrics::from_pairs(
            scored
                .iter()
                .map(|(rs, ms, g)| (w.w_rule * rs + w.w_model * ms >= threshold, *g)),
        );
        let f1 = if m.tp == 0 {
            0.0
        } else {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        };
        let dist = (w.w_rule - 0.4).abs();
        if f1 > best.0 + 1e-12 || ((f1 - best.0).abs() <= 1e-12 && dist < best.1) {
            best = (f1, dist, w);
        }
    }
    Ok(best.2)
}

/// A failing execution drawn from the benchmark distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFailure {
    pub outcome: Outcome,
    pub observed: BTreeMap<String, f64>,
    pub duration: f64,
    pub context: BTreeMap<String, Scalar>,
}

/// Genuine defects fail with stronger signals, fail again on retry and rarely
/// come with environment errors; false alarms look flaky.
pub fn synthetic_failure<R: rand::Rng>(rng: &mut R, defect: bool) -> SyntheticFailure {
    let outcome = match (defect, rng.gen::<f64>()) {
        (true, p) if p < 0.95 => Outcome::Fail,
        (false, p) if p < 0.6 => Outcome::Fail,
        _ => Outcome::Error,
    };
    let signal = if defect { rng.gen_range(0.3..1.0) } else { rng.gen_range(0.0..0.6) };
    let units = rng.gen_range(1..=4);
    let observed: BTreeMap<String, f64> = (0..units)
        .map(|u| (format!("u{u}"), if u == 0 { signal } else { signal * rng.gen_range(0.0..1.0) }))
        .collect();
    let assertion_failures = if rng.gen_bool(if defect { 0.7 } else { 0.4 }) {
        rng.gen_range(1..=3)
    } else {
        0
    };
    let duration = if defect {
        5.0 + rng.gen_range(-2.0..2.0)
    } else if rng.gen_bool(0.2) {
        rng.gen_range(25.0..40.0)
    } else {
        rng.gen_range(2.0..10.0)
    };
    let mut context = BTreeMap::from([
        ("assertion_failures".to_string(), Scalar::Number(assertion_failures as f64)),
        ("retry_passed".to_string(), Scalar::Bool(rng.gen_bool(if defect { 0.35 } else { 0.75 }))),
        (
            "hist_failure_rate".to_string(),
            Scalar::Number(if defect { rng.gen_range(0.0..0.3) } else { rng.gen_range(0.1..0.6) }),
        ),
        ("covered_units".to_string(), Scalar::Number(units as f64)),
        ("duration_mean".to_string(), Scalar::Number(6.0)),
        ("duration_std".to_string(), Scalar::Number(4.0)),
    ]);
    if outcome == Outcome::Error && !defect {
        context.insert("env_error".to_string(), Scalar::Bool(true));
    }
    if rng.gen_bool(if defect { 0.5 } else { 0.3 }) {
        context.insert("stack_trace".to_string(), Scalar::Bool(true));
    }
    SyntheticFailure {
        outcome,
        observed,
        duration,
        context,
    }
}

/// Seeded synthetic execution outcomes: genuine defects versus flaky or
/// environment-caused failures, about 40% defects.
pub fn synthetic_benchmark(n: usize, seed: u64) -> Vec<LabeledRecord> {
    use rand::Rng;
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let defect = rng.gen_bool(0.4);
            let f = synthetic_failure(&mut rng, defect);
            let n_assert = rng.gen_range(1..=4);
            LabeledRecord {
                record: ExecutionRecord {
                    case_id: format!("B{i:04}"),
                    outcome: f.outcome,
                    observed: f.observed,
                    expected: ExpectedOutcome {
                        status: crate::generation::ExpectedStatus::Accepted,
                        assertions: (0..n_assert).map(|k| format!("a{k}")).collect(),
                    },
                    duration: f.duration,
                    context: f.context,
                },
                label: if defect { Verdict::TrueDefect } else { Verdict::FalseAlarm },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::ExpectedStatus;
    use crate::ingest::Comparator;

    pub(crate) fn record(outcome: Outcome, signal: f64) -> ExecutionRecord {
        ExecutionRecord {
            case_id: "c".into(),
            outcome,
            observed: BTreeMap::from([("u1".to_string(), signal)]),
            expected: ExpectedOutcome {
                status: ExpectedStatus::Accepted,
                assertions: vec!["status == accepted".into()],
            },
            duration: 2.0,
            context: BTreeMap::new(),
        }
    }

    fn rule(id: &str, subject: &str, cmp: Comparator, v: Scalar, weight: f64) -> Rule {
        Rule {
            id: id.into(),
            predicate: Condition::new(subject, cmp, Some(v)).unwrap(),
            weight,
        }
    }

    #[test]
    fn rule_score_examples() {
        let rec = record(Outcome::Fail, 0.9);
        let rules = vec![
            rule("a", "outcome", Comparator::Eq, Scalar::Text("fail".into()), 2.0),
            rule("b", "signal.max", Comparator::Ge, Scalar::Number(0.5), 1.0),
            rule("c", "duration", Comparator::Gt, Scalar::Number(10.0), 1.0),
        ];
        assert_eq!(rule_score(&rules, &rec).unwrap(), 0.75);
        assert_eq!(rule_score(&rules[..2], &rec).unwrap(), 1.0);
        assert_eq!(rule_score(&rules[2..], &rec).unwrap(), 0.0);
        assert_eq!(rule_score(&[], &rec), Err(ValidationError::NoRules));
    }

    #[test]
    fn shipped_pack_has_twelve_rules() {
        assert_eq!(default_rule_pack().len(), 12);
        let bad = r#"[{"id":"x","predicate":{"subject":"colour","comparator":"eq","value":"red"}}]"#;
        assert!(matches!(load_rule_pack(bad), Err(ValidationError::RuleField { .. })));
        let zero = r#"[{"id":"x","predicate":{"subject":"duration","comparator":"gt","value":1},"weight":0}]"#;
        assert!(matches!(load_rule_pack(zero), Err(ValidationError::RuleWeight(_))));
    }

    #[test]
    fn predict_examples() {
        let rec = record(Outcome::Fail, 0.0);
        let zero = LinearModel::new(vec![0.0; 6], 0.0, 0.0).unwrap();
        assert_eq!(predict(&zero, &rec), 0.5);
        let ln3 = LinearModel::new(vec![0.0; 6], 3f64.ln(), 0.0).unwrap();
        assert!((predict(&ln3, &rec) - 0.75).abs() < 1e-12);
        let sat = LinearModel::new(vec![0.0; 6], 50.0, 0.0).unwrap();
        assert!(predict(&sat, &rec) > 0.999);
    }

    #[test]
    fn ensemble_examples() {
        let v = ensemble_verdict("c", 1.0, 0.9, VoteWeights::default(), 0.5).unwrap();
        assert!((v.confidence - 0.94).abs() < 1e-12);
        assert_eq!(v.verdict, Verdict::TrueDefect);
        let rules_only = ensemble_verdict("c", 0.3, 0.9, VoteWeights::new(1.0, 0.0).unwrap(), 0.5).unwrap();
        assert_eq!(rules_only.confidence, 0.3);
        let low = ensemble_verdict("c", 0.2, 0.3, VoteWeights::new(0.5, 0.5).unwrap(), 0.5).unwrap();
        assert_eq!(low.verdict, Verdict::FalseAlarm);
        assert!((low.confidence - 0.25).abs() < 1e-12);
        assert!(VoteWeights::new(0.5, 0.6).is_err());
        let bad = VoteWeights {
            w_rule: 0.7,
            w_model: 0.7,
        };
        assert!(ensemble_verdict("c", 0.1, 0.1, bad, 0.5).is_err());
    }

    #[test]
    fn classifier_metrics_examples() {
        let mut pairs = vec![(true, true); 8];
        pairs.extend([(true, false); 2]);
        pairs.extend([(false, true); 2]);
        let m = ClassifierMetrics::from_pairs(pairs);
        assert_eq!((m.precision, m.recall, m.false_negative_rate), (0.8, 0.8, 0.2));
        let perfect = ClassifierMetrics::from_pairs([(true, true), (false, false)]);
        assert_eq!((perfect.precision, perfect.recall, perfect.false_negative_rate), (1.0, 1.0, 0.0));
        let silent = ClassifierMetrics::from_pairs([(false, true), (false, false)]);
        assert_eq!(silent.recall, 0.0);
    }

    #[test]
    fn evaluate_needs_gold() {
        let v = ensemble_verdict("zz", 1.0, 1.0, VoteWeights::default(), 0.5).unwrap();
        assert_eq!(
            evaluate_classifier(&[v], &BTreeMap::new()),
            Err(ValidationError::MissingGold("zz".into()))
        );
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let labels: Vec<Verdict> = (0..100)
            .map(|i| if i % 4 == 0 { Verdict::TrueDefect } else { Verdict::FalseAlarm })
            .collect();
        let s = stratified_split(&labels, 3);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // per class: 25 → (17.5→18, 5, 2), 75 → (52.5→53, 15, 7)
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (71, 20, 9));
        let pos = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == Verdict::TrueDefect).count();
        assert_eq!((pos(&s.train), pos(&s.val), pos(&s.test)), (18, 5, 2));
    }

    #[test]
    fn training_guards() {
        let mk = |n: usize, label: Verdict| -> Vec<LabeledRecord> {
            (0..n)
                .map(|i| LabeledRecord {
                    record: ExecutionRecord {
                        case_id: format!("r{i}"),
                        ..record(Outcome::Fail, i as f64)
                    },
                    label,
                })
                .collect()
        };
        assert_eq!(
            train_model(&mk(10, Verdict::TrueDefect), &DEFAULT_LAMBDA_GRID, 0).unwrap_err(),
            ValidationError::TooFewRecords(10)
        );
        assert_eq!(
            train_model(&mk(60, Verdict::FalseAlarm), &DEFAULT_LAMBDA_GRID, 0).unwrap_err(),
            ValidationError::SingleClass
        );
        assert_eq!(
            train_model(&mk(60, Verdict::FalseAlarm), &[], 0).unwrap_err(),
            ValidationError::EmptyGrid
        );
        let mut passing = mk(60, Verdict::FalseAlarm);
        passing[3].record.outcome = Outcome::Pass;
        passing[3].label = Verdict::TrueDefect;
        assert_eq!(
            train_model(&passing, &DEFAULT_LAMBDA_GRID, 0).unwrap_err(),
            ValidationError::PassLabeledDefect("r3".into())
        );
    }
}
