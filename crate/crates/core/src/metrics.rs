//! Delivery and quality metrics computed from event streams.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Assignment count up to which [`ab_test`] enumerates exhaustively.
pub const EXACT_LIMIT: u64 = 20_000;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.03;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no deployed changes")]
    NoDeployedChanges,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("window must have positive length")]
    ZeroWindow,
    #[error("found {found} exceeds injected {injected}")]
    FoundExceedsInjected { found: u64, injected: u64 },
    #[error("injected count must be positive")]
    NoneInjected,
    #[error("each sample needs at least 2 points, got {0}")]
    UndersizedSample(usize),
    #[error("baseline is zero; percent change undefined")]
    ZeroBaseline,
    #[error("feature `{0}` missing from one window")]
    FeatureMismatch(String),
    #[error("at least 2 bins required, got {0}")]
    Bins(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub id: String,
    pub committed_at: DateTime<Utc>,
    pub deployed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployEvent {
    pub id: String,
    pub at: DateTime<Utc>,
    pub outcome: DeployOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentEvent {
    pub id: String,
    pub opened_at: DateTime<Utc>,
    pub resolved_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Window {
    pub fn weeks(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / (7.0 * 24.0 * 3_600_000.0)
    }
}

fn hours(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_milliseconds() as f64 / 3_600_000.0
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTime {
    pub mean: f64,
    pub median: f64,
    pub samples: Vec<f64>,
    pub undeployed: usize,
}

pub fn lead_time(changes: &[ChangeRecord]) -> Result<LeadTime, MetricsError> {
    let samples: Vec<f64> = changes
        .iter()
        .filter_map(|c| c.deployed_at.map(|d| hours(c.committed_at, d)))
        .collect();
    if samples.is_empty() {
        return Err(MetricsError::NoDeployedChanges);
    }
    Ok(LeadTime {
        mean: mean(&samples),
        median: median(&samples),
        undeployed: changes.len() - samples.len(),
        samples,
    })
}

/// Deploys with `start <= at <= end`, per week.
pub fn deployment_frequency(deploys: &[DeployEvent], window: Window) -> Result<f64, MetricsError> {
    if window.end <= window.start {
        return Err(MetricsError::ZeroWindow);
    }
    let n = deploys
        .iter()
        .filter(|d| d.at >= window.start && d.at <= window.end)
        .count();
    Ok(n as f64 / window.weeks())
}

pub fn change_failure_rate(deploys: &[DeployEvent]) -> Result<f64, MetricsError> {
    if deploys.is_empty() {
        return Err(MetricsError::Empty("deploys"));
    }
    let failures = deploys.iter().filter(|d| d.outcome == DeployOutcome::Failure).count();
    Ok(failures as f64 / deploys.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mttr {
    pub hours: f64,
    pub unresolved: usize,
}

pub fn mttr(incidents: &[IncidentEvent]) -> Result<Mttr, MetricsError> {
    let durations: Vec<f64> = incidents
        .iter()
        .filter_map(|i| i.resolved_at.map(|r| hours(i.opened_at, r)))
        .collect();
    if durations.is_empty() {
        return Err(MetricsError::Empty("resolved incidents"));
    }
    Ok(Mttr {
        hours: mean(&durations),
        unresolved: incidents.len() - durations.len(),
    })
}

pub fn detection_rate(found: u64, injected: u64) -> Result<f64, MetricsError> {
    if injected == 0 {
        return Err(MetricsError::NoneInjected);
    }
    if found > injected {
        return Err(MetricsError::FoundExceedsInjected { found, injected });
    }
    Ok(found as f64 / injected as f64)
}

/// `(treated − baseline) / baseline`, as a fraction.
pub fn percent_change(baseline: f64, treated: f64) -> Result<f64, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok((treated - baseline) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMedian {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityInputs {
    pub coverage: f64,
    pub detection_rate: f64,
    pub override_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub lead_time_hours: MeanMedian,
    pub deploys_per_week: f64,
    pub change_failure_rate: f64,
    pub mttr_hours: f64,
    pub coverage: f64,
    pub detection_rate: f64,
    pub override_rate: f64,
    pub window: Window,
}

/// Empty deploy or incident streams contribute 0 rather than an error so a
/// quiet window still has a snapshot.
pub fn snapshot(
    changes: &[ChangeRecord],
    deploys: &[DeployEvent],
    incidents: &[IncidentEvent],
    quality: QualityInputs,
    window: Window,
) -> Result<MetricsSnapshot, MetricsError> {
    let lt = lead_time(changes)?;
    Ok(MetricsSnapshot {
        lead_time_hours: MeanMedian {
            mean: lt.mean,
            median: lt.median,
        },
        deploys_per_week: deployment_frequency(deploys, window)?,
        change_failure_rate: change_failure_rate(deploys).unwrap_or(0.0),
        mttr_hours: mttr(incidents).map(|m| m.hours).unwrap_or(0.0),
        coverage: quality.coverage,
        detection_rate: quality.detection_rate,
        override_rate: quality.override_rate,
        window,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbMethod {
    ExactPermutation,
    SampledPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbTestReport {
    /// `mean(b) − mean(a)`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: AbMethod,
    pub n_resamples: u64,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc > EXACT_LIMIT * 1000 {
            return u64::MAX;
        }
    }
    acc
}

fn at_least_as_extreme(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() - 1e-9 * observed.abs().max(1.0)
}

/// Two-sided permutation test on the difference of means.
pub fn ab_test(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<AbTestReport, MetricsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::UndersizedSample(s.len()));
        }
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, nb) = (a.len(), b.len());
    let total: f64 = pooled.iter().sum();
    let stat = |sum_a: f64| (total - sum_a) / nb as f64 - sum_a / na as f64;
    let observed = mean(b) - mean(a);

    let assignments = binomial(pooled.len() as u64, na as u64);
    if assignments <= EXACT_LIMIT {
        let n = pooled.len();
        let mut idx: Vec<usize> = (0..na).collect();
        let mut hits = 0u64;
        let mut seen = 0u64;
        loop {
            seen += 1;
            let sum_a: f64 = idx.iter().map(|&i| pooled[i]).sum();
            if at_least_as_extreme(stat(sum_a), observed) {
                hits += 1;
            }
            // next k-combination in lexicographic order
            let Some(pos) = (0..na).rev().find(|&i| idx[i] != i + n - na) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..na {
                idx[j] = idx[j - 1] + 1;
            }
        }
        return Ok(AbTestReport {
            statistic: observed,
            p_value: hits as f64 / seen as f64,
            method: AbMethod::ExactPermutation,
            n_resamples: seen,
        });
    }

    let mut rng = rng::seeded(seed);
    let mut shuffled = pooled.clone();
    let mut hits = 1u64; // the observed assignment
    for _ in 0..n_resamples {
        shuffled.shuffle(&mut rng);
        let sum_a: f64 = shuffled[..na].iter().sum();
        if at_least_as_extreme(stat(sum_a), observed) {
            hits += 1;
        }
    }
    Ok(AbTestReport {
        statistic: observed,
        p_value: hits as f64 / (n_resamples as f64 + 1.0),
        method: AbMethod::SampledPermutation,
        n_resamples: n_resamples as u64,
    })
}

/// Half the L1 distance between two mass vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn histogram(xs: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &x in xs {
        let i = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        h[i] += 1.0;
    }
    let n = xs.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

pub type FeatureWindow = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_feature: BTreeMap<String, f64>,
    pub score_max: f64,
    pub threshold: f64,
    pub retrain_flag: bool,
}

/// Per-feature TV distance over equal-width bins spanning the pooled range.
pub fn drift_score(
    window_a: &FeatureWindow,
    window_b: &FeatureWindow,
    bins: usize,
    threshold: f64,
) -> Result<DriftReport, MetricsError> {
    if bins < 2 {
        return Err(MetricsError::Bins(bins));
    }
    if window_a.is_empty() || window_b.is_empty() {
        return Err(MetricsError::Empty("window"));
    }
    let mut per_feature = BTreeMap::new();
    for (name, xs) in window_a {
        let ys = window_b.get(name).ok_or_else(|| MetricsError::FeatureMismatch(name.clone()))?;
        if xs.is_empty() || ys.is_empty() {
            return Err(MetricsError::Empty("window"));
        }
        let lo = xs.iter().chain(ys).copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().chain(ys).copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let tv = tv_distance(&histogram(xs, lo, width, bins), &histogram(ys, lo, width, bins));
        per_feature.insert(name.clone(), tv.clamp(0.0, 1.0));
    }
    if let Some(extra) = window_b.keys().find(|k| !window_a.contains_key(*k)) {
        return Err(MetricsError::FeatureMismatch(extra.clone()));
    }
    let score_max = per_feature.values().copied().fold(0.0, f64::max);
    Ok(DriftReport {
        per_feature,
        score_max,
        threshold,
        retrain_flag: score_max >= threshold,
    })
}
