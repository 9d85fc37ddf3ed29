//! Test-case synthesis against a declarative system-under-test model.
//!
//! Generation is template-based. A requirement's action is matched to an
//! endpoint by exact keyword first, then through a synonym table. Each match
//! yields one nominal case, plus a `{v−1, v, v+1}` boundary triple for every
//! numeric condition on an endpoint parameter. Continuous domains use
//! `{v·(1−ε), v, v·(1+ε)}` instead.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::{Comparator, Condition, RequirementRecord, Scalar};
use crate::rng;

/// Relative probe width for continuous domains.
pub const CONTINUOUS_EPSILON: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("invalid SUT document: {0}")]
    Schema(String),
    #[error("duplicate coverage unit `{0}`")]
    DuplicateUnit(String),
    #[error("endpoint `{endpoint}` references unknown unit `{unit}`")]
    UnknownUnit { endpoint: String, unit: String },
    #[error("SUT model declares no coverage units")]
    NoUnits,
    #[error("duplicate endpoint `{0}`")]
    DuplicateEndpoint(String),
    #[error("parameter `{param}` of `{endpoint}` has min > max")]
    InvertedRange { endpoint: String, param: String },
    #[error("test case `{case}` references unknown endpoint `{endpoint}`")]
    UnknownEndpoint { case: String, endpoint: String },
    #[error("malformed suite version `{0}`")]
    Version(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Domain {
    Range {
        min: f64,
        max: f64,
        /// Defaults to "both bounds are whole numbers".
        #[serde(default, skip_serializing_if = "Option::is_none")]
        integer: Option<bool>,
    },
    Values {
        values: Vec<Scalar>,
    },
}

impl Domain {
    pub fn is_integer(&self) -> bool {
        match self {
            Domain::Range { min, max, integer } => integer.unwrap_or(min.fract() == 0.0 && max.fract() == 0.0),
            Domain::Values { .. } => false,
        }
    }

    pub fn contains(&self, v: &Scalar) -> bool {
        match (self, v) {
            (Domain::Range { min, max, .. }, Scalar::Number(n)) => (*min..=*max).contains(n),
            (Domain::Values { values }, v) => values.contains(v),
            _ => false,
        }
    }

    fn default_value(&self) -> Scalar {
        match self {
            Domain::Range { min, max, .. } => {
                let mid = (min + max) / 2.0;
                Scalar::Number(if self.is_integer() { mid.floor() } else { mid })
            }
            Domain::Values { values } => values.first().cloned().unwrap_or(Scalar::Text(String::new())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: String,
    pub action_keyword: String,
    #[serde(default)]
    pub parameters: Vec<Parameter>,
    pub units: BTreeSet<String>,
    /// A `present` precondition naming another endpoint's keyword makes
    /// every case start with a setup call to that endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precondition: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutModel {
    pub name: String,
    pub endpoints: Vec<Endpoint>,
    pub coverage_units: Vec<String>,
    #[serde(default = "first_version")]
    pub version: u64,
}

fn first_version() -> u64 {
    1
}

impl SutModel {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.coverage_units.is_empty() {
            return Err(GenerationError::NoUnits);
        }
        let mut units = HashSet::new();
        for u in &self.coverage_units {
            if !units.insert(u.as_str()) {
                return Err(GenerationError::DuplicateUnit(u.clone()));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.endpoints {
            if !ids.insert(e.id.as_str()) {
                return Err(GenerationError::DuplicateEndpoint(e.id.clone()));
            }
            if let Some(unit) = e.units.iter().find(|u| !units.contains(u.as_str())) {
                return Err(GenerationError::UnknownUnit {
                    endpoint: e.id.clone(),
                    unit: unit.clone(),
                });
            }
            for p in &e.parameters {
                if let Domain::Range { min, max, .. } = p.domain {
                    if min > max {
                        return Err(GenerationError::InvertedRange {
                            endpoint: e.id.clone(),
                            param: p.name.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, id: &str) -> Option<&Endpoint> {
        self.endpoints.iter().find(|e| e.id == id)
    }
}

pub fn load_sut_model(doc: &str) -> Result<SutModel, GenerationError> {
    let model: SutModel = serde_json::from_str(doc).map_err(|e| GenerationError::Schema(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

/// `major.minor.patch`, serialized as a string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SuiteVersion {
    pub major: u32,
    pub minor: u32,
    pub patch: u32,
}

impl SuiteVersion {
    pub const INITIAL: SuiteVersion = SuiteVersion { major: 1, minor: 0, patch: 0 };
}

impl fmt::Display for SuiteVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl FromStr for SuiteVersion {
    type Err = GenerationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        let parse = |p: &str| p.parse::<u32>().map_err(|_| GenerationError::Version(s.to_string()));
        match parts.as_slice() {
            [a, b, c] => Ok(SuiteVersion {
                major: parse(a)?,
                minor: parse(b)?,
                patch: parse(c)?,
            }),
            _ => Err(GenerationError::Version(s.to_string())),
        }
    }
}

impl Serialize for SuiteVersion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SuiteVersion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteChange {
    Regenerated,
    Optimized,
    Patched,
}

pub fn bump_suite_version(prev: SuiteVersion, change: SuiteChange) -> SuiteVersion {
    match change {
        SuiteChange::Regenerated => SuiteVersion {
            major: prev.major + 1,
            minor: 0,
            patch: 0,
        },
        SuiteChange::Optimized => SuiteVersion {
            minor: prev.minor + 1,
            patch: 0,
            ..prev
        },
        SuiteChange::Patched => SuiteVersion {
            patch: prev.patch + 1,
            ..prev
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStep {
    pub endpoint_id: String,
    pub arguments: BTreeMap<String, Scalar>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub out_of_domain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub status: ExpectedStatus,
    pub assertions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub requirement_refs: Vec<String>,
    pub steps: Vec<TestStep>,
    pub expected: ExpectedOutcome,
    pub covered_units: BTreeSet<String>,
    pub cost: u32,
    pub suite_version: SuiteVersion,
}

impl TestCase {
    /// Assertions per unit of work: `assertions / (1 + steps)`, clamped to
    /// `[0, 1]`.
    pub fn oracle_strength(&self) -> f64 {
        (self.expected.assertions.len() as f64 / (1.0 + self.steps.len() as f64)).clamp(0.0, 1.0)
    }
}

pub fn default_cost(steps: usize) -> u32 {
    1 + steps as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: BTreeSet<String>,
    pub total: usize,
    pub fraction: f64,
}

impl CoverageReport {
    pub fn display_fraction(&self) -> String {
        format!("{:.4}", self.fraction)
    }
}

/// Union of the units reached by the suite's steps, over all SUT units.
pub fn coverage(suite: &[TestCase], sut: &SutModel) -> Result<CoverageReport, GenerationError> {
    let mut covered = BTreeSet::new();
    for case in suite {
        for step in &case.steps {
            let ep = sut.endpoint(&step.endpoint_id).ok_or_else(|| GenerationError::UnknownEndpoint {
                case: case.id.clone(),
                endpoint: step.endpoint_id.clone(),
            })?;
            covered.extend(ep.units.iter().cloned());
        }
    }
    let total = sut.coverage_units.len();
    Ok(CoverageReport {
        fraction: covered.len() as f64 / total as f64,
        covered,
        total,
    })
}

/// Units covered by a case's steps, recomputed from the model.
pub fn units_of_steps(steps: &[TestStep], sut: &SutModel) -> BTreeSet<String> {
    steps
        .iter()
        .filter_map(|s| sut.endpoint(&s.endpoint_id))
        .flat_map(|e| e.units.iter().cloned())
        .collect()
}

const SYNONYMS: &[(&str, &[&str])] = &[
    ("transfer", &["send", "move", "pay", "remit", "wire"]),
    ("deposit", &["add", "credit", "lodge", "top up"]),
    ("withdraw", &["debit", "take", "cash out"]),
    ("login", &["log in", "sign in", "authenticate", "lock", "unlock"]),
    ("logout", &["log out", "sign out"]),
    ("refund", &["reimburse", "return"]),
    ("approve", &["accept", "sign off"]),
];

fn keyword_matches(action: &str, keyword: &str) -> bool {
    SYNONYMS
        .iter()
        .any(|(canon, alts)| *canon == keyword && alts.contains(&action))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub cases: Vec<TestCase>,
    pub skipped_unparsed: usize,
    /// Requirements whose action matched no endpoint.
    pub unmatched: Vec<String>,
}

impl Generated {
    pub fn warning_count(&self) -> usize {
        self.skipped_unparsed + self.unmatched.len()
    }
}

pub fn generate_cases(reqs: &[RequirementRecord], sut: &SutModel, seed: u64) -> Generated {
    let mut rng = rng::seeded(seed);
    let mut out = Generated::default();
    for req in reqs {
        if req.unparsed {
            out.skipped_unparsed += 1;
            continue;
        }
        let Some(action) = req.action.as_deref() else {
            out.unmatched.push(req.id.clone());
            continue;
        };
        let mut candidates: Vec<&Endpoint> = sut.endpoints.iter().filter(|e| e.action_keyword == action).collect();
        if candidates.is_empty() {
            candidates = sut
                .endpoints
                .iter()
                .filter(|e| keyword_matches(action, &e.action_keyword))
                .collect();
        }
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        let Some(endpoint) = candidates.choose(&mut rng) else {
            out.unmatched.push(req.id.clone());
            continue;
        };
        out.cases.extend(cases_for(req, endpoint, sut));
    }
    out
}

struct Bound<'a> {
    param: &'a Parameter,
    cond: &'a Condition,
}

fn subject_matches(subject: &str, param: &str) -> bool {
    subject == param || subject.rsplit(' ').next() == Some(param) || subject.replace(' ', "_") == param
}

fn bound_conditions<'a>(req: &'a RequirementRecord, ep: &'a Endpoint) -> Vec<Bound<'a>> {
    let mut out = Vec::new();
    for cond in &req.conditions {
        if let Some(param) = ep.parameters.iter().find(|p| subject_matches(&cond.subject, &p.name)) {
            out.push(Bound { param, cond });
        }
    }
    out
}

fn nudge(v: f64, integer: bool, up: bool) -> f64 {
    let sign = if up { 1.0 } else { -1.0 };
    if integer {
        v + sign
    } else if v == 0.0 {
        sign * CONTINUOUS_EPSILON
    } else {
        v * (1.0 + sign * CONTINUOUS_EPSILON * v.signum())
    }
}

fn satisfy(current: &Scalar, bound: &Bound) -> Scalar {
    let cond = bound.cond;
    if cond.comparator.holds(Some(current), cond.value.as_ref()) {
        return current.clone();
    }
    let integer = bound.param.domain.is_integer();
    match (cond.comparator, cond.numeric_value()) {
        (Comparator::Ge | Comparator::Le | Comparator::Eq, Some(v)) => Scalar::Number(v),
        (Comparator::Gt | Comparator::Ne, Some(v)) => Scalar::Number(nudge(v, integer, true)),
        (Comparator::Lt, Some(v)) => Scalar::Number(nudge(v, integer, false)),
        (Comparator::Eq, None) => cond.value.clone().unwrap_or_else(|| current.clone()),
        _ => current.clone(),
    }
}

fn expected_status(args: &BTreeMap<String, Scalar>, bounds: &[Bound]) -> crate::generation::ExpectedStatus {
    let ok = bounds
        .iter()
        .all(|b| b.cond.comparator.holds(args.get(&b.param.name), b.cond.value.as_ref()));
    if ok {
        ExpectedStatus::Accepted
    } else {
        ExpectedStatus::Rejected
    }
}

fn status_assertion(s: ExpectedStatus) -> String {
    match s {
        ExpectedStatus::Accepted => "status == accepted".to_string(),
        ExpectedStatus::Rejected => "status == rejected".to_string(),
    }
}

fn setup_steps(ep: &Endpoint, sut: &SutModel) -> Vec<TestStep> {
    let Some(pre) = &ep.precondition else {
        return Vec::new();
    };
    if pre.comparator != Comparator::Present {
        return Vec::new();
    }
    sut.endpoints
        .iter()
        .filter(|other| other.id != ep.id && other.action_keyword == pre.subject)
        .take(1)
        .map(|other| TestStep {
            endpoint_id: other.id.clone(),
            arguments: other
                .parameters
                .iter()
                .map(|p| (p.name.clone(), p.domain.default_value()))
                .collect(),
            out_of_domain: false,
        })
        .collect()
}

fn out_of_domain(ep: &Endpoint, args: &BTreeMap<String, Scalar>) -> bool {
    ep.parameters
        .iter()
        .any(|p| args.get(&p.name).is_some_and(|v| !p.domain.contains(v)))
}

fn cases_for(req: &RequirementRecord, ep: &Endpoint, sut: &SutModel) -> Vec<TestCase> {
    let bounds = bound_conditions(req, ep);
    let setup = setup_steps(ep, sut);

    let mut nominal: BTreeMap<String, Scalar> = ep
        .parameters
        .iter()
        .map(|p| (p.name.clone(), p.domain.default_value()))
        .collect();
    for b in &bounds {
        let cur = nominal[&b.param.name].clone();
        nominal.insert(b.param.name.clone(), satisfy(&cur, b));
    }

    let make = |n: usize, args: BTreeMap<String, Scalar>, out_of_domain: bool, assertions: Vec<String>, status| {
        let mut steps = setup.clone();
        steps.push(TestStep {
            endpoint_id: ep.id.clone(),
            arguments: args,
            out_of_domain,
        });
        let covered_units = units_of_steps(&steps, sut);
        let cost = default_cost(steps.len());
        TestCase {
            id: format!("TC-{}-{:02}", req.id, n),
            requirement_refs: vec![req.id.clone()],
            steps,
            expected: ExpectedOutcome { status, assertions },
            covered_units,
            cost,
            suite_version: SuiteVersion::INITIAL,
        }
    };

    let mut cases = Vec::new();
    let status = expected_status(&nominal, &bounds);
    let mut assertions = vec![status_assertion(status)];
    assertions.extend(bounds.iter().map(|b| format!("holds: {}", b.cond)));
    if let Some(outcome) = &req.expected_outcome {
        assertions.push(format!("outcome: {outcome}"));
    }
    cases.push(make(0, nominal.clone(), out_of_domain(ep, &nominal), assertions, status));

    for b in &bounds {
        let Some(v) = b.cond.numeric_value() else {
            continue;
        };
        if !matches!(b.param.domain, Domain::Range { .. }) {
            continue;
        }
        let integer = b.param.domain.is_integer() && v.fract() == 0.0;
        for probe in [nudge(v, integer, false), v, nudge(v, integer, true)] {
            let mut args = nominal.clone();
            let probe = Scalar::Number(probe);
            args.insert(b.param.name.clone(), probe.clone());
            let ood = out_of_domain(ep, &args);
            let status = expected_status(&args, &bounds);
            let assertions = vec![status_assertion(status), format!("boundary: {} = {}", b.param.name, probe)];
            cases.push(make(cases.len(), args, ood, assertions, status));
        }
    }
    cases
}
