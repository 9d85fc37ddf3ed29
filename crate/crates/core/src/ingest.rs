//! Requirement and defect-log ingestion.
//!
//! Requirement statements are parsed with a small fixed grammar:
//!
//! * a modal verb (`shall`, `must`, `should`) splits the actor from the action;
//! * the first word after the modal (plus an optional particle such as `in` in
//!   "log in") is the action, the words up to the first condition or outcome
//!   keyword are the object;
//! * `when`/`if`/`while`/... introduces `and`-separated conditions, each of the
//!   form `subject <comparator> value`, where the comparator comes from a fixed
//!   lexicon ("at least" → `ge`, "more than" → `gt`, `>=` → `ge`, ...);
//! * `so that`/`then`/`resulting in` introduces the expected outcome.
//!
//! Statements the grammar cannot place are kept and flagged `unparsed`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("line {line}: malformed id tag")]
    MalformedId { line: usize },
    #[error("line {line}: duplicate requirement id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: expected 4 or 5 `|`-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: unknown severity `{token}`")]
    UnknownSeverity { line: usize, token: String },
    #[error("line {line}: {field} must not be empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("noise_rate {0} outside [0, 1]")]
    NoiseRate(f64),
    #[error("predicted record `{0}` has no gold counterpart")]
    UnknownPredictedId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Low,
    Medium,
    High,
}

impl Priority {
    fn modal(self) -> &'static str {
        match self {
            Priority::High => "must",
            Priority::Medium => "shall",
            Priority::Low => "should",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Present,
    Absent,
}

impl Comparator {
    pub fn is_ordering(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le | Comparator::Gt | Comparator::Ge)
    }

    pub fn takes_value(self) -> bool {
        !matches!(self, Comparator::Present | Comparator::Absent)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Present => "is present",
            Comparator::Absent => "is absent",
        }
    }

    /// Compare `lhs` (observed) against `rhs` (threshold). `None` lhs means the
    /// subject is missing.
    pub fn holds(self, lhs: Option<&Scalar>, rhs: Option<&Scalar>) -> bool {
        match self {
            Comparator::Present => lhs.is_some(),
            Comparator::Absent => lhs.is_none(),
            _ => {
                let (Some(l), Some(r)) = (lhs, rhs) else {
                    return false;
                };
                match (l.as_f64(), r.as_f64()) {
                    (Some(a), Some(b)) => match self {
                        Comparator::Eq => a == b,
                        Comparator::Ne => a != b,
                        Comparator::Lt => a < b,
                        Comparator::Le => a <= b,
                        Comparator::Gt => a > b,
                        Comparator::Ge => a >= b,
                        _ => unreachable!(),
                    },
                    _ => match self {
                        Comparator::Eq => l == r,
                        Comparator::Ne => l != r,
                        _ => false,
                    },
                }
            }
        }
    }
}

/// A condition value: number, boolean or free text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Number(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Number(n) => write!(f, "{n}"),
            Scalar::Text(s) => write!(f, "\"{s}\""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub subject: String,
    pub comparator: Comparator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Scalar>,
}

impl Condition {
    /// Returns `None` when the comparator/value pairing is ill-typed.
    pub fn new(subject: impl Into<String>, comparator: Comparator, value: Option<Scalar>) -> Option<Self> {
        let well_typed = match (comparator.is_ordering(), comparator.takes_value(), &value) {
            (true, _, Some(Scalar::Number(_))) => true,
            (true, _, _) => false,
            (false, true, Some(_)) => true,
            (false, false, None) => true,
            _ => false,
        };
        well_typed.then(|| Condition {
            subject: subject.into(),
            comparator,
            value,
        })
    }

    pub fn numeric_value(&self) -> Option<f64> {
        self.value.as_ref().and_then(Scalar::as_f64)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Some(v) => write!(f, "{} {} {}", self.subject, self.comparator.symbol(), v),
            None => write!(f, "{} {}", self.subject, self.comparator.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementRecord {
    pub id: String,
    pub raw_text: String,
    #[serde(default)]
    pub actor: Option<String>,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub object: Option<String>,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub expected_outcome: Option<String>,
    #[serde(default = "default_priority")]
    pub priority: Priority,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparsed: bool,
}

fn default_priority() -> Priority {
    Priority::Medium
}

impl RequirementRecord {
    fn unparsed(id: String, raw_text: String) -> Self {
        RequirementRecord {
            id,
            raw_text,
            actor: None,
            action: None,
            object: None,
            conditions: Vec::new(),
            expected_outcome: None,
            priority: Priority::Medium,
            lineage: None,
            unparsed: true,
        }
    }

    /// Canonical statement text; parsing it yields a record with the same
    /// entities.
    pub fn to_statement(&self) -> String {
        if self.unparsed {
            return format!("[{}] {}", self.id, self.raw_text);
        }
        let mut out = format!("[{}]", self.id);
        if let Some(actor) = &self.actor {
            out.push_str(" The ");
            out.push_str(actor);
        }
        out.push(' ');
        out.push_str(self.priority.modal());
        if let Some(action) = &self.action {
            out.push(' ');
            out.push_str(action);
        }
        if let Some(object) = &self.object {
            out.push(' ');
            out.push_str(object);
        }
        if !self.conditions.is_empty() {
            let rendered: Vec<String> = self.conditions.iter().map(Condition::to_string).collect();
            out.push_str(" when ");
            out.push_str(&rendered.join(" and "));
        }
        if let Some(outcome) = &self.expected_outcome {
            out.push_str(" so that ");
            out.push_str(outcome);
        }
        out.push('.');
        out
    }

    /// Entity-level equality, ignoring the raw text.
    pub fn same_entities(&self, other: &Self) -> bool {
        self.id == other.id
            && self.actor == other.actor
            && self.action == other.action
            && self.object == other.object
            && self.conditions == other.conditions
            && self.expected_outcome == other.expected_outcome
            && self.priority == other.priority
            && self.lineage == other.lineage
            && self.unparsed == other.unparsed
    }
}

const DETERMINERS: &[&str] = &["the", "a", "an", "each", "every", "any", "all"];
const PARTICLES: &[&str] = &["in", "out", "up", "down", "on", "off"];
const CONDITION_KEYWORDS: &[&str] = &["when", "if", "while", "where", "once", "provided", "whenever"];
const OUTCOME_KEYWORDS: &[&[&str]] = &[&["so", "that"], &["then"], &["resulting", "in"], &["in", "order", "that"]];

/// Comparator lexicon, longest phrases first so `is at least` wins over `is`.
fn comparator_lexicon() -> &'static [(&'static [&'static str], Comparator)] {
    use Comparator::*;
    &[
        (&["is", "greater", "than", "or", "equal", "to"], Ge),
        (&["is", "less", "than", "or", "equal", "to"], Le),
        (&["greater", "than", "or", "equal", "to"], Ge),
        (&["less", "than", "or", "equal", "to"], Le),
        (&["is", "not", "equal", "to"], Ne),
        (&["is", "no", "more", "than"], Le),
        (&["is", "no", "less", "than"], Ge),
        (&["is", "not", "provided"], Absent),
        (&["is", "at", "least"], Ge),
        (&["are", "at", "least"], Ge),
        (&["are", "at", "most"], Le),
        (&["are", "more", "than"], Gt),
        (&["are", "fewer", "than"], Lt),
        (&["are", "less", "than"], Lt),
        (&["is", "at", "most"], Le),
        (&["is", "more", "than"], Gt),
        (&["is", "greater", "than"], Gt),
        (&["is", "less", "than"], Lt),
        (&["is", "fewer", "than"], Lt),
        (&["is", "equal", "to"], Eq),
        (&["not", "equal", "to"], Ne),
        (&["no", "more", "than"], Le),
        (&["no", "less", "than"], Ge),
        (&["does", "not", "exceed"], Le),
        (&["at", "least"], Ge),
        (&["at", "most"], Le),
        (&["more", "than"], Gt),
        (&["greater", "than"], Gt),
        (&["less", "than"], Lt),
        (&["fewer", "than"], Lt),
        (&["equal", "to"], Eq),
        (&["is", "above"], Gt),
        (&["is", "below"], Lt),
        (&["is", "present"], Present),
        (&["is", "provided"], Present),
        (&["is", "set"], Present),
        (&["is", "absent"], Absent),
        (&["is", "missing"], Absent),
        (&["is", "not"], Ne),
        (&["exceeds"], Gt),
        (&["equals"], Eq),
        (&["exists"], Present),
        (&[">="], Ge),
        (&["<="], Le),
        (&["=="], Eq),
        (&["!="], Ne),
        (&[">"], Gt),
        (&["<"], Lt),
        (&["="], Eq),
        (&["is"], Eq),
    ]
}

/// Parse a requirements document, one statement per non-empty line.
pub fn parse_requirements(doc: &str) -> Result<Vec<RequirementRecord>, IngestError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw_line) in doc.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, body) = split_id_tag(line, line_no)?;
        let id = id.unwrap_or_else(|| format!("L{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId { line: line_no, id });
        }
        out.push(parse_statement(id, body));
    }
    Ok(out)
}

fn split_id_tag(line: &str, line_no: usize) -> Result<(Option<String>, &str), IngestError> {
    let Some(rest) = line.strip_prefix('[') else {
        return Ok((None, line));
    };
    let close = rest.find(']').ok_or(IngestError::MalformedId { line: line_no })?;
    let id = &rest[..close];
    let valid = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~'));
    if !valid {
        return Err(IngestError::MalformedId { line: line_no });
    }
    Ok((Some(id.to_string()), rest[close + 1..].trim()))
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let mut cur = String::new();
    let mut in_quote = false;
    while let Some(c) = chars.next() {
        if c == '"' {
            cur.push(c);
            in_quote = !in_quote;
            continue;
        }
        if in_quote {
            cur.push(c);
            continue;
        }
        if c.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if c == ',' || c == ';' {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if matches!(c, '<' | '>' | '=' | '!') {
            // Symbolic comparators are separate tokens even without spaces.
            let next_is_eq = chars.peek() == Some(&'=');
            if c == '!' && !next_is_eq {
                cur.push(c);
                continue;
            }
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            let mut sym = c.to_string();
            if next_is_eq {
                sym.push(chars.next().unwrap());
            }
            tokens.push(sym);
            continue;
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn lower(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn strip_determiners(words: &[String]) -> &[String] {
    let mut start = 0;
    while start < words.len() && DETERMINERS.contains(&words[start].as_str()) {
        start += 1;
    }
    &words[start..]
}

fn join_phrase(words: &[String]) -> Option<String> {
    let words = strip_determiners(words);
    (!words.is_empty()).then(|| words.join(" "))
}

fn starts_with_at(words: &[String], at: usize, phrase: &[&str]) -> bool {
    phrase.len() + at <= words.len() && phrase.iter().enumerate().all(|(i, p)| words[at + i] == *p)
}

fn parse_statement(id: String, body: &str) -> RequirementRecord {
    let raw_text = body.to_string();
    let sentence = body.trim_end_matches(['.', '!', '?']).trim();
    let tokens = tokenize(sentence);
    let words = lower(&tokens);

    let Some(modal_at) = words.iter().position(|w| matches!(w.as_str(), "shall" | "must" | "should")) else {
        return RequirementRecord::unparsed(id, raw_text);
    };
    let priority = match words[modal_at].as_str() {
        "must" => Priority::High,
        "should" => Priority::Low,
        _ => Priority::Medium,
    };
    let actor = join_phrase(&words[..modal_at]);

    let mut i = modal_at + 1;
    for filler in [&["be", "able", "to"][..], &["be", "allowed", "to"], &["always"], &["automatically"]] {
        if starts_with_at(&words, i, filler) {
            i += filler.len();
        }
    }
    if i >= words.len() {
        return RequirementRecord::unparsed(id, raw_text);
    }
    let mut action = words[i].clone();
    i += 1;
    if i < words.len() && PARTICLES.contains(&words[i].as_str()) && !is_clause_start(&words, i) {
        action.push(' ');
        action.push_str(&words[i]);
        i += 1;
    }

    // Locate the first condition keyword and the first outcome keyword after
    // the action.
    let mut cond_at = None;
    let mut outcome_at = None;
    let mut j = i;
    while j < words.len() {
        if cond_at.is_none() && outcome_at.is_none() && CONDITION_KEYWORDS.contains(&words[j].as_str()) {
            cond_at = Some(j);
        } else if let Some(kw) = OUTCOME_KEYWORDS.iter().find(|kw| starts_with_at(&words, j, kw)) {
            outcome_at = Some((j, kw.len()));
            break;
        }
        j += 1;
    }
    let object_end = cond_at.or(outcome_at.map(|(at, _)| at)).unwrap_or(words.len());
    let object = join_phrase(&words[i..object_end]);

    let mut conditions = Vec::new();
    if let Some(c) = cond_at {
        let cond_end = outcome_at.map(|(at, _)| at).unwrap_or(tokens.len());
        let mut start = c + 1;
        if starts_with_at(&words, start, &["and", "only", "if"]) {
            start += 3;
        }
        for clause in split_on_and(&tokens[start..cond_end]) {
            if let Some(cond) = parse_condition(clause) {
                conditions.push(cond);
            }
        }
    }
    let expected_outcome = outcome_at
        .map(|(at, len)| words[at + len..].join(" "))
        .filter(|s| !s.is_empty());

    RequirementRecord {
        id,
        raw_text,
        actor,
        action: Some(action),
        object,
        conditions,
        expected_outcome,
        priority,
        lineage: None,
        unparsed: false,
    }
}

fn is_clause_start(words: &[String], at: usize) -> bool {
    CONDITION_KEYWORDS.contains(&words[at].as_str()) || OUTCOME_KEYWORDS.iter().any(|kw| starts_with_at(words, at, kw))
}

fn split_on_and(tokens: &[String]) -> Vec<&[String]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.eq_ignore_ascii_case("and") {
            out.push(&tokens[start..i]);
            start = i + 1;
        }
    }
    out.push(&tokens[start..]);
    out.into_iter().filter(|c| !c.is_empty()).collect()
}

fn parse_condition(clause: &[String]) -> Option<Condition> {
    let words = lower(clause);
    for at in 1..words.len() {
        let Some((phrase, comparator)) = comparator_lexicon()
            .iter()
            .find(|(phrase, _)| starts_with_at(&words, at, phrase))
        else {
            continue;
        };
        let subject = join_phrase(&words[..at])?;
        let rest = &clause[at + phrase.len()..];
        let value = if comparator.takes_value() {
            Some(parse_value(rest)?)
        } else {
            None
        };
        return Condition::new(subject, *comparator, value);
    }
    None
}

fn parse_value(tokens: &[String]) -> Option<Scalar> {
    let first = tokens.first()?;
    if let Some(quoted) = first.strip_prefix('"') {
        return Some(Scalar::Text(quoted.trim_end_matches('"').to_string()));
    }
    let cleaned: String = first.chars().filter(|c| *c != '$' && *c != ',').collect();
    if let Ok(n) = cleaned.trim_end_matches('%').parse::<f64>() {
        if n.is_finite() {
            return Some(Scalar::Number(n));
        }
    }
    match first.to_lowercase().as_str() {
        "true" => return Some(Scalar::Bool(true)),
        "false" => return Some(Scalar::Bool(false)),
        _ => {}
    }
    let words = lower(tokens);
    join_phrase(&words).map(Scalar::Text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub id: String,
    pub component: String,
    pub severity: Severity,
    pub description: String,
    #[serde(default)]
    pub requirement_ref: Option<String>,
}

/// Parse `id|component|severity|description[|req]` lines.
pub fn parse_defect_log(text: &str) -> Result<Vec<DefectRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw_line.split('|').map(str::trim).collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(IngestError::FieldCount { line, found: fields.len() });
        }
        if fields[0].is_empty() {
            return Err(IngestError::EmptyField { line, field: "id" });
        }
        if fields[1].is_empty() {
            return Err(IngestError::EmptyField { line, field: "component" });
        }
        let severity = match fields[2].to_lowercase().as_str() {
            "minor" => Severity::Minor,
            "major" => Severity::Major,
            "critical" => Severity::Critical,
            _ => {
                return Err(IngestError::UnknownSeverity {
                    line,
                    token: fields[2].to_string(),
                })
            }
        };
        out.push(DefectRecord {
            id: fields[0].to_string(),
            component: fields[1].to_string(),
            severity,
            description: fields[3].to_string(),
            requirement_ref: fields.get(4).filter(|s| !s.is_empty()).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub noise_rate: f64,
    pub permutation_enabled: bool,
    pub variants_per_record: usize,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(IngestError::NoiseRate(self.noise_rate));
        }
        Ok(())
    }

    fn perturbs(&self, rec: &RequirementRecord) -> bool {
        if rec.unparsed {
            return false;
        }
        let permutable = self.permutation_enabled && rec.conditions.len() >= 2;
        let noisy = self.noise_rate > 0.0 && rec.conditions.iter().any(|c| c.numeric_value().is_some());
        permutable || noisy
    }
}

/// Append seeded noise/permutation variants after the originals.
///
/// Records with nothing to perturb (unparsed, or no numeric conditions and
/// fewer than two conditions to reorder) produce no variants.
pub fn augment(records: &[RequirementRecord], cfg: &AugmentationConfig) -> Result<Vec<RequirementRecord>, IngestError> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let mut out = records.to_vec();
    for rec in records {
        if !cfg.perturbs(rec) {
            continue;
        }
        for n in 1..=cfg.variants_per_record {
            let mut variant = rec.clone();
            variant.id = format!("{}~{n}", rec.id);
            variant.lineage = Some(rec.id.clone());
            if cfg.permutation_enabled && variant.conditions.len() >= 2 {
                let mut order: Vec<usize> = (0..variant.conditions.len()).collect();
                while order.iter().enumerate().all(|(i, &o)| i == o) {
                    order.shuffle(&mut rng);
                }
                variant.conditions = order.iter().map(|&o| rec.conditions[o].clone()).collect();
            }
            if cfg.noise_rate > 0.0 {
                for cond in &mut variant.conditions {
                    if let Some(Scalar::Number(v)) = cond.value {
                        let delta = rng.gen_range(-1.0..=1.0) * cfg.noise_rate * v.abs();
                        cond.value = Some(Scalar::Number(round_like(v + delta, v)));
                    }
                }
            }
            variant.raw_text = variant.to_statement();
            out.push(variant);
        }
    }
    Ok(out)
}

/// Round `x` to the number of decimals `source` is written with.
fn round_like(x: f64, source: f64) -> f64 {
    let rendered = format!("{source}");
    let decimals = rendered.split_once('.').map(|(_, frac)| frac.len()).unwrap_or(0) as i32;
    let scale = 10f64.powi(decimals);
    let r = (x * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Actor,
    Action,
    Object,
    Condition,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [EntityKind::Actor, EntityKind::Action, EntityKind::Object, EntityKind::Condition];
    /// Entities that drive test generation.
    pub const CRITICAL: [EntityKind; 3] = [EntityKind::Action, EntityKind::Object, EntityKind::Condition];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SlotCounts {
    fn add(&mut self, o: SlotCounts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    pub fn precision(&self) -> f64 {
        match (self.predicted, self.gold) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (p, _) => self.matched as f64 / p as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.gold {
            0 => 1.0,
            g => self.matched as f64 / g as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub precision: f64,
    pub recall: f64,
    /// entity kind → (precision, recall)
    pub per_entity: BTreeMap<EntityKind, (f64, f64)>,
    pub counts: BTreeMap<EntityKind, SlotCounts>,
}

impl ExtractionScore {
    pub fn critical_recall(&self) -> f64 {
        let mut total = SlotCounts::default();
        for kind in EntityKind::CRITICAL {
            total.add(self.counts[&kind]);
        }
        total.recall()
    }
}

fn slot(pred: &Option<String>, gold: &Option<String>) -> SlotCounts {
    SlotCounts {
        matched: usize::from(pred.is_some() && pred == gold),
        predicted: usize::from(pred.is_some()),
        gold: usize::from(gold.is_some()),
    }
}

fn condition_slots(pred: &[Condition], gold: &[Condition]) -> SlotCounts {
    let mut unused: Vec<&Condition> = gold.iter().collect();
    let mut matched = 0;
    for p in pred {
        if let Some(pos) = unused.iter().position(|g| *g == p) {
            unused.swap_remove(pos);
            matched += 1;
        }
    }
    SlotCounts {
        matched,
        predicted: pred.len(),
        gold: gold.len(),
    }
}

/// Slot-level precision/recall of `predicted` against `gold`, matched by id.
/// Gold records absent from `predicted` count as empty predictions.
pub fn evaluate_extraction(predicted: &[RequirementRecord], gold: &[RequirementRecord]) -> Result<ExtractionScore, IngestError> {
    let pred_by_id: HashMap<&str, &RequirementRecord> = predicted.iter().map(|r| (r.id.as_str(), r)).collect();
    let gold_ids: HashSet<&str> = gold.iter().map(|r| r.id.as_str()).collect();
    if let Some(stray) = predicted.iter().find(|r| !gold_ids.contains(r.id.as_str())) {
        return Err(IngestError::UnknownPredictedId(stray.id.clone()));
    }

    let mut counts: BTreeMap<EntityKind, SlotCounts> = EntityKind::ALL.iter().map(|k| (*k, SlotCounts::default())).collect();
    let none = None;
    for g in gold {
        let p = pred_by_id.get(g.id.as_str());
        let pick = |f: fn(&RequirementRecord) -> &Option<String>| p.map(|p| f(p)).unwrap_or(&none);
        counts.get_mut(&EntityKind::Actor).unwrap().add(slot(pick(|r| &r.actor), &g.actor));
        counts.get_mut(&EntityKind::Action).unwrap().add(slot(pick(|r| &r.action), &g.action));
        counts.get_mut(&EntityKind::Object).unwrap().add(slot(pick(|r| &r.object), &g.object));
        let pred_conds = p.map(|p| p.conditions.as_slice()).unwrap_or(&[]);
        counts
            .get_mut(&EntityKind::Condition)
            .unwrap()
            .add(condition_slots(pred_conds, &g.conditions));
    }

    let mut total = SlotCounts::default();
    for c in counts.values() {
        total.add(*c);
    }
    Ok(ExtractionScore {
        precision: total.precision(),
        recall: total.recall(),
        per_entity: counts.iter().map(|(k, c)| (*k, (c.precision(), c.recall()))).collect(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(text: &str) -> RequirementRecord {
        parse_requirements(text).unwrap().remove(0)
    }

    #[test]
    fn parses_the_canonical_transfer_requirement() {
        let r = one("[R1] The user shall transfer funds when balance >= 100.");
        assert_eq!(r.id, "R1");
        assert_eq!(r.actor.as_deref(), Some("user"));
        assert_eq!(r.action.as_deref(), Some("transfer"));
        assert_eq!(r.object.as_deref(), Some("funds"));
        assert_eq!(
            r.conditions,
            vec![Condition::new("balance", Comparator::Ge, Some(Scalar::Number(100.0))).unwrap()]
        );
        assert_eq!(r.priority, Priority::Medium);
        assert!(!r.unparsed);
    }

    #[test]
    fn empty_document_yields_nothing() {
        assert!(parse_requirements("").unwrap().is_empty());
        assert!(parse_requirements("\n   \n").unwrap().is_empty());
    }

    #[test]
    fn statements_without_a_modal_are_kept_unparsed() {
        let r = one("Lorem ipsum dolor.");
        assert!(r.unparsed);
        assert_eq!((r.actor, r.action, r.object), (None, None, None));
        assert!(r.conditions.is_empty());
        assert_eq!(r.id, "L1");
    }

    #[test]
    fn lexicon_phrases_map_to_comparators() {
        let r = one("The customer must withdraw cash if amount is at most 500 and balance is more than 0 so that the atm dispenses notes.");
        assert_eq!(r.priority, Priority::High);
        assert_eq!(r.conditions.len(), 2);
        assert_eq!(r.conditions[0].comparator, Comparator::Le);
        assert_eq!(r.conditions[1].comparator, Comparator::Gt);
        assert_eq!(r.expected_outcome.as_deref(), Some("the atm dispenses notes"));
    }

    #[test]
    fn phrasal_verbs_keep_their_particle() {
        let r = one("The user shall log in when attempts < 3.");
        assert_eq!(r.action.as_deref(), Some("log in"));
        assert_eq!(r.object, None);
    }

    #[test]
    fn malformed_and_duplicate_ids_are_errors() {
        assert_eq!(
            parse_requirements("ok line\n[R1 The user shall pay.").unwrap_err(),
            IngestError::MalformedId { line: 2 }
        );
        assert_eq!(
            parse_requirements("[] The user shall pay.").unwrap_err(),
            IngestError::MalformedId { line: 1 }
        );
        assert!(matches!(
            parse_requirements("[R1] The user shall pay.\n[R1] The user shall save.").unwrap_err(),
            IngestError::DuplicateId { line: 2, .. }
        ));
    }

    #[test]
    fn numeric_comparator_with_text_value_is_dropped() {
        let r = one("The user shall pay when tier is at least gold.");
        assert!(r.conditions.is_empty());
    }

    #[test]
    fn quoted_text_values() {
        let r = one("The clerk shall deposit a cheque when channel == \"branch office\".");
        assert_eq!(r.conditions[0].value, Some(Scalar::Text("branch office".into())));
    }

    #[test]
    fn defect_log_lines() {
        let d = parse_defect_log("D7|payments|critical|overflow on amount|R1").unwrap();
        assert_eq!(d[0].id, "D7");
        assert_eq!(d[0].severity, Severity::Critical);
        assert_eq!(d[0].requirement_ref.as_deref(), Some("R1"));
        assert!(parse_defect_log("").unwrap().is_empty());
        assert_eq!(
            parse_defect_log("D8|payments|catastrophic|x").unwrap_err(),
            IngestError::UnknownSeverity { line: 1, token: "catastrophic".into() }
        );
        assert_eq!(
            parse_defect_log("D1|a|minor|x\nD9|payments|major").unwrap_err(),
            IngestError::FieldCount { line: 2, found: 3 }
        );
        assert!(matches!(parse_defect_log("D9||major|x"), Err(IngestError::EmptyField { .. })));
    }

    #[test]
    fn identity_augmentation() {
        let recs = parse_requirements("[R1] The user shall transfer funds when balance >= 100 and amount < 5.").unwrap();
        let cfg = AugmentationConfig {
            noise_rate: 0.0,
            permutation_enabled: false,
            variants_per_record: 0,
            seed: 3,
        };
        assert_eq!(augment(&recs, &cfg).unwrap(), recs);
        let cfg = AugmentationConfig { variants_per_record: 4, ..cfg };
        // Nothing to perturb: still the identity.
        assert_eq!(augment(&recs, &cfg).unwrap(), recs);
    }

    #[test]
    fn permutation_swaps_two_conditions() {
        let recs = parse_requirements("[R1] The user shall transfer funds when balance >= 100 and amount < 5.").unwrap();
        let cfg = AugmentationConfig {
            noise_rate: 0.0,
            permutation_enabled: true,
            variants_per_record: 1,
            seed: 11,
        };
        let out = augment(&recs, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        let v = &out[1];
        assert_eq!(v.lineage.as_deref(), Some("R1"));
        assert_eq!(v.id, "R1~1");
        assert_eq!(v.conditions, vec![recs[0].conditions[1].clone(), recs[0].conditions[0].clone()]);
    }

    #[test]
    fn noise_stays_within_rate_and_source_precision() {
        let recs = parse_requirements("[R1] The user shall pay the bill when amount >= 2.5 and fee <= 40.").unwrap();
        let cfg = AugmentationConfig {
            noise_rate: 0.2,
            permutation_enabled: false,
            variants_per_record: 20,
            seed: 5,
        };
        let out = augment(&recs, &cfg).unwrap();
        assert_eq!(out.len(), 21);
        for v in &out[1..] {
            let a = v.conditions[0].numeric_value().unwrap();
            let f = v.conditions[1].numeric_value().unwrap();
            assert!((a - 2.5).abs() <= 0.5 + 0.05 + 1e-12, "{a}");
            assert_eq!((a * 10.0).round(), a * 10.0);
            assert!((f - 40.0).abs() <= 8.5);
            assert_eq!(f.fract(), 0.0);
        }
        assert_eq!(augment(&recs, &cfg).unwrap(), out);
    }

    #[test]
    fn rejects_out_of_range_noise() {
        let cfg = AugmentationConfig {
            noise_rate: 1.5,
            permutation_enabled: false,
            variants_per_record: 1,
            seed: 0,
        };
        assert_eq!(augment(&[], &cfg).unwrap_err(), IngestError::NoiseRate(1.5));
    }

    #[test]
    fn extraction_scores() {
        let gold = parse_requirements("[R1] The user shall transfer funds when balance >= 100.").unwrap();
        let s = evaluate_extraction(&gold, &gold).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 1.0));

        // 4 gold slots; 3 right and one wrong object.
        let mut pred = gold.clone();
        pred[0].object = Some("money".into());
        let s = evaluate_extraction(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall), (0.75, 0.75));

        let mut empty = gold.clone();
        empty[0].actor = None;
        empty[0].action = None;
        empty[0].object = None;
        empty[0].conditions.clear();
        let s = evaluate_extraction(&empty, &gold).unwrap();
        assert_eq!(s.recall, 0.0);

        let mut stray = gold.clone();
        stray[0].id = "R9".into();
        assert_eq!(
            evaluate_extraction(&stray, &gold).unwrap_err(),
            IngestError::UnknownPredictedId("R9".into())
        );
    }
}
