//! Policy gates, trust escalation and the human review queue.
//!
//! [`DecisionDomain`] owns every piece of mutable decision state (policies,
//! trust, reviews, rollbacks and the audit sink) so that callers get a single
//! linearization point by holding `&mut` to it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit_log::{canonical_payload, AuditChain, AuditError, AuditKind, AuditSink};

pub const TRUST_WINDOW: usize = 50;
pub const REVIEW_WINDOW_HOURS: i64 = 24;

pub const PROMOTE_GATED_MAX_OVERRIDE: f64 = 0.05;
pub const PROMOTE_GATED_MIN_ACCURACY: f64 = 0.90;
pub const PROMOTE_FULL_MAX_OVERRIDE: f64 = 0.02;
pub const DEMOTE_OVERRIDE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy config: {0}")]
    Config(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("decision `{0}` already submitted")]
    DuplicateDecision(String),
    #[error("decision `{0}` is already in the review queue")]
    DuplicateReview(String),
    #[error("decision `{0}` does not require review")]
    NotReviewable(String),
    #[error("`{0}` not found")]
    NotFound(String),
    #[error("review `{id}` already resolved as {status:?}")]
    Conflict { id: String, status: ReviewStatus },
    #[error("review `{id}` expired at {deadline}")]
    Expired { id: String, deadline: DateTime<Utc> },
    #[error("decision `{0}` was already rolled back")]
    AlreadyRolledBack(String),
    #[error("rollback needs at least one reason")]
    EmptyReason,
    #[error("snapshot audit head does not match the audit log")]
    SnapshotMismatch,
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposedAction {
    PromoteBuild,
    BlockBuild,
    PublishSuite,
    AutoMergeTests,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSeverity {
    Routine,
    HighRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub proposed_action: ProposedAction,
    pub severity: DecisionSeverity,
    pub confidence: f64,
    pub parity_gap: f64,
    #[serde(default)]
    pub compliance_flags: BTreeSet<String>,
    pub timestamp: DateTime<Utc>,
    pub rationale: String,
}

impl DecisionRecord {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidDecision(m));
        if self.id.trim().is_empty() {
            return bad("empty id".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if !(0.0..=1.0).contains(&self.parity_gap) {
            return bad(format!("parity_gap {} outside [0, 1]", self.parity_gap));
        }
        if self.rationale.trim().is_empty() {
            return bad("empty rationale".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyField {
    Confidence,
    ParityGap,
    ComplianceFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyComparator {
    Ge,
    Lt,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSeverity {
    Warning,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationAction {
    Rollback,
    Escalate,
}

/// States what a compliant decision satisfies. A decision violates the rule
/// when the comparison does not hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    pub field: PolicyField,
    pub comparator: PolicyComparator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub severity: RuleSeverity,
    pub on_violation: ViolationAction,
}

impl PolicyRule {
    pub fn check(&self) -> Result<(), PolicyError> {
        let ok = match (self.field, self.comparator) {
            (PolicyField::ComplianceFlags, PolicyComparator::Empty) => true,
            (PolicyField::ComplianceFlags, _) | (_, PolicyComparator::Empty) => false,
            _ => self.threshold.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(PolicyError::Config(format!(
                "rule `{}`: comparator {:?} incompatible with field {:?}",
                self.id, self.comparator, self.field
            )))
        }
    }

    /// `None` when satisfied, otherwise the observed value.
    fn violation(&self, d: &DecisionRecord) -> Option<Value> {
        let holds = |x: f64| match (self.comparator, self.threshold) {
            (PolicyComparator::Ge, Some(t)) => x >= t,
            (PolicyComparator::Lt, Some(t)) => x < t,
            _ => false,
        };
        match self.field {
            PolicyField::Confidence => (!holds(d.confidence)).then(|| json!(d.confidence)),
            PolicyField::ParityGap => (!holds(d.parity_gap)).then(|| json!(d.parity_gap)),
            PolicyField::ComplianceFlags => (!d.compliance_flags.is_empty()).then(|| json!(d.compliance_flags)),
        }
    }
}

pub fn load_policy_pack(doc: &str) -> Result<Vec<PolicyRule>, PolicyError> {
    let rules: Vec<PolicyRule> = serde_json::from_str(doc).map_err(|e| PolicyError::Config(e.to_string()))?;
    for r in &rules {
        r.check()?;
    }
    Ok(rules)
}

pub fn default_policy_pack() -> Vec<PolicyRule> {
    load_policy_pack(include_str!("../fixtures/policy_pack.json")).expect("shipped policy pack is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub observed: Value,
    pub severity: RuleSeverity,
    pub action: ViolationAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyVerdict {
    pub decision_id: String,
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl PolicyVerdict {
    pub fn has_critical(&self) -> bool {
        self.violations.iter().any(|v| v.severity == RuleSeverity::Critical)
    }

    fn rule_ids_with(&self, action: ViolationAction) -> Vec<String> {
        self.violations
            .iter()
            .filter(|v| v.action == action)
            .map(|v| v.rule_id.clone())
            .collect()
    }
}

/// Every rule is checked, in order, with no short-circuit.
pub fn evaluate_policies(policies: &[PolicyRule], d: &DecisionRecord) -> PolicyVerdict {
    let violations: Vec<Violation> = policies
        .iter()
        .filter_map(|r| {
            r.violation(d).map(|observed| Violation {
                rule_id: r.id.clone(),
                observed,
                severity: r.severity,
                action: r.on_violation,
            })
        })
        .collect();
    PolicyVerdict {
        decision_id: d.id.clone(),
        passed: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustLevel {
    Recommend,
    GatedAutonomy,
    FullAutonomy,
}

impl TrustLevel {
    fn up(self) -> Self {
        match self {
            TrustLevel::Recommend => TrustLevel::GatedAutonomy,
            _ => TrustLevel::FullAutonomy,
        }
    }

    fn down(self) -> Self {
        match self {
            TrustLevel::FullAutonomy => TrustLevel::GatedAutonomy,
            _ => TrustLevel::Recommend,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authority {
    AutoApply,
    RecommendOnly,
    RequireReview,
}

pub fn effective_authority(level: TrustLevel, severity: DecisionSeverity) -> Authority {
    match (level, severity) {
        (TrustLevel::Recommend, _) => Authority::RecommendOnly,
        (TrustLevel::GatedAutonomy, DecisionSeverity::Routine) => Authority::AutoApply,
        (TrustLevel::GatedAutonomy, DecisionSeverity::HighRisk) => Authority::RequireReview,
        (TrustLevel::FullAutonomy, _) => Authority::AutoApply,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowOutcome {
    Applied,
    Overridden,
    Escalated,
    Agreed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub decision_id: String,
    pub outcome: WindowOutcome,
    pub critical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    pub level: TrustLevel,
    pub capacity: usize,
    pub window: VecDeque<WindowEntry>,
    pub override_rate: f64,
    /// Approved share of reviewed decisions; 0 when none were reviewed.
    pub intervention_accuracy: f64,
    pub critical_violations_in_window: usize,
    /// Set by a critical violation since the last transition check.
    pub pending_critical: bool,
}

impl Default for TrustState {
    fn default() -> Self {
        TrustState::new(TRUST_WINDOW)
    }
}

impl TrustState {
    pub fn new(capacity: usize) -> Self {
        TrustState {
            level: TrustLevel::Recommend,
            capacity,
            window: VecDeque::new(),
            override_rate: 0.0,
            intervention_accuracy: 0.0,
            critical_violations_in_window: 0,
            pending_critical: false,
        }
    }

    /// Adds or replaces the window entry for a decision.
    pub fn record(&mut self, decision_id: &str, outcome: WindowOutcome, critical: bool) {
        if let Some(e) = self.window.iter_mut().find(|e| e.decision_id == decision_id) {
            e.outcome = outcome;
            e.critical |= critical;
        } else {
            self.window.push_back(WindowEntry {
                decision_id: decision_id.to_string(),
                outcome,
                critical,
            });
            while self.window.len() > self.capacity {
                self.window.pop_front();
            }
        }
        self.pending_critical |= critical;
        self.recompute();
    }

    fn recompute(&mut self) {
        let count = |o: WindowOutcome| self.window.iter().filter(|e| e.outcome == o).count();
        let overridden = count(WindowOutcome::Overridden);
        let agreed = count(WindowOutcome::Agreed);
        self.override_rate = if self.window.is_empty() {
            0.0
        } else {
            overridden as f64 / self.window.len() as f64
        };
        self.intervention_accuracy = if agreed + overridden == 0 {
            0.0
        } else {
            agreed as f64 / (agreed + overridden) as f64
        };
        self.critical_violations_in_window = self.window.iter().filter(|e| e.critical).count();
    }

    pub fn window_full(&self) -> bool {
        self.window.len() >= self.capacity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationEvent {
    pub from: TrustLevel,
    pub to: TrustLevel,
    pub reason: String,
    pub override_rate: f64,
    pub intervention_accuracy: f64,
}

/// Demotion acts at once and wins over promotion; promotion needs a full
/// window. A transition clears the window so the new level is judged on
/// fresh evidence.
pub fn apply_trust_transition(state: &TrustState) -> (TrustState, Option<EscalationEvent>) {
    let mut next = state.clone();
    next.pending_critical = false;
    let demote_reason = if state.pending_critical {
        Some("critical policy violation")
    } else if state.override_rate > DEMOTE_OVERRIDE {
        Some("override rate above 0.10")
    } else {
        None
    };
    let target = match (state.level, demote_reason) {
        (TrustLevel::Recommend, Some(_)) => None,
        (level, Some(reason)) => Some((level.down(), reason)),
        (TrustLevel::Recommend, None)
            if state.window_full()
                && state.override_rate <= PROMOTE_GATED_MAX_OVERRIDE
                && state.intervention_accuracy >= PROMOTE_GATED_MIN_ACCURACY =>
        {
            Some((TrustLevel::GatedAutonomy, "override rate and intervention accuracy within gate"))
        }
        (TrustLevel::GatedAutonomy, None)
            if state.window_full()
                && state.override_rate <= PROMOTE_FULL_MAX_OVERRIDE
                && state.critical_violations_in_window == 0 =>
        {
            Some((TrustLevel::FullAutonomy, "override rate within gate and no critical violations"))
        }
        _ => None,
    };
    let Some((to, reason)) = target else {
        return (next, None);
    };
    let event = EscalationEvent {
        from: state.level,
        to,
        reason: reason.to_string(),
        override_rate: state.override_rate,
        intervention_accuracy: state.intervention_accuracy,
    };
    debug_assert!(to == state.level.up() || to == state.level.down());
    next.level = to;
    next.window.clear();
    next.recompute();
    (next, Some(event))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
    ExpiredAutoRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub decision: DecisionRecord,
    pub enqueued_at: DateTime<Utc>,
    pub deadline: DateTime<Utc>,
    pub status: ReviewStatus,
    pub reviewer: Option<String>,
    pub reviewer_rationale: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackRecord {
    pub decision_id: String,
    pub reason: Vec<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Applied,
    Queued,
    Blocked,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionState {
    pub record: DecisionRecord,
    pub disposition: Disposition,
    pub critical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub decision_id: String,
    pub verdict: PolicyVerdict,
    pub authority: Authority,
    pub disposition: Disposition,
    pub review: Option<ReviewItem>,
    pub rollback: Option<RollbackRecord>,
    pub transition: Option<EscalationEvent>,
}

/// Serializable copy of everything except the audit chain, which is stored
/// separately and matched by head digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSnapshot {
    pub policies: Vec<PolicyRule>,
    pub trust: TrustState,
    pub reviews: BTreeMap<String, ReviewItem>,
    pub decisions: BTreeMap<String, DecisionState>,
    pub rollbacks: BTreeMap<String, RollbackRecord>,
    pub transitions: Vec<EscalationEvent>,
    pub review_window_hours: i64,
    pub audit_head: String,
    pub audit_len: usize,
}

pub struct DecisionDomain<S: AuditSink = AuditChain> {
    policies: Vec<PolicyRule>,
    trust: TrustState,
    reviews: BTreeMap<String, ReviewItem>,
    decisions: BTreeMap<String, DecisionState>,
    rollbacks: BTreeMap<String, RollbackRecord>,
    transitions: Vec<EscalationEvent>,
    review_window: Duration,
    audit: S,
}

const SYSTEM: &str = "system";

impl DecisionDomain<AuditChain> {
    pub fn in_memory(policies: Vec<PolicyRule>) -> Self {
        DecisionDomain::new(policies, AuditChain::new())
    }
}

impl<S: AuditSink> DecisionDomain<S> {
    pub fn new(policies: Vec<PolicyRule>, audit: S) -> Self {
        DecisionDomain {
            policies,
            trust: TrustState::default(),
            reviews: BTreeMap::new(),
            decisions: BTreeMap::new(),
            rollbacks: BTreeMap::new(),
            transitions: Vec::new(),
            review_window: Duration::hours(REVIEW_WINDOW_HOURS),
            audit,
        }
    }

    pub fn with_review_window(mut self, window: Duration) -> Self {
        self.review_window = window;
        self
    }

    pub fn with_trust(mut self, trust: TrustState) -> Self {
        self.trust = trust;
        self
    }

    pub fn policies(&self) -> &[PolicyRule] {
        &self.policies
    }

    pub fn trust(&self) -> &TrustState {
        &self.trust
    }

    pub fn transitions(&self) -> &[EscalationEvent] {
        &self.transitions
    }

    pub fn audit(&self) -> &AuditChain {
        self.audit.chain()
    }

    pub fn audit_sink(&self) -> &S {
        &self.audit
    }

    /// For writers outside the domain, such as bus dead letters. Take a new
    /// snapshot afterwards.
    pub fn audit_sink_mut(&mut self) -> &mut S {
        &mut self.audit
    }

    pub fn decisions(&self) -> &BTreeMap<String, DecisionState> {
        &self.decisions
    }

    pub fn rollbacks(&self) -> &BTreeMap<String, RollbackRecord> {
        &self.rollbacks
    }

    pub fn review(&self, id: &str) -> Option<&ReviewItem> {
        self.reviews.get(id)
    }

    /// All review items ordered by deadline, then id.
    pub fn reviews(&self) -> Vec<&ReviewItem> {
        let mut v: Vec<&ReviewItem> = self.reviews.values().collect();
        v.sort_by(|a, b| a.deadline.cmp(&b.deadline).then_with(|| a.decision.id.cmp(&b.decision.id)));
        v
    }

    pub fn snapshot(&self) -> DomainSnapshot {
        DomainSnapshot {
            policies: self.policies.clone(),
            trust: self.trust.clone(),
            reviews: self.reviews.clone(),
            decisions: self.decisions.clone(),
            rollbacks: self.rollbacks.clone(),
            transitions: self.transitions.clone(),
            review_window_hours: self.review_window.num_hours(),
            audit_head: hex::encode(self.audit.chain().head_digest()),
            audit_len: self.audit.chain().len(),
        }
    }

    pub fn restore(snapshot: DomainSnapshot, audit: S) -> Result<Self, PolicyError> {
        let chain = audit.chain();
        if snapshot.audit_head != hex::encode(chain.head_digest()) || snapshot.audit_len != chain.len() {
            return Err(PolicyError::SnapshotMismatch);
        }
        Ok(DecisionDomain {
            policies: snapshot.policies,
            trust: snapshot.trust,
            reviews: snapshot.reviews,
            decisions: snapshot.decisions,
            rollbacks: snapshot.rollbacks,
            transitions: snapshot.transitions,
            review_window: Duration::hours(snapshot.review_window_hours),
            audit,
        })
    }

    fn log(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &Value,
        now: DateTime<Utc>,
    ) -> Result<(), PolicyError> {
        self.audit.record(actor, kind, rationale, &canonical_payload(payload), now)?;
        Ok(())
    }

    /// Audited record of an external event, e.g. a simulator milestone.
    pub fn note(&mut self, rationale: &str, payload: &Value, now: DateTime<Utc>) -> Result<(), PolicyError> {
        self.log(SYSTEM, AuditKind::SimEvent, rationale, payload, now)
    }

    fn check_transition(&mut self, now: DateTime<Utc>) -> Result<Option<EscalationEvent>, PolicyError> {
        let (next, event) = apply_trust_transition(&self.trust);
        self.trust = next;
        if let Some(e) = &event {
            self.log(
                SYSTEM,
                AuditKind::TrustTransition,
                &format!("{:?} -> {:?}: {}", e.from, e.to, e.reason),
                &json!(e),
                now,
            )?;
            self.transitions.push(e.clone());
        }
        Ok(event)
    }

    /// Evaluate, audit and act on a decision.
    pub fn submit(&mut self, d: DecisionRecord, now: DateTime<Utc>) -> Result<SubmitOutcome, PolicyError> {
        d.validate()?;
        if self.decisions.contains_key(&d.id) {
            return Err(PolicyError::DuplicateDecision(d.id.clone()));
        }
        let verdict = evaluate_policies(&self.policies, &d);
        let authority = effective_authority(self.trust.level, d.severity);
        let critical = verdict.has_critical();
        self.log(
            SYSTEM,
            AuditKind::Decision,
            &d.rationale,
            &json!({ "decision": d, "authority": authority, "trust_level": self.trust.level }),
            now,
        )?;
        if !verdict.passed {
            let ids: Vec<&str> = verdict.violations.iter().map(|v| v.rule_id.as_str()).collect();
            self.log(
                SYSTEM,
                AuditKind::PolicyVerdict,
                &format!("violations: {}", ids.join(", ")),
                &json!(verdict),
                now,
            )?;
        }
        self.decisions.insert(
            d.id.clone(),
            DecisionState {
                record: d.clone(),
                disposition: Disposition::Queued,
                critical,
            },
        );

        let rollback_rules = verdict.rule_ids_with(ViolationAction::Rollback);
        let escalate = !verdict.rule_ids_with(ViolationAction::Escalate).is_empty();
        let mut out = SubmitOutcome {
            decision_id: d.id.clone(),
            verdict,
            authority,
            disposition: Disposition::Queued,
            review: None,
            rollback: None,
            transition: None,
        };
        if !rollback_rules.is_empty() {
            out.rollback = Some(self.rollback_inner(&d.id, rollback_rules, now)?);
            out.disposition = Disposition::RolledBack;
        } else if escalate || authority != Authority::AutoApply {
            out.review = Some(self.enqueue_inner(&d, now)?);
        } else {
            self.decisions.get_mut(&d.id).expect("inserted").disposition = Disposition::Applied;
            self.trust.record(&d.id, WindowOutcome::Applied, critical);
            out.disposition = Disposition::Applied;
        }
        out.transition = self.check_transition(now)?;
        Ok(out)
    }

    /// Whether a decision would go to a reviewer under the current state.
    pub fn requires_review(&self, d: &DecisionRecord) -> bool {
        let verdict = evaluate_policies(&self.policies, d);
        verdict.violations.iter().any(|v| v.action == ViolationAction::Escalate)
            || effective_authority(self.trust.level, d.severity) != Authority::AutoApply
    }

    pub fn enqueue_review(&mut self, d: DecisionRecord, now: DateTime<Utc>) -> Result<ReviewItem, PolicyError> {
        d.validate()?;
        if self.reviews.contains_key(&d.id) {
            return Err(PolicyError::DuplicateReview(d.id.clone()));
        }
        if !self.requires_review(&d) {
            return Err(PolicyError::NotReviewable(d.id.clone()));
        }
        self.decisions.entry(d.id.clone()).or_insert_with(|| DecisionState {
            record: d.clone(),
            disposition: Disposition::Queued,
            critical: false,
        });
        self.enqueue_inner(&d, now)
    }

    fn enqueue_inner(&mut self, d: &DecisionRecord, now: DateTime<Utc>) -> Result<ReviewItem, PolicyError> {
        if self.reviews.contains_key(&d.id) {
            return Err(PolicyError::DuplicateReview(d.id.clone()));
        }
        let item = ReviewItem {
            decision: d.clone(),
            enqueued_at: now,
            deadline: now + self.review_window,
            status: ReviewStatus::Pending,
            reviewer: None,
            reviewer_rationale: None,
            resolved_at: None,
        };
        self.log(
            SYSTEM,
            AuditKind::Review,
            &format!("review requested for {} by {}", d.id, item.deadline.to_rfc3339()),
            &json!({ "event": "enqueue", "item": item }),
            now,
        )?;
        self.reviews.insert(d.id.clone(), item.clone());
        Ok(item)
    }

    /// First resolution wins. Resolving exactly at the deadline is allowed.
    pub fn resolve_review(
        &mut self,
        id: &str,
        resolution: Resolution,
        reviewer: &str,
        rationale: &str,
        now: DateTime<Utc>,
    ) -> Result<ReviewItem, PolicyError> {
        let item = self.reviews.get(id).ok_or_else(|| PolicyError::NotFound(id.to_string()))?;
        if item.status != ReviewStatus::Pending {
            return Err(PolicyError::Conflict {
                id: id.to_string(),
                status: item.status,
            });
        }
        if now > item.deadline {
            return Err(PolicyError::Expired {
                id: id.to_string(),
                deadline: item.deadline,
            });
        }
        let (status, outcome, disposition) = match resolution {
            Resolution::Approve => (ReviewStatus::Approved, WindowOutcome::Agreed, Disposition::Applied),
            Resolution::Reject => (ReviewStatus::Rejected, WindowOutcome::Overridden, Disposition::Blocked),
        };
        let reviewer_rationale = (!rationale.trim().is_empty()).then(|| rationale.to_string());
        let audit_text = format!(
            "{} {:?} by {}: {}",
            id,
            status,
            reviewer,
            reviewer_rationale.as_deref().unwrap_or("no rationale given")
        );
        let mut resolved = item.clone();
        resolved.status = status;
        resolved.reviewer = Some(reviewer.to_string());
        resolved.reviewer_rationale = reviewer_rationale;
        resolved.resolved_at = Some(now);
        self.log(reviewer, AuditKind::Review, &audit_text, &json!({ "event": "resolve", "item": resolved }), now)?;
        self.reviews.insert(id.to_string(), resolved.clone());
        let critical = self.decisions.get(id).is_some_and(|s| s.critical);
        if let Some(s) = self.decisions.get_mut(id) {
            s.disposition = disposition;
        }
        self.trust.record(id, outcome, critical);
        self.check_transition(now)?;
        Ok(resolved)
    }

    /// Auto-rejects every pending item whose deadline is strictly before `now`.
    pub fn expire_reviews(&mut self, now: DateTime<Utc>) -> Result<Vec<ReviewItem>, PolicyError> {
        let due: Vec<String> = self
            .reviews
            .values()
            .filter(|r| r.status == ReviewStatus::Pending && now > r.deadline)
            .map(|r| r.decision.id.clone())
            .collect();
        let mut out = Vec::new();
        for id in due {
            let mut item = self.reviews[&id].clone();
            item.status = ReviewStatus::ExpiredAutoRejected;
            item.resolved_at = Some(now);
            self.log(
                SYSTEM,
                AuditKind::Review,
                &format!("{id} expired unreviewed at {}; auto-rejected", item.deadline.to_rfc3339()),
                &json!({ "event": "expire", "item": item }),
                now,
            )?;
            self.reviews.insert(id.clone(), item.clone());
            let critical = self.decisions.get(&id).is_some_and(|s| s.critical);
            if let Some(s) = self.decisions.get_mut(&id) {
                s.disposition = Disposition::Blocked;
            }
            self.trust.record(&id, WindowOutcome::Escalated, critical);
            out.push(item);
        }
        if !out.is_empty() {
            self.check_transition(now)?;
        }
        Ok(out)
    }

    pub fn rollback(&mut self, id: &str, reason: Vec<String>, now: DateTime<Utc>) -> Result<RollbackRecord, PolicyError> {
        if !self.decisions.contains_key(id) {
            return Err(PolicyError::NotFound(id.to_string()));
        }
        let r = self.rollback_inner(id, reason, now)?;
        self.check_transition(now)?;
        Ok(r)
    }

    fn rollback_inner(&mut self, id: &str, reason: Vec<String>, now: DateTime<Utc>) -> Result<RollbackRecord, PolicyError> {
        if reason.is_empty() || reason.iter().all(|r| r.trim().is_empty()) {
            return Err(PolicyError::EmptyReason);
        }
        if self.rollbacks.contains_key(id) {
            return Err(PolicyError::AlreadyRolledBack(id.to_string()));
        }
        let record = RollbackRecord {
            decision_id: id.to_string(),
            reason,
            at: now,
        };
        self.log(
            SYSTEM,
            AuditKind::Rollback,
            &format!("rolled back {id}: {}", record.reason.join(", ")),
            &json!(record),
            now,
        )?;
        self.rollbacks.insert(id.to_string(), record.clone());
        let state = self.decisions.get_mut(id).expect("checked by caller");
        state.disposition = Disposition::RolledBack;
        let critical = state.critical;
        self.trust.record(id, WindowOutcome::Escalated, critical);
        Ok(record)
    }
}
