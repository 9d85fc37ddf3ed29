//! Requirement-driven test generation and validation pipeline.
//!
//! Requirements are parsed into structured records ([`ingest`]), turned into
//! executable test cases against a declarative system model ([`generation`]),
//! selected under a cost budget by Monte Carlo tree search ([`optimizer`]) and
//! judged by a rule/model ensemble ([`validation`]). Every resulting decision
//! passes through policy gates and a trust-escalation state machine
//! ([`policy_trust`]), fairness checks ([`fairness`]) and a hash-chained audit
//! log ([`audit_log`]). [`simulator`] wires everything into a seeded CI/CD
//! simulation whose event streams feed [`metrics`].

pub mod audit_log;
pub mod bus;
pub mod clock;
pub mod fairness;
pub mod generation;
pub mod ingest;
pub mod metrics;
pub mod optimizer;
pub mod policy_trust;
pub mod simulator;
pub mod validation;

mod rng;

pub use clock::{Clock, SystemClock, VirtualClock};
