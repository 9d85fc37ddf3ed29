//! CLI and HTTP front end over `veriflow-core`.
//!
//! Both surfaces share [`ops`]; state lives in a data directory managed by
//! [`store::Store`].

pub mod api;
pub mod cli;
pub mod error;
pub mod ops;
pub mod store;
