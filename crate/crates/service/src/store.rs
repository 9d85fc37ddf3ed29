//! On-disk state: an append-only audit log plus a snapshot of the decision
//! domain, both under one data directory.
//!
//! Opening a [`Store`] takes an exclusive lock on the directory, so one
//! process at a time mutates it. A running `serve` therefore owns the
//! directory, and CLI mutations go through its API instead.

use std::fs::{File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use veriflow_core::audit_log::{import, verify_entries, FileAuditLog, VerifyReport};
use veriflow_core::policy_trust::{default_policy_pack, DecisionDomain, DomainSnapshot, PolicyError, PolicyRule};

use crate::error::ServiceError;

pub const AUDIT_FILE: &str = "audit.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const LOCK_FILE: &str = "veriflow.lock";
pub const RUNS_DIR: &str = "runs";
pub const LATEST_METRICS_FILE: &str = "metrics_latest.json";

pub struct Store {
    dir: PathBuf,
    domain: DecisionDomain<FileAuditLog>,
    _lock: File,
}

impl Store {
    /// `policies` replaces the persisted pack when given.
    pub fn open(dir: &Path, policies: Option<Vec<PolicyRule>>) -> Result<Store, ServiceError> {
        std::fs::create_dir_all(dir)?;
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(ServiceError::Locked(dir.to_path_buf())),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }
        let (audit, _) = FileAuditLog::open(dir.join(AUDIT_FILE))?;
        let domain = match read_snapshot(dir)? {
            Some(mut snap) => {
                if let Some(p) = policies {
                    snap.policies = p;
                }
                DecisionDomain::restore(snap, audit).map_err(|e| match e {
                    PolicyError::SnapshotMismatch => ServiceError::Inconsistent(dir.to_path_buf()),
                    other => other.into(),
                })?
            }
            None if !audit.chain().is_empty() => return Err(ServiceError::Inconsistent(dir.to_path_buf())),
            None => DecisionDomain::new(policies.unwrap_or_else(default_policy_pack), audit),
        };
        let store = Store {
            dir: dir.to_path_buf(),
            domain,
            _lock: lock,
        };
        store.save()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn domain(&self) -> &DecisionDomain<FileAuditLog> {
        &self.domain
    }

    /// Runs `f` against the domain and persists the snapshot whether or not
    /// it succeeded; audit entries are already on disk by then.
    pub fn mutate<T, E>(&mut self, f: impl FnOnce(&mut DecisionDomain<FileAuditLog>) -> Result<T, E>) -> Result<T, ServiceError>
    where
        ServiceError: From<E>,
    {
        let out = f(&mut self.domain);
        self.save()?;
        Ok(out?)
    }

    /// Auto-rejects reviews whose deadline has passed.
    pub fn sweep(&mut self, now: DateTime<Utc>) -> Result<usize, ServiceError> {
        let pending = self.domain.reviews().iter().any(|r| r.status == veriflow_core::policy_trust::ReviewStatus::Pending && now > r.deadline);
        if !pending {
            return Ok(0);
        }
        self.mutate(|d| d.expire_reviews(now).map(|v| v.len()))
    }

    fn save(&self) -> Result<(), ServiceError> {
        let tmp = self.dir.join(format!("{STATE_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.domain.snapshot()).expect("snapshot serializes");
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(tmp, self.dir.join(STATE_FILE))?;
        Ok(())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.dir.join(RUNS_DIR)
    }
}

pub fn read_snapshot(dir: &Path) -> Result<Option<DomainSnapshot>, ServiceError> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))
}

/// Verifies the log as it is on disk now. A missing log is an empty, valid
/// chain.
pub fn verify_log(path: &Path) -> Result<VerifyReport, ServiceError> {
    if !path.exists() {
        return Ok(verify_entries(&[]));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(verify_entries(&import(&text)?))
}
