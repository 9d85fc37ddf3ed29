//! Append-only, hash-chained decision log.
//!
//! Each entry digest is SHA-256 over seven length-prefixed UTF-8 fields:
//! seq (decimal), timestamp (RFC 3339), actor, kind, rationale, payload
//! digest (hex) and previous digest (hex). Every field is preceded by its
//! byte length as a big-endian u64.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];

pub const GENESIS_PREV: Digest = [0u8; 32];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("rationale must not be empty")]
    EmptyRationale,
    #[error("range [{start}, {end}] outside chain of {len} entries")]
    Range { start: u64, end: u64, len: usize },
    #[error("line {line}: {message}")]
    Import { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Decision,
    PolicyVerdict,
    TrustTransition,
    Review,
    Rollback,
    SimEvent,
}

impl AuditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditKind::Decision => "decision",
            AuditKind::PolicyVerdict => "policy_verdict",
            AuditKind::TrustTransition => "trust_transition",
            AuditKind::Review => "review",
            AuditKind::Rollback => "rollback",
            AuditKind::SimEvent => "sim_event",
        }
    }
}

/// Field order here is the export key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
    pub actor: String,
    pub kind: AuditKind,
    pub rationale: String,
    #[serde(with = "hex_digest")]
    pub payload_digest: Digest,
    #[serde(with = "hex_digest")]
    pub prev_digest: Digest,
    #[serde(with = "hex_digest")]
    pub entry_digest: Digest,
}

impl AuditEntry {
    pub fn compute_digest(&self) -> Digest {
        entry_digest(
            self.seq,
            &self.timestamp,
            &self.actor,
            self.kind,
            &self.rationale,
            &self.payload_digest,
            &self.prev_digest,
        )
    }
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn format_digest(d: &Digest) -> String {
    hex::encode(d)
}

pub fn payload_digest(payload: &[u8]) -> Digest {
    Sha256::digest(payload).into()
}

/// Canonical payload bytes for a serializable value: compact JSON with
/// struct field order and sorted map keys.
pub fn canonical_payload<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("payload types serialize infallibly")
}

fn entry_digest(
    seq: u64,
    timestamp: &DateTime<Utc>,
    actor: &str,
    kind: AuditKind,
    rationale: &str,
    payload: &Digest,
    prev: &Digest,
) -> Digest {
    let mut h = Sha256::new();
    let fields = [
        seq.to_string(),
        format_timestamp(timestamp),
        actor.to_string(),
        kind.as_str().to_string(),
        rationale.to_string(),
        hex::encode(payload),
        hex::encode(prev),
    ];
    for f in &fields {
        h.update((f.len() as u64).to_be_bytes());
        h.update(f.as_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub broken_seq: Option<u64>,
    pub entries: usize,
}

/// Checks position `i` for seq `i`, the link to entry `i-1` and the stored
/// digest, reporting the first position that fails any of them.
pub fn verify_entries(entries: &[AuditEntry]) -> VerifyReport {
    let mut prev = GENESIS_PREV;
    for (i, e) in entries.iter().enumerate() {
        let i = i as u64;
        if e.seq != i || e.prev_digest != prev || e.compute_digest() != e.entry_digest {
            return VerifyReport {
                ok: false,
                broken_seq: Some(i),
                entries: entries.len(),
            };
        }
        prev = e.entry_digest;
    }
    VerifyReport {
        ok: true,
        broken_seq: None,
        entries: entries.len(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditChain {
    entries: Vec<AuditEntry>,
}

impl AuditChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adopts entries as-is. Call [`AuditChain::verify`] before trusting them.
    pub fn from_entries(entries: Vec<AuditEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest of the last entry; all zeros for an empty chain.
    pub fn head_digest(&self) -> Digest {
        self.entries.last().map_or(GENESIS_PREV, |e| e.entry_digest)
    }

    pub fn append(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &[u8],
        now: DateTime<Utc>,
    ) -> Result<&AuditEntry, AuditError> {
        if rationale.trim().is_empty() {
            return Err(AuditError::EmptyRationale);
        }
        let seq = self.entries.last().map_or(0, |e| e.seq + 1);
        let prev_digest = self.head_digest();
        let payload_digest = payload_digest(payload);
        let entry_digest = entry_digest(seq, &now, actor, kind, rationale, &payload_digest, &prev_digest);
        self.entries.push(AuditEntry {
            seq,
            timestamp: now,
            actor: actor.to_string(),
            kind,
            rationale: rationale.to_string(),
            payload_digest,
            prev_digest,
            entry_digest,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn verify(&self) -> VerifyReport {
        verify_entries(&self.entries)
    }

    /// JSON Lines for entries `start..=end`.
    pub fn export(&self, start: u64, end: u64) -> Result<String, AuditError> {
        if start > end || end as usize >= self.entries.len() {
            return Err(AuditError::Range {
                start,
                end,
                len: self.entries.len(),
            });
        }
        Ok(export_lines(&self.entries[start as usize..=end as usize]))
    }

    pub fn export_all(&self) -> String {
        export_lines(&self.entries)
    }
}

pub fn export_line(e: &AuditEntry) -> String {
    serde_json::to_string(e).expect("audit entries serialize infallibly")
}

fn export_lines(entries: &[AuditEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&export_line(e));
        out.push('\n');
    }
    out
}

/// Parses exported lines without verifying them.
pub fn import(text: &str) -> Result<Vec<AuditEntry>, AuditError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditError::Import {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Anything that can append to and expose an audit chain.
pub trait AuditSink {
    fn record(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &[u8],
        now: DateTime<Utc>,
    ) -> Result<AuditEntry, AuditError>;

    fn chain(&self) -> &AuditChain;
}

impl AuditSink for AuditChain {
    fn record(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &[u8],
        now: DateTime<Utc>,
    ) -> Result<AuditEntry, AuditError> {
        self.append(actor, kind, rationale, payload, now).cloned()
    }

    fn chain(&self) -> &AuditChain {
        self
    }
}

impl AuditSink for FileAuditLog {
    fn record(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &[u8],
        now: DateTime<Utc>,
    ) -> Result<AuditEntry, AuditError> {
        self.append(actor, kind, rationale, payload, now)
    }

    fn chain(&self) -> &AuditChain {
        &self.chain
    }
}

/// A chain persisted as an append-only JSON Lines file.
#[derive(Debug)]
pub struct FileAuditLog {
    path: PathBuf,
    chain: AuditChain,
    file: File,
}

impl FileAuditLog {
    /// Opens or creates the file, loads it and verifies the loaded chain.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, VerifyReport), AuditError> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            let mut text = String::new();
            for line in BufReader::new(File::open(&path)?).lines() {
                text.push_str(&line?);
                text.push('\n');
            }
            import(&text)?
        } else {
            Vec::new()
        };
        let chain = AuditChain::from_entries(entries);
        let report = chain.verify();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Self { path, chain, file }, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn chain(&self) -> &AuditChain {
        &self.chain
    }

    pub fn append(
        &mut self,
        actor: &str,
        kind: AuditKind,
        rationale: &str,
        payload: &[u8],
        now: DateTime<Utc>,
    ) -> Result<AuditEntry, AuditError> {
        let entry = self.chain.append(actor, kind, rationale, payload, now)?.clone();
        writeln!(self.file, "{}", export_line(&entry))?;
        self.file.flush()?;
        Ok(entry)
    }

    /// Re-reads the file from disk and verifies what is there now.
    pub fn verify_on_disk(&self) -> Result<VerifyReport, AuditError> {
        let text = std::fs::read_to_string(&self.path)?;
        Ok(verify_entries(&import(&text)?))
    }
}

mod hex_digest {
    use super::*;

    pub fn serialize<S: Serializer>(d: &Digest, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Digest, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
    }
}

mod rfc3339 {
    use super::*;

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}
