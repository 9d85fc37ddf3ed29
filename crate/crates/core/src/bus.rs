//! In-process message bus with bounded exponential-backoff redelivery.
//!
//! A failed delivery is retried after `base · 2^(n−1)` for attempt `n`, so
//! with the defaults the five attempts land at 0, 100, 300, 700 and 1500 ms.
//! A message that fails all attempts is dead-lettered and audited.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit_log::{canonical_payload, AuditError, AuditKind, AuditSink};
use crate::clock::Clock;

pub const MAX_ATTEMPTS: u32 = 5;
pub const BASE_DELAY: Duration = Duration::from_millis(100);

#[derive(Debug, Error)]
pub enum BusError {
    #[error("no handler registered for topic `{0}`")]
    UnregisteredTopic(String),
    #[error("dead-letter audit failed: {0}")]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: String,
    pub payload: Vec<u8>,
    pub attempt: u32,
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub next_delay: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub topic: String,
    pub attempts: u32,
    pub last_error: String,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub topic: String,
    pub delivered: bool,
    pub attempts: u32,
    /// Offset of each attempt from the first, in milliseconds.
    pub attempt_offsets_ms: Vec<u64>,
    pub dead_letter: Option<DeadLetter>,
}

pub type Handler = Box<dyn FnMut(&BusMessage) -> Result<(), String> + Send>;

pub struct Bus {
    handlers: BTreeMap<String, Handler>,
    base_delay: Duration,
    max_attempts: u32,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    pub fn new() -> Self {
        Bus {
            handlers: BTreeMap::new(),
            base_delay: BASE_DELAY,
            max_attempts: MAX_ATTEMPTS,
        }
    }

    pub fn register(&mut self, topic: &str, handler: Handler) {
        self.handlers.insert(topic.to_string(), handler);
    }

    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.pow(attempt - 1)
    }

    pub fn dispatch_with_retry(
        &mut self,
        topic: &str,
        payload: &[u8],
        clock: &dyn Clock,
        audit: &mut dyn AuditSink,
    ) -> Result<DeliveryReport, BusError> {
        let max_attempts = self.max_attempts;
        let delays: Vec<Duration> = (1..=max_attempts).map(|n| self.delay_after(n)).collect();
        let handler = self
            .handlers
            .get_mut(topic)
            .ok_or_else(|| BusError::UnregisteredTopic(topic.to_string()))?;
        let start = clock.now();
        let mut offsets = Vec::new();
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            offsets.push((clock.now() - start).num_milliseconds() as u64);
            let msg = BusMessage {
                topic: topic.to_string(),
                payload: payload.to_vec(),
                attempt,
                max_attempts,
                next_delay: delays[attempt as usize - 1],
            };
            match handler(&msg) {
                Ok(()) => {
                    return Ok(DeliveryReport {
                        topic: topic.to_string(),
                        delivered: true,
                        attempts: attempt,
                        attempt_offsets_ms: offsets,
                        dead_letter: None,
                    })
                }
                Err(e) => last_error = e,
            }
            if attempt < max_attempts {
                clock.sleep(msg.next_delay);
            }
        }
        let record = serde_json::json!({
            "topic": topic,
            "attempts": max_attempts,
            "last_error": last_error,
            "payload_hex": hex::encode(payload),
        });
        let entry = audit.record(
            "bus",
            AuditKind::SimEvent,
            &format!("dead-letter on `{topic}` after {max_attempts} attempts: {last_error}"),
            &canonical_payload(&record),
            clock.now(),
        )?;
        Ok(DeliveryReport {
            topic: topic.to_string(),
            delivered: false,
            attempts: max_attempts,
            attempt_offsets_ms: offsets,
            dead_letter: Some(DeadLetter {
                topic: topic.to_string(),
                attempts: max_attempts,
                last_error,
                audit_seq: entry.seq,
            }),
        })
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
