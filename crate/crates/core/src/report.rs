//! Key-value documents exchanged between VOs, the DSSE service and the bus.
//!
//! A VO report serializes as
//! `{"vo_id":..,"ts":{"soc":..,"frac":..},"phasors":{"V31":{"mag":..,"ang":..}},"freq":..,"rocof":..,"status":{..},"rr":..}`
//! with the optional members omitted when filtered out. Phasor names are
//! kept in a sorted map so the encoding is deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasor::Phasor;
use crate::time::GpsTimestamp;
use crate::wire::Status;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("report carries no phasors")]
    NoPhasors,
    #[error("vo_id is empty")]
    EmptyVoId,
    #[error("timestamp fraction {frac} out of range")]
    BadTimestamp { frac: u32 },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("reporting rate must be positive")]
    BadRate,
    #[error("malformed document: {0}")]
    Malformed(String),
}

/// Decoded STAT word, one named member per field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusFields {
    pub data_error: u8,
    pub sync_lost: bool,
    pub sorted_by_arrival: bool,
    pub trigger: bool,
    pub config_change: bool,
    pub data_modified: bool,
    pub time_quality: u8,
    pub unlocked_time: u8,
    pub trigger_reason: u8,
}

impl From<Status> for StatusFields {
    fn from(s: Status) -> Self {
        Self {
            data_error: s.data_error(),
            sync_lost: s.sync_lost(),
            sorted_by_arrival: s.sorted_by_arrival(),
            trigger: s.trigger(),
            config_change: s.config_change(),
            data_modified: s.data_modified(),
            time_quality: s.time_quality(),
            unlocked_time: s.unlocked_time(),
            trigger_reason: s.trigger_reason(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoReport {
    pub vo_id: String,
    pub ts: GpsTimestamp,
    pub phasors: BTreeMap<String, Phasor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rocof: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<StatusFields>,
    /// Reporting rate in force when the report was emitted (frames/s).
    pub rr: u32,
}

impl VoReport {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.vo_id.is_empty() {
            return Err(ReportError::EmptyVoId);
        }
        if !self.ts.is_valid() {
            return Err(ReportError::BadTimestamp { frac: self.ts.frac });
        }
        if self.phasors.is_empty() {
            return Err(ReportError::NoPhasors);
        }
        for (name, p) in &self.phasors {
            if !p.is_finite() {
                return Err(ReportError::NonFinite(format!("phasors.{name}")));
            }
        }
        if self.freq.is_some_and(|f| !f.is_finite()) {
            return Err(ReportError::NonFinite("freq".into()));
        }
        if self.rocof.is_some_and(|f| !f.is_finite()) {
            return Err(ReportError::NonFinite("rocof".into()));
        }
        if self.rr == 0 {
            return Err(ReportError::BadRate);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }

    /// Parses and validates a report document.
    pub fn from_json(bytes: &[u8]) -> Result<Self, ReportError> {
        let report: VoReport =
            serde_json::from_slice(bytes).map_err(|e| ReportError::Malformed(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    /// Serialized document size in bytes.
    pub fn encoded_len(&self) -> usize {
        self.to_json().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Qos {
    #[default]
    AtMostOnce,
    AtLeastOnce,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("wildcard `{0}` is not allowed in a published topic")]
    Wildcard(char),
    #[error("topic contains a NUL character")]
    Nul,
}

/// Checks a concrete (publishable) topic name.
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() {
        return Err(TopicError::Empty);
    }
    if let Some(c) = topic.chars().find(|c| matches!(c, '+' | '#')) {
        return Err(TopicError::Wildcard(c));
    }
    if topic.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// An actuation command, either returned to one VO in a POST reply or
/// published on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub topic: String,
    #[serde(default)]
    pub payload: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub qos: Qos,
}

impl Command {
    pub fn new(topic: impl Into<String>, qos: Qos) -> Result<Self, TopicError> {
        let topic = topic.into();
        validate_topic(&topic)?;
        Ok(Self {
            topic,
            payload: serde_json::Map::new(),
            qos,
        })
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }
}

/// Response headers of a report acknowledgement carrying the service-side
/// timing of the estimation it triggered.
pub mod ack_headers {
    pub const SEQ: &str = "x-dsse-seq";
    pub const QUEUE_MS: &str = "x-dsse-queue-ms";
    pub const SOLVE_MS: &str = "x-dsse-solve-ms";
    pub const PERSIST_MS: &str = "x-dsse-persist-ms";
    /// Present when the trigger was coalesced away under overload.
    pub const SKIPPED: &str = "x-dsse-skipped";
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VoReport {
        let mut phasors = BTreeMap::new();
        phasors.insert("V31".to_string(), Phasor::new(1.0312, -0.0421));
        VoReport {
            vo_id: "vo31".into(),
            ts: GpsTimestamp::new(20, 900_000),
            phasors,
            freq: Some(50.0),
            rocof: Some(0.0),
            status: Some(Status::OK.into()),
            rr: 50,
        }
    }

    #[test]
    fn json_shape() {
        let mut r = sample();
        r.status = None;
        r.rocof = None;
        let text = String::from_utf8(r.to_json()).unwrap();
        assert_eq!(
            text,
            r#"{"vo_id":"vo31","ts":{"soc":20,"frac":900000},"phasors":{"V31":{"mag":1.0312,"ang":-0.0421}},"freq":50.0,"rr":50}"#
        );
    }

    #[test]
    fn round_trip() {
        let r = sample();
        assert_eq!(VoReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn rejects_malformed() {
        let mut r = sample();
        r.phasors.clear();
        assert_eq!(VoReport::from_json(&r.to_json()), Err(ReportError::NoPhasors));
        assert!(matches!(VoReport::from_json(b"{}"), Err(ReportError::Malformed(_))));
        assert!(matches!(
            VoReport::from_json(br#"{"vo_id":"a","ts":{"soc":1,"frac":2000000},"phasors":{"V":{"mag":1,"ang":0}},"rr":1}"#),
            Err(ReportError::BadTimestamp { .. })
        ));
        let mut r = sample();
        r.rr = 0;
        assert_eq!(r.validate(), Err(ReportError::BadRate));
    }

    #[test]
    fn topics() {
        assert!(validate_topic("grid/area7/der/disconnect").is_ok());
        assert_eq!(validate_topic(""), Err(TopicError::Empty));
        assert_eq!(validate_topic("grid/+/x"), Err(TopicError::Wildcard('+')));
        assert_eq!(validate_topic("grid/#"), Err(TopicError::Wildcard('#')));
    }

    #[test]
    fn command_document() {
        let cmd = Command::new("vo/vo71/der", Qos::AtLeastOnce).unwrap().with("action", "disconnect");
        let text = serde_json::to_string(&cmd).unwrap();
        assert_eq!(text, r#"{"topic":"vo/vo71/der","payload":{"action":"disconnect"},"qos":"at-least-once"}"#);
        assert_eq!(serde_json::from_str::<Command>(&text).unwrap(), cmd);
    }
}
