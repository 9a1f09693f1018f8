//! The Virtual Object core: decoding, rate policy and report construction
//! for one PMU, independent of any transport.

use gridmesh_core::grid::NodeId;
use gridmesh_core::report::VoReport;
use gridmesh_core::wire::{decode_frame, PmuDataFrame, WireError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{filter_report, ChannelMap, FilterError, FilterSpec};
use crate::policy::{PolicyConfig, PolicyError, RateChange, RatePolicyState, Verdict};

#[derive(Debug, Error)]
pub enum VoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("vo_id must not be empty")]
    EmptyId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoSettings {
    pub vo_id: String,
    pub node: NodeId,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Members of pushed reports.
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub channels: Option<ChannelMap>,
}

impl VoSettings {
    pub fn new(vo_id: impl Into<String>, node: NodeId) -> Self {
        Self {
            vo_id: vo_id.into(),
            node,
            policy: PolicyConfig::default(),
            filter: FilterSpec::full(),
            channels: None,
        }
    }

    pub fn channel_map(&self) -> ChannelMap {
        self.channels.clone().unwrap_or_else(|| ChannelMap::three_phase(self.node))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct VoCounters {
    pub frames_in: u64,
    pub crc_errors: u64,
    pub malformed: u64,
    pub out_of_order: u64,
    pub emitted: u64,
}

#[derive(Debug, Clone)]
pub struct VirtualObject {
    settings: VoSettings,
    channels: ChannelMap,
    policy: RatePolicyState,
    latest: Option<PmuDataFrame>,
    counters: VoCounters,
    trace: Vec<RateChange>,
}

impl VirtualObject {
    pub fn new(settings: VoSettings) -> Result<Self, VoError> {
        if settings.vo_id.is_empty() {
            return Err(VoError::EmptyId);
        }
        let channels = settings.channel_map();
        settings.filter.check_channels(&channels)?;
        let policy = RatePolicyState::new(settings.policy.clone())?;
        Ok(Self {
            settings,
            channels,
            policy,
            latest: None,
            counters: VoCounters::default(),
            trace: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.settings.vo_id
    }

    pub fn settings(&self) -> &VoSettings {
        &self.settings
    }

    pub fn counters(&self) -> VoCounters {
        self.counters
    }

    pub fn policy(&self) -> &RatePolicyState {
        &self.policy
    }

    /// Every rate change so far, in frame order.
    pub fn rate_trace(&self) -> &[RateChange] {
        &self.trace
    }

    pub fn latest_frame(&self) -> Option<&PmuDataFrame> {
        self.latest.as_ref()
    }

    /// Runs one decoded frame through the policy and returns the report to
    /// push, if the frame is emitted.
    pub fn on_frame(&mut self, frame: PmuDataFrame) -> Option<VoReport> {
        self.counters.frames_in += 1;
        let outcome = self.policy.on_input(frame.timestamp, self.channels.vrms(&frame));
        if let Some(change) = outcome.change {
            self.trace.push(change);
        }
        match outcome.verdict {
            Verdict::OutOfOrder => {
                self.counters.out_of_order += 1;
                None
            }
            Verdict::Suppress => {
                self.latest = Some(frame);
                None
            }
            Verdict::Emit => {
                self.counters.emitted += 1;
                let report = filter_report(&frame, &self.channels, &self.settings.filter, &self.settings.vo_id, outcome.rr);
                self.latest = Some(frame);
                Some(report)
            }
        }
    }

    /// Decodes one wire frame first. Corrupt frames are counted and dropped.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Result<Option<VoReport>, WireError> {
        match decode_frame(bytes) {
            Ok(frame) => Ok(self.on_frame(frame)),
            Err(e) => {
                match e {
                    WireError::CrcMismatch { .. } => self.counters.crc_errors += 1,
                    _ => self.counters.malformed += 1,
                }
                Err(e)
            }
        }
    }

    /// The most recent frame as a report with the given members, for GET
    /// queries.
    pub fn latest_report(&self, spec: &FilterSpec) -> Option<VoReport> {
        let frame = self.latest.as_ref()?;
        Some(filter_report(frame, &self.channels, spec, &self.settings.vo_id, self.policy.current_rr()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridmesh_core::time::GpsTimestamp;
    use gridmesh_core::wire::{encode_frame, Status};
    use gridmesh_core::Phasor;
    use std::f64::consts::PI;

    fn frame(us: u64, mag: f64) -> PmuDataFrame {
        PmuDataFrame {
            idcode: 31,
            timestamp: GpsTimestamp::from_micros(us),
            status: Status::OK,
            phasors: [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0].iter().map(|a| Phasor::new(mag, *a)).collect(),
            freq: 50.0,
            rocof: 0.0,
        }
    }

    #[test]
    fn steady_stream_emits_at_one_fps() {
        let mut vo = VirtualObject::new(VoSettings::new("vo31", 31)).unwrap();
        let reports: Vec<_> = (0..150).filter_map(|k| vo.on_frame(frame(k * 20_000, 1.0))).collect();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[1].ts, GpsTimestamp::new(1, 0));
        assert!(reports.iter().all(|r| r.rr == 1 && r.phasors.len() == 4));
        assert_eq!(vo.counters().emitted, 3);
    }

    #[test]
    fn get_returns_latest_frame() {
        let mut vo = VirtualObject::new(VoSettings::new("vo31", 31)).unwrap();
        assert!(vo.latest_report(&FilterSpec::full()).is_none());
        for k in 0..3 {
            vo.on_frame(frame(k * 20_000, 1.0));
        }
        let r = vo.latest_report(&FilterSpec::phasors_only()).unwrap();
        assert_eq!(r.ts, GpsTimestamp::from_micros(40_000));
        assert!(r.freq.is_none());
    }

    #[test]
    fn corrupt_bytes_are_counted() {
        let mut vo = VirtualObject::new(VoSettings::new("vo31", 31)).unwrap();
        let mut bytes = encode_frame(&frame(0, 1.0)).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        assert!(vo.on_bytes(&bytes).is_err());
        assert!(vo.on_bytes(&[0xAA]).is_err());
        assert_eq!((vo.counters().crc_errors, vo.counters().malformed, vo.counters().frames_in), (1, 1, 0));
    }

    #[test]
    fn rejects_unknown_channel_selection() {
        let mut s = VoSettings::new("vo31", 31);
        s.filter = FilterSpec::phasors_only().with_channels(["V71"]);
        assert!(matches!(VirtualObject::new(s), Err(VoError::Filter(_))));
    }
}
