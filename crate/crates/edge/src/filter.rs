//! Conversion of decoded frames into key-value reports, with field and
//! channel filtering.

use std::collections::{BTreeMap, BTreeSet};

use gridmesh_core::grid::NodeId;
use gridmesh_core::phasor::positive_sequence;
use gridmesh_core::report::VoReport;
use gridmesh_core::wire::PmuDataFrame;
use gridmesh_core::Phasor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("unknown field `{0}` (expected phasors, freq, rocof or status)")]
    UnknownField(String),
    #[error("channel selection is empty")]
    NoChannels,
    #[error("channel `{0}` is not produced by this VO")]
    UnknownChannel(String),
}

/// Which report members to carry. Phasors are always included; `channels`
/// optionally narrows them to a subset of names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub freq: bool,
    #[serde(default)]
    pub rocof: bool,
    #[serde(default)]
    pub status: bool,
    #[serde(default)]
    pub channels: Option<BTreeSet<String>>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl FilterSpec {
    pub fn full() -> Self {
        Self {
            freq: true,
            rocof: true,
            status: true,
            channels: None,
        }
    }

    pub fn phasors_only() -> Self {
        Self {
            freq: false,
            rocof: false,
            status: false,
            channels: None,
        }
    }

    pub fn with_channels<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.channels = Some(names.into_iter().map(Into::into).collect());
        self
    }

    /// Parses a comma-separated field list such as `phasors,freq`.
    pub fn parse_fields(list: &str) -> Result<Self, FilterError> {
        let mut spec = Self::phasors_only();
        for f in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "phasors" => {}
                "freq" => spec.freq = true,
                "rocof" => spec.rocof = true,
                "status" => spec.status = true,
                other => return Err(FilterError::UnknownField(other.to_string())),
            }
        }
        Ok(spec)
    }

    pub fn check_channels(&self, channels: &ChannelMap) -> Result<(), FilterError> {
        let Some(selected) = &self.channels else {
            return Ok(());
        };
        if selected.is_empty() {
            return Err(FilterError::NoChannels);
        }
        let known = channels.all_names();
        match selected.iter().find(|n| !known.contains(n)) {
            Some(n) => Err(FilterError::UnknownChannel(n.clone())),
            None => Ok(()),
        }
    }
}

/// Names of the phasor channels a PMU streams, plus the optional derived
/// positive-sequence channel computed from the first three.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMap {
    pub raw: Vec<String>,
    #[serde(default)]
    pub positive_sequence: Option<String>,
}

impl ChannelMap {
    /// `VA{n}`, `VB{n}`, `VC{n}` with the derived `V{n}`.
    pub fn three_phase(node: NodeId) -> Self {
        Self {
            raw: vec![format!("VA{node}"), format!("VB{node}"), format!("VC{node}")],
            positive_sequence: Some(format!("V{node}")),
        }
    }

    pub fn all_names(&self) -> Vec<String> {
        self.raw.iter().cloned().chain(self.positive_sequence.clone()).collect()
    }

    fn derived(&self, frame: &PmuDataFrame) -> Option<Phasor> {
        self.positive_sequence.as_ref()?;
        let [a, b, c] = frame.phasors.get(..3)? else {
            return None;
        };
        Some(Phasor::from_rect(positive_sequence(a.to_rect(), b.to_rect(), c.to_rect())))
    }

    /// The RMS voltage the rate policy watches: the positive-sequence
    /// magnitude when configured, else the first channel's.
    pub fn vrms(&self, frame: &PmuDataFrame) -> f64 {
        self.derived(frame)
            .or_else(|| frame.phasors.first().copied())
            .map_or(0.0, |p| p.magnitude)
    }

    fn phasors(&self, frame: &PmuDataFrame) -> BTreeMap<String, Phasor> {
        let mut out: BTreeMap<String, Phasor> = frame
            .phasors
            .iter()
            .enumerate()
            .map(|(i, p)| (self.raw.get(i).cloned().unwrap_or_else(|| format!("PH{i}")), *p))
            .collect();
        if let (Some(name), Some(p)) = (&self.positive_sequence, self.derived(frame)) {
            out.insert(name.clone(), p);
        }
        out
    }
}

/// Builds the report for one frame carrying exactly the members in `spec`.
pub fn filter_report(frame: &PmuDataFrame, channels: &ChannelMap, spec: &FilterSpec, vo_id: &str, rr: u32) -> VoReport {
    let mut phasors = channels.phasors(frame);
    if let Some(selected) = &spec.channels {
        phasors.retain(|name, _| selected.contains(name));
    }
    VoReport {
        vo_id: vo_id.to_string(),
        ts: frame.timestamp,
        phasors,
        freq: spec.freq.then_some(frame.freq),
        rocof: spec.rocof.then_some(frame.rocof),
        status: spec.status.then(|| frame.status.into()),
        rr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridmesh_core::time::GpsTimestamp;
    use gridmesh_core::wire::Status;
    use std::f64::consts::PI;

    fn frame(n: usize) -> PmuDataFrame {
        PmuDataFrame {
            idcode: 31,
            timestamp: GpsTimestamp::new(20, 900_000),
            status: Status::OK,
            phasors: (0..n).map(|i| Phasor::new(1.0 + i as f64 * 1e-3, -2.0 * PI / 3.0 * i as f64)).collect(),
            freq: 50.0,
            rocof: 0.0,
        }
    }

    #[test]
    fn full_report_has_every_member() {
        let r = filter_report(&frame(3), &ChannelMap::three_phase(31), &FilterSpec::full(), "vo31", 1);
        assert_eq!(r.phasors.keys().collect::<Vec<_>>(), ["V31", "VA31", "VB31", "VC31"]);
        assert_eq!((r.freq, r.rocof), (Some(50.0), Some(0.0)));
        assert!(r.status.is_some());
        assert_eq!(r.ts, GpsTimestamp::new(20, 900_000));
        r.validate().unwrap();
    }

    #[test]
    fn phasors_only_omits_the_rest() {
        let r = filter_report(&frame(3), &ChannelMap::three_phase(31), &FilterSpec::phasors_only(), "vo31", 1);
        let text = String::from_utf8(r.to_json()).unwrap();
        assert!(!text.contains("freq") && !text.contains("rocof") && !text.contains("status"));
        assert_eq!(r.phasors.len(), 4);
    }

    #[test]
    fn six_channels_give_six_entries() {
        let channels = ChannelMap {
            raw: (1..=6).map(|i| format!("I{i}")).collect(),
            positive_sequence: None,
        };
        let r = filter_report(&frame(6), &channels, &FilterSpec::phasors_only(), "vo", 1);
        assert_eq!(r.phasors.len(), 6);
    }

    #[test]
    fn channel_selection_and_size() {
        let channels = ChannelMap::three_phase(31);
        let full = filter_report(&frame(3), &channels, &FilterSpec::full(), "vo31", 50);
        let slim = filter_report(
            &frame(3),
            &channels,
            &FilterSpec::phasors_only().with_channels(["V31"]),
            "vo31",
            50,
        );
        assert_eq!(slim.phasors.keys().collect::<Vec<_>>(), ["V31"]);
        let ratio = slim.encoded_len() as f64 / full.encoded_len() as f64;
        assert!(ratio <= 0.35, "{ratio}");
    }

    #[test]
    fn positive_sequence_drives_vrms() {
        let f = frame(3);
        let v = ChannelMap::three_phase(31).vrms(&f);
        assert!((v - 1.001).abs() < 1e-12, "{v}");
        let single = ChannelMap { raw: vec!["V".into()], positive_sequence: None };
        assert_eq!(single.vrms(&f), 1.0);
    }

    #[test]
    fn field_parsing() {
        assert_eq!(FilterSpec::parse_fields("phasors").unwrap(), FilterSpec::phasors_only());
        let s = FilterSpec::parse_fields("phasors, freq,status").unwrap();
        assert!(s.freq && s.status && !s.rocof);
        assert_eq!(FilterSpec::parse_fields("volts"), Err(FilterError::UnknownField("volts".into())));
        let c = ChannelMap::three_phase(71);
        assert!(FilterSpec::full().with_channels(["V71"]).check_channels(&c).is_ok());
        assert_eq!(
            FilterSpec::full().with_channels(["V31"]).check_channels(&c),
            Err(FilterError::UnknownChannel("V31".into()))
        );
        assert_eq!(FilterSpec::full().with_channels(Vec::<String>::new()).check_channels(&c), Err(FilterError::NoChannels));
    }
}
