//! Adaptive reporting-rate policy.
//!
//! The VO watches the RMS voltage of every incoming frame. A relative jump
//! between two consecutive inputs above `raise_threshold` moves the rate to
//! the top of the ladder at once. At each new second the rate steps one rung
//! down if the voltage has changed by less than `lower_threshold` since the
//! last emitted frame. A frame is emitted when its fraction-of-second lies on
//! the grid of the current rate, which keeps emissions from different VOs
//! time-aligned.

use gridmesh_core::time::{GpsTimestamp, TIME_BASE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// References below this magnitude (pu) disable the relative tests.
pub const DEGENERATE_VRMS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("thresholds must satisfy raise > lower > 0")]
    Thresholds,
    #[error("ladder must be non-empty, strictly increasing, and each rate must divide the top rate and the time base")]
    Ladder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub raise_threshold: f64,
    pub lower_threshold: f64,
    /// Allowed rates in frames/s, ascending.
    pub ladder: Vec<u32>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            raise_threshold: 0.02,
            lower_threshold: 0.001,
            ladder: vec![1, 10, 25, 50],
        }
    }
}

impl PolicyConfig {
    /// A single-rung ladder: every frame at `rate` is emitted.
    pub fn fixed(rate: u32) -> Self {
        Self {
            ladder: vec![rate],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.raise_threshold > self.lower_threshold && self.lower_threshold > 0.0) {
            return Err(PolicyError::Thresholds);
        }
        let top = *self.ladder.last().ok_or(PolicyError::Ladder)?;
        let increasing = self.ladder.windows(2).all(|w| w[0] < w[1]);
        let divides = self.ladder.iter().all(|&r| r > 0 && top % r == 0 && TIME_BASE % r == 0);
        if !increasing || !divides {
            return Err(PolicyError::Ladder);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cause {
    Escalation,
    StepDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateChange {
    pub at: GpsTimestamp,
    pub from: u32,
    pub to: u32,
    pub cause: Cause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Emit,
    Suppress,
    /// Timestamp not after the previous frame's; the frame is discarded.
    OutOfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub verdict: Verdict,
    pub change: Option<RateChange>,
    /// Rate in force after evaluating this frame.
    pub rr: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePolicyState {
    config: PolicyConfig,
    current_rr: u32,
    last_input_vrms: Option<f64>,
    last_output_vrms: Option<f64>,
    last_second_boundary: Option<u32>,
    last_timestamp: Option<GpsTimestamp>,
    out_of_order: u64,
}

fn relative_change(value: f64, reference: f64) -> Option<f64> {
    (reference.abs() >= DEGENERATE_VRMS).then(|| ((value - reference) / reference).abs())
}

impl RatePolicyState {
    /// Starts at the bottom of the ladder.
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Self {
            current_rr: config.ladder[0],
            config,
            last_input_vrms: None,
            last_output_vrms: None,
            last_second_boundary: None,
            last_timestamp: None,
            out_of_order: 0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn current_rr(&self) -> u32 {
        self.current_rr
    }

    pub fn last_input_vrms(&self) -> Option<f64> {
        self.last_input_vrms
    }

    pub fn last_output_vrms(&self) -> Option<f64> {
        self.last_output_vrms
    }

    pub fn last_second_boundary(&self) -> Option<u32> {
        self.last_second_boundary
    }

    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }

    fn top(&self) -> u32 {
        *self.config.ladder.last().expect("validated ladder")
    }

    fn lower_rung(&self) -> Option<u32> {
        let pos = self.config.ladder.iter().position(|&r| r == self.current_rr)?;
        pos.checked_sub(1).map(|p| self.config.ladder[p])
    }

    /// Feeds one frame's timestamp and RMS voltage through the policy.
    pub fn on_input(&mut self, ts: GpsTimestamp, vrms: f64) -> Outcome {
        if self.last_timestamp.is_some_and(|last| ts <= last) {
            self.out_of_order += 1;
            return Outcome {
                verdict: Verdict::OutOfOrder,
                change: None,
                rr: self.current_rr,
            };
        }
        self.last_timestamp = Some(ts);

        let (Some(last_in), Some(last_out), Some(boundary)) =
            (self.last_input_vrms, self.last_output_vrms, self.last_second_boundary)
        else {
            self.last_input_vrms = Some(vrms);
            self.last_output_vrms = Some(vrms);
            self.last_second_boundary = Some(ts.soc);
            return Outcome {
                verdict: Verdict::Emit,
                change: None,
                rr: self.current_rr,
            };
        };

        let mut change = None;
        if relative_change(vrms, last_in).is_some_and(|d| d > self.config.raise_threshold) && self.current_rr != self.top() {
            change = Some(RateChange {
                at: ts,
                from: self.current_rr,
                to: self.top(),
                cause: Cause::Escalation,
            });
            self.current_rr = self.top();
        }

        if ts.soc > boundary {
            self.last_second_boundary = Some(ts.soc);
            if change.is_none() {
                if let Some(lower) = self.lower_rung() {
                    if relative_change(vrms, last_out).is_some_and(|d| d < self.config.lower_threshold) {
                        change = Some(RateChange {
                            at: ts,
                            from: self.current_rr,
                            to: lower,
                            cause: Cause::StepDown,
                        });
                        self.current_rr = lower;
                    }
                }
            }
        }

        let emit = ts.frac % (ts.time_base / self.current_rr) == 0;
        if emit {
            self.last_output_vrms = Some(vrms);
        }
        self.last_input_vrms = Some(vrms);
        Outcome {
            verdict: if emit { Verdict::Emit } else { Verdict::Suppress },
            change,
            rr: self.current_rr,
        }
    }
}
