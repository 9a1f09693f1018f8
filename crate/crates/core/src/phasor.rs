use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// A phasor in polar form. The angle is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    #[serde(rename = "mag")]
    pub magnitude: f64,
    #[serde(rename = "ang")]
    pub angle: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

impl Phasor {
    /// Builds a phasor, folding negative magnitudes into the angle.
    pub fn new(magnitude: f64, angle: f64) -> Self {
        if magnitude < 0.0 {
            Self {
                magnitude: -magnitude,
                angle: normalize_angle(angle + PI),
            }
        } else {
            Self {
                magnitude,
                angle: normalize_angle(angle),
            }
        }
    }

    pub fn from_rect(z: Complex64) -> Self {
        Self::new(z.norm(), z.arg())
    }

    pub fn to_rect(&self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }

    pub fn is_finite(&self) -> bool {
        self.magnitude.is_finite() && self.angle.is_finite()
    }
}

impl From<Complex64> for Phasor {
    fn from(z: Complex64) -> Self {
        Phasor::from_rect(z)
    }
}

/// Positive-sequence component of a balanced-order three-phase set.
pub fn positive_sequence(a: Complex64, b: Complex64, c: Complex64) -> Complex64 {
    let op = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
    (a + op * b + op * op * c) / 3.0
}
