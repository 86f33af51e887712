//! Vector form of Snell's law, `x - kappa m = lambda nu`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::geometry::Vec3;

/// Ratio `kappa = n2 / n1` of refractive indices. Never equal to one.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RefractionRatio(f64);

impl RefractionRatio {
    pub fn new(kappa: f64) -> Result<Self, ConfigError> {
        if !(kappa.is_finite() && kappa > 0.0) || kappa == 1.0 {
            return Err(ConfigError::Invalid(format!("kappa must be positive and different from 1, got {kappa}")));
        }
        Ok(RefractionRatio(kappa))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// True when medium II is less dense (`kappa < 1`).
    pub fn is_lt1(self) -> bool {
        self.0 < 1.0
    }
}

impl TryFrom<f64> for RefractionRatio {
    type Error = ConfigError;
    fn try_from(k: f64) -> Result<Self, ConfigError> {
        RefractionRatio::new(k)
    }
}

impl From<RefractionRatio> for f64 {
    fn from(k: RefractionRatio) -> f64 {
        k.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RefractError {
    #[error("total internal reflection")]
    TotalInternalReflection,
    #[error("ray does not meet the interface from the incident side (x . nu <= 0)")]
    NotIncident,
}

/// `Phi(t) = t - kappa sqrt(1 - kappa^-2 (1 - t^2))`, or `None` past the critical angle.
pub fn phi(t: f64, kappa: RefractionRatio) -> Option<f64> {
    let k = kappa.get();
    let rad = 1.0 - (1.0 - t * t) / (k * k);
    if rad < 0.0 {
        None
    } else {
        Some(t - k * rad.sqrt())
    }
}

/// Refracted unit direction for incident `x` through a surface with unit
/// normal `nu` pointing into medium II.
pub fn refract(x: Vec3, nu: Vec3, kappa: RefractionRatio) -> Result<Vec3, RefractError> {
    let t = x.dot(nu);
    if !(t > 0.0) {
        return Err(RefractError::NotIncident);
    }
    let p = phi(t, kappa).ok_or(RefractError::TotalInternalReflection)?;
    let m = (x - nu * p) / kappa.get();
    // renormalize away the last ulps
    Ok(m / m.norm())
}

/// Whether some interface can send direction `x` into direction `m`.
pub fn can_refract_into(x: Vec3, m: Vec3, kappa: RefractionRatio) -> bool {
    let k = kappa.get();
    let c = m.dot(x);
    if k < 1.0 { c >= k } else { c >= 1.0 / k }
}
