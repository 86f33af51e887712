use thiserror::Error;

use crate::geometry::Vec3;

/// Rejected scene or option values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("H1 violated: {detail} (witness x = {x:?}, P = {p:?})")]
    H1 { detail: String, x: Option<Vec3>, p: Option<Vec3> },
    #[error("H2 violated: {detail} (witness x = {x:?}, P = {p:?})")]
    H2 { detail: String, x: Option<Vec3>, p: Option<Vec3> },
    #[error("H3 violated: {detail} (witness x = {x:?}, P = {p:?})")]
    H3 { detail: String, x: Option<Vec3>, p: Option<Vec3> },
    #[error("H4 violated: {detail} (witness x = {x:?}, P = {p:?})")]
    H4 { detail: String, x: Option<Vec3>, p: Option<Vec3> },
    #[error("far-field admissibility violated: {detail} (witness x = {x:?}, m = {m:?})")]
    FarField { detail: String, x: Option<Vec3>, m: Option<Vec3> },
    #[error("conservation violated: sum of weights {weights} differs from source energy {energy}")]
    Conservation { weights: f64, energy: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    /// Short tag of the violated assumption, if any.
    pub fn assumption(&self) -> Option<&'static str> {
        match self {
            ConfigError::H1 { .. } => Some("H1"),
            ConfigError::H2 { .. } => Some("H2"),
            ConfigError::H3 { .. } => Some("H3"),
            ConfigError::H4 { .. } => Some("H4"),
            _ => None,
        }
    }
}
