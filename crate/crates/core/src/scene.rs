//! JSON scene and solution documents.

use serde::{Deserialize, Serialize};

use crate::blocks::{BuildingBlockFamily, Family};
use crate::error::ConfigError;
use crate::geometry::{Density, SourceDomain, Vec3};
use crate::polygon::{ConvexPolygon, PlanarDensity};
use crate::refractor::{DensityGrid, MaxAffine, Mode, PlanarProblem, PolyBlockRefractor, SceneConfig, Screen, Target, TargetSpec};
use crate::snell::RefractionRatio;
use crate::solver::{family_for, SolveOptions, SolveReport};

/// Source density as written in a scene file: `"uniform"`, `{"uniform": c}`
/// or a polar table `{"table": [[angle, value], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensitySpec {
    Named(String),
    Uniform { uniform: f64 },
    Table { table: Vec<(f64, f64)> },
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec::Named("uniform".into())
    }
}

impl DensitySpec {
    pub fn to_density(&self) -> Result<Density, ConfigError> {
        match self {
            DensitySpec::Named(s) if s == "uniform" => Ok(Density::Uniform(1.0)),
            DensitySpec::Named(s) => Err(ConfigError::Invalid(format!("unknown density {s:?}"))),
            DensitySpec::Uniform { uniform } => Ok(Density::Uniform(*uniform)),
            DensitySpec::Table { table } => Ok(Density::Polar(table.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub axis: Vec3,
    /// Radians.
    pub half_angle: f64,
    #[serde(default)]
    pub density: DensitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetsSpec {
    Points(Vec<Target>),
    Grid { density_grid: DensityGrid },
}

/// Solver settings; the anchor is given either directly or as a fraction
/// of the admissible anchor interval of target 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bisection_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

/// Discretization schedule and anchor point for density targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralSpec {
    pub x0: Vec3,
    pub schedule: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceSpec>,
    pub targets: TargetsSpec,
    #[serde(default)]
    pub r0: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen: Option<Screen>,
    /// Convex polygon (`ma_bvp` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planar_density: Option<PlanarDensity>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub general: Option<GeneralSpec>,
}

fn default_dimension() -> usize {
    3
}

/// A scene file turned into library inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Cap(SceneConfig),
    Planar(PlanarProblem),
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(format!("scene file: {e}")))
    }

    pub fn problem(&self) -> Result<Problem, ConfigError> {
        let points = || match &self.targets {
            TargetsSpec::Points(p) => Ok(p.clone()),
            TargetsSpec::Grid { .. } => Err(ConfigError::Invalid("ma_bvp needs point targets".into())),
        };
        if self.mode == Mode::MaBvp {
            let verts = self.domain.clone().ok_or_else(|| ConfigError::Invalid("ma_bvp needs a domain polygon".into()))?;
            return Ok(Problem::Planar(PlanarProblem {
                domain: ConvexPolygon::new(verts)?,
                density: self.planar_density.unwrap_or_default(),
                targets: points()?,
            }));
        }
        let kappa = RefractionRatio::new(self.kappa.ok_or_else(|| ConfigError::Invalid("kappa is required".into()))?)?;
        let src = self.source.as_ref().ok_or_else(|| ConfigError::Invalid("source is required".into()))?;
        let domain = SourceDomain::new(src.axis, src.half_angle, src.density.to_density()?, self.dimension)?;
        let targets = match &self.targets {
            TargetsSpec::Points(p) => TargetSpec::Points(p.clone()),
            TargetsSpec::Grid { density_grid } => TargetSpec::DensityGrid(density_grid.clone()),
        };
        Ok(Problem::Cap(SceneConfig {
            mode: self.mode,
            kappa,
            domain,
            targets,
            screen: self.screen,
            r0: self.r0,
            tau: self.tau,
            delta: self.delta,
        }))
    }

    /// Solver options with the anchor resolved against `interval`.
    pub fn solve_options(&self, interval: Option<(f64, f64)>) -> Result<SolveOptions, ConfigError> {
        let s = &self.solver;
        let b1 = match (s.b1, s.b1_fraction, interval) {
            (Some(b), None, _) => b,
            (None, Some(f), Some((lo, hi))) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(ConfigError::Invalid(format!("b1_fraction must lie in (0, 1), got {f}")));
                }
                lo + f * (hi - lo)
            }
            (None, Some(_), None) => {
                return Err(ConfigError::Invalid("b1_fraction needs a bounded anchor interval; give b1".into()))
            }
            (Some(_), Some(_), _) => return Err(ConfigError::Invalid("give either b1 or b1_fraction, not both".into())),
            (None, None, _) => return Err(ConfigError::Invalid("an explicit anchor (solver.b1 or solver.b1_fraction) is required".into())),
        };
        Ok(self.options_with(b1))
    }

    /// Solver options with anchor `b1` and the file's overrides.
    pub fn options_with(&self, b1: f64) -> SolveOptions {
        let s = &self.solver;
        let mut o = SolveOptions::with_anchor(b1);
        if let Some(v) = s.mass_tol {
            o.mass_tol = v;
        }
        if let Some(v) = s.max_iters {
            o.max_iters = v;
        }
        if let Some(v) = s.bisection_tol {
            o.bisection_tol = v;
        }
        if let Some(v) = s.seed {
            o.seed = v;
        }
        if let Some(v) = s.resolution {
            o.resolution = v;
        }
        o
    }
}

/// Anchor interval of the first target of a point scene.
pub fn anchor_interval(scene: &SceneConfig) -> Result<(f64, f64), ConfigError> {
    let fam = family_for(scene)?;
    let p = match &scene.targets {
        TargetSpec::Points(t) => t.first().map(|t| t.point),
        TargetSpec::DensityGrid(_) => None,
    }
    .ok_or_else(|| ConfigError::Invalid("no point targets".into()))?;
    let p = if scene.mode.is_far() { p.normalized().unwrap_or(p) } else { p };
    let (lo, hi) = fam.anchor_interval(p);
    Ok((lo, hi))
}

/// Stage summary of a general-measure solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub n: usize,
    pub rho_x0: f64,
    pub sup_diff_prev: Option<f64>,
    pub max_rel_error: f64,
}

/// Everything needed to rebuild the solved surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub scene: SceneFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    /// Target points (unit directions in the far field, slopes for `ma_bvp`).
    pub targets: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub params: Vec<f64>,
    pub masses: Vec<f64>,
    pub iterations: usize,
    pub measure_evaluations: usize,
    pub max_rel_error: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageSummary>,
}

impl Solution {
    pub fn from_report(scene: &SceneFile, family: Option<Family>, targets: Vec<Vec3>, report: &SolveReport) -> Self {
        Solution {
            scene: scene.clone(),
            family,
            targets,
            weights: report.weights.clone(),
            params: report.params.clone(),
            masses: report.masses.clone(),
            iterations: report.iterations,
            measure_evaluations: report.measure_evaluations,
            max_rel_error: report.max_rel_error(),
            stages: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(format!("solution file: {e}")))
    }

    pub fn refractor(&self) -> Result<PolyBlockRefractor, ConfigError> {
        let Problem::Cap(scene) = self.scene.problem()? else {
            return Err(ConfigError::Invalid("ma_bvp solutions have no cap refractor".into()));
        };
        let fam = self.family.clone().ok_or_else(|| ConfigError::Invalid("solution has no family".into()))?;
        PolyBlockRefractor::new(fam, self.targets.clone(), self.params.clone(), scene.domain)
    }

    pub fn max_affine(&self) -> Result<MaxAffine, ConfigError> {
        let Problem::Planar(p) = self.scene.problem()? else {
            return Err(ConfigError::Invalid("not an ma_bvp solution".into()));
        };
        Ok(MaxAffine { domain: p.domain, density: p.density, slopes: self.targets.clone(), params: self.params.clone() })
    }
}
