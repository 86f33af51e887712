//! Scenes, envelopes of blocks, refractor maps and measures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{BuildingBlockFamily, EnvelopeKind, Family};
use crate::error::ConfigError;
use crate::geometry::{angle_between, rotate, QuadratureRule, SourceDomain, Vec3};
use crate::polygon::{max_affine_cell, ConvexPolygon, PlanarDensity};
use crate::snell::RefractionRatio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NearLt1,
    NearGt1,
    FarLt1,
    FarGt1,
    MaBvp,
}

impl Mode {
    pub fn is_near(self) -> bool {
        matches!(self, Mode::NearLt1 | Mode::NearGt1)
    }

    pub fn is_far(self) -> bool {
        matches!(self, Mode::FarLt1 | Mode::FarGt1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub point: Vec3,
    pub weight: f64,
}

/// Piecewise constant target density on a parallelogram grid. Cell `(i, j)`
/// spans `origin + [i, i+1] u + [j, j+1] v`; `values` is row-major in `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub nu: usize,
    pub nv: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.nu == 0 || self.nv == 0 || self.values.len() != self.nu * self.nv {
            return Err(ConfigError::Invalid(format!(
                "density grid needs nu*nv = {} values, got {}",
                self.nu * self.nv,
                self.values.len()
            )));
        }
        if self.u.cross(self.v).norm() <= 0.0 {
            return Err(ConfigError::Invalid("density grid cell edges are degenerate".into()));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ConfigError::Invalid("density grid values must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn cell_area(&self) -> f64 {
        self.u.cross(self.v).norm()
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec3 {
        self.origin + self.u * (i as f64 + 0.5) + self.v * (j as f64 + 0.5)
    }

    /// Cells with positive mass as `(center, mass, (i, j))`.
    pub fn cells(&self) -> Vec<(Vec3, f64, (usize, usize))> {
        let a = self.cell_area();
        let mut out = Vec::new();
        for j in 0..self.nv {
            for i in 0..self.nu {
                let m = self.values[j * self.nu + i] * a;
                if m > 0.0 {
                    out.push((self.cell_center(i, j), m, (i, j)));
                }
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    /// Corners of all cells with positive mass (closure of the support).
    pub fn support_corners(&self) -> Vec<Vec3> {
        let mut out = Vec::new();
        for (_, _, (i, j)) in self.cells() {
            let o = self.origin + self.u * i as f64 + self.v * j as f64;
            out.extend([o, o + self.u, o + self.v, o + self.u + self.v]);
        }
        out
    }

    /// Rescales values so the total mass equals `total`.
    pub fn normalized_to(mut self, total: f64) -> Self {
        let m = self.total_mass();
        if m > 0.0 {
            for v in &mut self.values {
                *v *= total / m;
            }
        }
        self
    }

    /// Uniform density on the disk of radius `radius` about `center` in the
    /// plane spanned by unit vectors `e1`, `e2`, on an `n x n` grid.
    pub fn uniform_disk(center: Vec3, e1: Vec3, e2: Vec3, radius: f64, n: usize, total: f64) -> Self {
        let h = 2.0 * radius / n as f64;
        let origin = center - e1 * radius - e2 * radius;
        let mut values = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let (s, t) = ((i as f64 + 0.5) * h - radius, (j as f64 + 0.5) * h - radius);
                if s * s + t * t <= radius * radius {
                    values[j * n + i] = 1.0;
                }
            }
        }
        DensityGrid { origin, u: e1 * h, v: e2 * h, nu: n, nv: n, values }.normalized_to(total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Points(Vec<Target>),
    DensityGrid(DensityGrid),
}

/// Receiving surface for near-field targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Screen {
    /// `{X : normal . (X - point) = 0}`.
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Screen {
    /// Horizontal plane `x_n = c` (`z` in 3D, `y` in 2D).
    pub fn plane_at(c: f64, dimension: usize) -> Screen {
        let normal = if dimension == 2 { Vec3::E2 } else { Vec3::E3 };
        Screen::Plane { point: normal * c, normal }
    }

    pub fn distance(&self, x: Vec3) -> f64 {
        match *self {
            Screen::Plane { point, normal } => {
                let n = normal.normalized().unwrap_or(Vec3::E3);
                n.dot(x - point).abs()
            }
            Screen::Sphere { center, radius } => ((x - center).norm() - radius).abs(),
        }
    }

    /// First forward intersection of the line `o + s d`, `s > 0`.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<Vec3> {
        match *self {
            Screen::Plane { point, normal } => {
                let den = normal.dot(d);
                if den == 0.0 {
                    return None;
                }
                let s = normal.dot(point - o) / den;
                (s > 0.0).then(|| o + d * s)
            }
            Screen::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm2() - radius * radius;
                let disc = b * b - c * d.norm2();
                if disc < 0.0 {
                    return None;
                }
                let r = disc.sqrt();
                let dd = d.norm2();
                let s1 = (-b - r) / dd;
                let s2 = (-b + r) / dd;
                let s = if s1 > 0.0 { s1 } else { s2 };
                (s > 0.0).then(|| o + d * s)
            }
        }
    }

    /// Whether the truncated cone `{t x : x in domain, 0 <= t <= r0}` stays
    /// strictly on the source side of the screen.
    pub fn clear_of_cone(&self, domain: &SourceDomain, r0: f64) -> Result<(), Vec3> {
        match *self {
            Screen::Plane { point, normal } => {
                let mut n = normal.normalized().unwrap_or(Vec3::E3);
                let mut c = n.dot(point);
                if c < 0.0 {
                    n = -n;
                    c = -c;
                }
                // max of n.x over the cap
                let (mn, xw) = domain.min_dot(-n);
                let max_dot = -mn;
                if c > 0.0 && r0 * max_dot.max(0.0) < c {
                    Ok(())
                } else {
                    Err(xw * r0)
                }
            }
            Screen::Sphere { center, radius } => {
                let (mn, xw) = domain.min_dot(center);
                let far = (r0 * r0 - 2.0 * r0 * mn + center.norm2()).sqrt();
                if center.norm() < radius && far < radius {
                    Ok(())
                } else {
                    Err(xw * r0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub mode: Mode,
    pub kappa: RefractionRatio,
    pub domain: SourceDomain,
    pub targets: TargetSpec,
    pub screen: Option<Screen>,
    pub r0: f64,
    pub tau: f64,
    /// Far-field `kappa > 1` margin in `x . m >= 1/kappa + delta`.
    pub delta: Option<f64>,
}

impl SceneConfig {
    pub fn point_targets(&self) -> Option<&[Target]> {
        match &self.targets {
            TargetSpec::Points(t) => Some(t),
            TargetSpec::DensityGrid(_) => None,
        }
    }

    /// Points spanning the closure of the target set.
    pub fn support_points(&self) -> Vec<Vec3> {
        match &self.targets {
            TargetSpec::Points(t) => t.iter().filter(|t| t.weight > 0.0).map(|t| t.point).collect(),
            TargetSpec::DensityGrid(g) => g.support_corners(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        match &self.targets {
            TargetSpec::Points(t) => t.iter().map(|t| t.weight).sum(),
            TargetSpec::DensityGrid(g) => g.total_mass(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub mode: Mode,
    pub targets: usize,
    pub source_energy: f64,
    pub target_weight: f64,
    /// Smallest slack in the inner-product assumption (H1/H3) or far-field admissibility.
    pub inner_product_margin: f64,
    /// Upper bound on `r0` from H2/H4 (near field only).
    pub r0_bound: Option<f64>,
    /// `Some(true)` when the screen was checked against the cone `Q_r0`.
    pub ray_uniqueness: Option<bool>,
}

const CONSERVATION_TOL: f64 = 1e-9;

pub fn validate_scene(scene: &SceneConfig) -> Result<ValidationReport, ConfigError> {
    let k = scene.kappa.get();
    let dom = &scene.domain;
    let energy = dom.total_energy();
    let weight = scene.total_weight();
    if let TargetSpec::Points(t) = &scene.targets {
        if t.is_empty() {
            return Err(ConfigError::Invalid("no targets".into()));
        }
        if let Some(bad) = t.iter().find(|t| !(t.weight > 0.0 && t.weight.is_finite()) || !t.point.is_finite()) {
            return Err(ConfigError::Invalid(format!("target weights must be positive and finite: {bad:?}")));
        }
    }
    if let TargetSpec::DensityGrid(g) = &scene.targets {
        g.check()?;
    }
    if !((weight - energy).abs() <= CONSERVATION_TOL * energy) {
        return Err(ConfigError::Conservation { weights: weight, energy });
    }
    let pts = scene.support_points();
    if pts.iter().any(|p| p.norm() == 0.0) {
        return Err(ConfigError::Invalid("a target sits at the source".into()));
    }
    if dom.dimension() == 2 && pts.iter().any(|p| p.z != 0.0) {
        return Err(ConfigError::Invalid("2D scenes need targets with z = 0".into()));
    }
    let mut report = ValidationReport {
        mode: scene.mode,
        targets: pts.len(),
        source_energy: energy,
        target_weight: weight,
        inner_product_margin: f64::INFINITY,
        r0_bound: None,
        ray_uniqueness: None,
    };
    match scene.mode {
        Mode::NearLt1 | Mode::NearGt1 => {
            let lt1 = scene.mode == Mode::NearLt1;
            if lt1 != (k < 1.0) {
                return Err(ConfigError::Invalid(format!("mode {:?} does not match kappa = {k}", scene.mode)));
            }
            let tau = scene.tau;
            let (tau_hi, lo) = if lt1 { (1.0 - k, k + tau) } else { (1.0 - 1.0 / k, 1.0 / k + tau) };
            let wrap = |detail: String, x: Option<Vec3>, p: Option<Vec3>, which: u8| match which {
                1 => ConfigError::H1 { detail, x, p },
                2 => ConfigError::H2 { detail, x, p },
                3 => ConfigError::H3 { detail, x, p },
                _ => ConfigError::H4 { detail, x, p },
            };
            let (hi_tag, lo_tag) = if lt1 { (1, 2) } else { (3, 4) };
            if !(tau > 0.0 && tau < tau_hi) {
                return Err(wrap(format!("tau = {tau} must lie in (0, {tau_hi})"), None, None, hi_tag));
            }
            for p in &pts {
                let (v, x) = dom.min_dot(*p);
                let margin = v / p.norm() - lo;
                report.inner_product_margin = report.inner_product_margin.min(margin);
                if margin < 0.0 {
                    return Err(wrap(
                        format!("min x.P/|P| = {} is below {lo}", v / p.norm()),
                        Some(x),
                        Some(*p),
                        hi_tag,
                    ));
                }
            }
            let dist = pts.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
            let r0 = scene.r0;
            let bound = if lt1 { tau * dist / (1.0 + k) } else { k * k * tau * tau / (4.0 * (k - 1.0).powi(2)) * dist };
            report.r0_bound = Some(bound);
            let ok = if lt1 { r0 > 0.0 && r0 <= bound * (1.0 + 1e-12) } else { r0 > 0.0 && r0 < bound };
            if !ok {
                let rel = if lt1 { "<=" } else { "<" };
                return Err(wrap(format!("r0 = {r0} must satisfy 0 < r0 {rel} {bound}"), None, None, lo_tag));
            }
            if let Some(screen) = &scene.screen {
                for p in &pts {
                    if screen.distance(*p) > 1e-9 * p.norm() {
                        return Err(ConfigError::Invalid(format!("target {p:?} is not on the screen")));
                    }
                }
                if let Err(w) = screen.clear_of_cone(dom, r0) {
                    return Err(wrap(
                        format!("screen meets the cone of radius r0 = {r0}; rays may cross the target twice"),
                        Some(w),
                        None,
                        lo_tag,
                    ));
                }
                report.ray_uniqueness = Some(true);
            }
        }
        Mode::FarLt1 | Mode::FarGt1 => {
            let dirs: Vec<Vec3> = pts.iter().map(|p| p.normalized().unwrap()).collect();
            let lim = if scene.mode == Mode::FarLt1 {
                if k >= 1.0 {
                    return Err(ConfigError::Invalid("far_lt1 needs kappa < 1".into()));
                }
                k
            } else {
                if k <= 1.0 {
                    return Err(ConfigError::Invalid("far_gt1 needs kappa > 1".into()));
                }
                let d = scene.delta.ok_or_else(|| ConfigError::Invalid("far_gt1 needs delta".into()))?;
                crate::blocks::HyperboloidFamily::new(scene.kappa, d)?;
                1.0 / k + d
            };
            for m in &dirs {
                let (v, x) = dom.min_dot(*m);
                report.inner_product_margin = report.inner_product_margin.min(v - lim);
                if v < lim {
                    return Err(ConfigError::FarField {
                        detail: format!("min x.m = {v} below {lim}"),
                        x: Some(x),
                        m: Some(*m),
                    });
                }
            }
        }
        Mode::MaBvp => {
            return Err(ConfigError::Invalid("ma_bvp scenes use a planar problem, not a source cap".into()));
        }
    }
    Ok(report)
}

/// Envelope `rho(x) = min_i` (or `max_i`) `h(x; P_i, b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBlockRefractor {
    pub family: Family,
    pub targets: Vec<Vec3>,
    pub params: Vec<f64>,
    pub domain: SourceDomain,
}

pub const DEFAULT_TIE_TOL: f64 = 1e-9;

impl PolyBlockRefractor {
    pub fn new(family: Family, targets: Vec<Vec3>, params: Vec<f64>, domain: SourceDomain) -> Result<Self, ConfigError> {
        if targets.is_empty() || targets.len() != params.len() {
            return Err(ConfigError::Invalid(format!(
                "need one parameter per target ({} targets, {} parameters)",
                targets.len(),
                params.len()
            )));
        }
        Ok(PolyBlockRefractor { family, targets, params, domain })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn envelope(&self) -> EnvelopeKind {
        self.family.envelope()
    }

    pub fn block(&self, x: Vec3, i: usize) -> Option<f64> {
        self.family.evaluate(x, self.targets[i], self.params[i]).ok()
    }

    /// Active block (smallest index on exact ties) and envelope value.
    pub fn active(&self, x: Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.len() {
            if let Some(v) = self.block(x, i) {
                match best {
                    Some((_, b)) if !self.family.beats(v, b) => {}
                    _ => best = Some((i, v)),
                }
            }
        }
        best
    }

    /// Envelope value; NaN if no block is admissible at `x`.
    pub fn radius(&self, x: Vec3) -> f64 {
        self.active(x).map_or(f64::NAN, |a| a.1)
    }

    /// All blocks within `tie_tol` (relative) of the envelope at `x`.
    pub fn refractor_map(&self, x: Vec3, tie_tol: f64) -> Vec<usize> {
        let Some((_, rho)) = self.active(x) else {
            return Vec::new();
        };
        (0..self.len())
            .filter(|&i| self.block(x, i).is_some_and(|v| (v - rho).abs() <= tie_tol * rho.abs()))
            .collect()
    }

    /// Node-by-node assignment of energy; every node goes to exactly one target.
    pub fn refractor_measure(&self, rule: &QuadratureRule) -> Vec<f64> {
        let owners: Vec<usize> = rule
            .nodes
            .par_iter()
            .map(|x| self.active(*x).map_or(0, |a| a.0))
            .collect();
        let mut m = vec![0.0; self.len()];
        for ((x, w), o) in rule.nodes.iter().zip(&rule.weights).zip(owners) {
            m[o] += w * self.domain.density_at(*x);
        }
        m
    }

    /// Unit normal of the active block at `x`.
    pub fn normal(&self, x: Vec3) -> Option<Vec3> {
        let (i, _) = self.active(x)?;
        self.family.normal(x, self.targets[i], self.params[i])
    }

    /// Largest observed `|rho(x) - rho(y)| / angle(x, y)` over random pairs,
    /// half of them close together so the local slope is resolved.
    pub fn lipschitz_probe(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = &self.domain;
        let mut best: f64 = 0.0;
        for s in 0..samples {
            let x = dom.sample_uniform(&mut rng);
            let y = if s % 2 == 0 {
                dom.sample_uniform(&mut rng)
            } else {
                let ang = dom.half_angle() * 10f64.powf(-1.0 - 3.0 * rng.random::<f64>());
                let axis = if dom.dimension() == 2 {
                    dom.frame().1
                } else {
                    let (e1, e2) = crate::geometry::orthonormal_frame(x);
                    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                    e1 * phi.cos() + e2 * phi.sin()
                };
                rotate(x, axis, ang)
            };
            if !dom.contains(y) {
                continue;
            }
            let d = angle_between(x, y);
            if d <= 0.0 {
                continue;
            }
            let (rx, ry) = (self.radius(x), self.radius(y));
            if rx.is_finite() && ry.is_finite() {
                best = best.max((rx - ry).abs() / d);
            }
        }
        best
    }

    /// Admissibility on the nodes of `rule`: finite positive radius, at least
    /// `1e-9 r0`, inside the cone of radius `r0` for near-field refractors and
    /// every block admissible for `kappa > 1`.
    pub fn check(&self, rule: &QuadratureRule, r0: Option<f64>, near_gt1: bool) -> Result<(), ConfigError> {
        for x in &rule.nodes {
            let rho = self.radius(*x);
            if !(rho.is_finite() && rho > 0.0) {
                return Err(ConfigError::Invalid(format!("radius {rho} at direction {x:?}")));
            }
            if let Some(r0) = r0 {
                if rho < 1e-9 * r0 {
                    return Err(ConfigError::Invalid(format!("degenerate radius {rho} < 1e-9 r0 at {x:?}")));
                }
                if rho > r0 {
                    return Err(ConfigError::Invalid(format!("surface leaves the cone: radius {rho} > r0 = {r0}")));
                }
            }
            if near_gt1 {
                if let Some(i) = (0..self.len()).find(|&i| self.block(*x, i).is_none()) {
                    return Err(ConfigError::Invalid(format!("direction {x:?} outside the aperture of block {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Planar source for the second boundary value problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarProblem {
    pub domain: ConvexPolygon,
    pub density: PlanarDensity,
    pub targets: Vec<Target>,
}

impl PlanarProblem {
    pub fn validate(&self) -> Result<f64, ConfigError> {
        self.density.check_positive(&self.domain)?;
        if self.targets.is_empty() {
            return Err(ConfigError::Invalid("no targets".into()));
        }
        if self.targets.iter().any(|t| !(t.weight > 0.0) || t.point.z != 0.0 || !t.point.is_finite()) {
            return Err(ConfigError::Invalid("planar targets need positive weights and z = 0".into()));
        }
        let energy = self.density.integrate(self.domain.vertices());
        let w: f64 = self.targets.iter().map(|t| t.weight).sum();
        if !((w - energy).abs() <= CONSERVATION_TOL * energy) {
            return Err(ConfigError::Conservation { weights: w, energy });
        }
        Ok(energy)
    }
}

/// `u(x) = max_i (x . p_i + b_i)` on a convex polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxAffine {
    pub domain: ConvexPolygon,
    pub density: PlanarDensity,
    pub slopes: Vec<Vec3>,
    pub params: Vec<f64>,
}

impl MaxAffine {
    pub fn value(&self, x: Vec3) -> f64 {
        self.slopes
            .iter()
            .zip(&self.params)
            .map(|(p, b)| x.x * p.x + x.y * p.y + b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Slopes in the subdifferential at `x` (within `tol`).
    pub fn subdifferential(&self, x: Vec3, tol: f64) -> Vec<usize> {
        let u = self.value(x);
        (0..self.slopes.len())
            .filter(|&i| (x.x * self.slopes[i].x + x.y * self.slopes[i].y + self.params[i] - u).abs() <= tol)
            .collect()
    }

    pub fn cell(&self, i: usize) -> Vec<Vec3> {
        max_affine_cell(&self.domain, &self.slopes, &self.params, i)
    }

    /// Energy of every cell, exact for the linear densities supported.
    pub fn masses(&self) -> Vec<f64> {
        (0..self.slopes.len()).map(|i| self.density.integrate(&self.cell(i))).collect()
    }
}
