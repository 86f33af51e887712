//! One-parameter families of building blocks `h(x; y, t)`.
//!
//! A refractor is the lower (MIN) or upper (MAX) envelope of finitely many
//! blocks, one per target `y`. The solver only needs to know, per family,
//! in which direction `t` makes a block grab more energy and a parameter
//! value at which a block loses against the anchor block everywhere.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::{SourceDomain, Vec3};
use crate::ovals::{CartesianOval, OutsideAperture};
use crate::snell::RefractionRatio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvelopeKind {
    Min,
    Max,
}

/// Direction in which block values move as the parameter increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monotone {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalEnd {
    Lower,
    Upper,
}

/// What the blocks do at the distinguished end of the parameter interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitKind {
    /// Blocks shrink uniformly to zero.
    Zero,
    /// Blocks blow up uniformly (MAX envelopes solved through `e^{-h}`).
    Infinity,
}

pub trait BuildingBlockFamily {
    fn envelope(&self) -> EnvelopeKind;
    fn monotone(&self) -> Monotone;
    fn limit_end(&self) -> (IntervalEnd, LimitKind);
    /// Open parameter interval for target `y`; ends may be infinite.
    fn param_interval(&self, y: Vec3) -> (f64, f64);
    fn evaluate(&self, x: Vec3, y: Vec3, t: f64) -> Result<f64, OutsideAperture>;
    /// Parameter of the block for `y` that takes the value `value` at `x`.
    fn param_through(&self, x: Vec3, y: Vec3, value: f64) -> f64;
    /// Unit surface normal with `x . nu > 0`; `None` for non-optical families.
    fn normal(&self, x: Vec3, y: Vec3, t: f64) -> Option<Vec3>;
    fn kappa(&self) -> Option<RefractionRatio>;
    /// Interval of anchor values `t_1` for which the existence argument applies.
    fn anchor_interval(&self, y1: Vec3) -> (f64, f64) {
        self.param_interval(y1)
    }
    /// A parameter for target `y` whose block is beaten by the anchor block
    /// `(y1, t1)` at every point of the domain.
    fn dominated_start(&self, y: Vec3, y1: Vec3, t1: f64) -> f64;

    /// `+1` when increasing the parameter gives the block more energy, else `-1`.
    fn gain_direction(&self) -> f64 {
        match (self.envelope(), self.monotone()) {
            (EnvelopeKind::Min, Monotone::Increasing) | (EnvelopeKind::Max, Monotone::Decreasing) => -1.0,
            _ => 1.0,
        }
    }

    /// True when `a` is strictly better than `b` for this envelope.
    fn beats(&self, a: f64, b: f64) -> bool {
        match self.envelope() {
            EnvelopeKind::Min => a < b,
            EnvelopeKind::Max => a > b,
        }
    }
}

/// Near-field Cartesian ovals, parameter `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvalFamily {
    pub kappa: RefractionRatio,
    pub r0: f64,
    /// `sup |P|` over the target set.
    pub sup_target: f64,
}

impl OvalFamily {
    pub fn new(kappa: RefractionRatio, r0: f64, targets: &[Vec3]) -> Result<Self, ConfigError> {
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(ConfigError::Invalid(format!("r0 must be positive, got {r0}")));
        }
        let sup_target = targets.iter().map(|p| p.norm()).fold(0.0, f64::max);
        if !(sup_target > 0.0) {
            return Err(ConfigError::Invalid("targets must not sit at the source".into()));
        }
        Ok(OvalFamily { kappa, r0, sup_target })
    }

    /// `sigma = (kappa-1) r0^4 / (8 sup|P|^3)` for `kappa > 1`.
    pub fn sigma(&self) -> f64 {
        let k = self.kappa.get();
        (k - 1.0) * self.r0.powi(4) / (8.0 * self.sup_target.powi(3))
    }

    pub fn oval(&self, y: Vec3, t: f64) -> Result<CartesianOval, ConfigError> {
        CartesianOval::new(y, t, self.kappa)
    }
}

impl BuildingBlockFamily for OvalFamily {
    fn envelope(&self) -> EnvelopeKind {
        if self.kappa.is_lt1() { EnvelopeKind::Min } else { EnvelopeKind::Max }
    }

    fn monotone(&self) -> Monotone {
        if self.kappa.is_lt1() { Monotone::Increasing } else { Monotone::Decreasing }
    }

    fn limit_end(&self) -> (IntervalEnd, LimitKind) {
        if self.kappa.is_lt1() {
            (IntervalEnd::Lower, LimitKind::Zero)
        } else {
            (IntervalEnd::Upper, LimitKind::Zero)
        }
    }

    fn param_interval(&self, y: Vec3) -> (f64, f64) {
        let k = self.kappa.get();
        let p = y.norm();
        if k < 1.0 {
            (k * p, k * p + (1.0 - k) * self.r0)
        } else {
            (k * p - (k - 1.0) * self.r0 * self.r0 / (2.0 * self.sup_target), k * p)
        }
    }

    fn evaluate(&self, x: Vec3, y: Vec3, t: f64) -> Result<f64, OutsideAperture> {
        let oval = CartesianOval::new(y, t, self.kappa).map_err(|_| OutsideAperture)?;
        oval.radius(x)
    }

    fn param_through(&self, x: Vec3, y: Vec3, value: f64) -> f64 {
        CartesianOval::param_through(y, self.kappa, x, value)
    }

    fn normal(&self, x: Vec3, y: Vec3, t: f64) -> Option<Vec3> {
        CartesianOval::new(y, t, self.kappa).ok()?.normal(x).ok()
    }

    fn kappa(&self) -> Option<RefractionRatio> {
        Some(self.kappa)
    }

    fn anchor_interval(&self, y1: Vec3) -> (f64, f64) {
        let k = self.kappa.get();
        let p = y1.norm();
        if k < 1.0 {
            (k * p, k * p + self.r0 * (1.0 - k).powi(2) / (1.0 + k))
        } else {
            (k * p - self.sigma(), k * p)
        }
    }

    fn dominated_start(&self, y: Vec3, y1: Vec3, t1: f64) -> f64 {
        let k = self.kappa.get();
        if k < 1.0 {
            // t1 = k|P1| + s (1-k)^2/(1+k); every other block starts at k|P| + s (1-k)
            let s = (t1 - k * y1.norm()) * (1.0 + k) / (1.0 - k).powi(2);
            k * y.norm() + s * (1.0 - k)
        } else {
            // max of the new block below min of the anchor block:
            // (k|P| - t)(k|P| + t)/(k^2 - 1) <= eta^2 with eta = (k|P1| - t1)/(k - 1)
            let eta = (k * y1.norm() - t1) / (k - 1.0);
            let kp = k * y.norm();
            let e2 = eta * eta * (k * k - 1.0);
            let s = e2 / (kp + (kp * kp - e2).max(0.0).sqrt());
            kp - 0.5 * s
        }
    }
}

impl OvalFamily {
    /// Lower bound on every solved parameter for `kappa > 1` anchored at `t1`:
    /// `k|P| - eps (k-1) r0^2 / (2 sup|P|)` with `t1 = k|P1| - eps^2 sigma`.
    pub fn gt1_lower_bound(&self, y: Vec3, y1: Vec3, t1: f64) -> f64 {
        let k = self.kappa.get();
        let eps = ((k * y1.norm() - t1) / self.sigma()).max(0.0).sqrt();
        k * y.norm() - eps * (k - 1.0) * self.r0 * self.r0 / (2.0 * self.sup_target)
    }
}

/// Far-field ellipsoids `b / (1 - kappa x.m)`, `kappa < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidFamily {
    pub kappa: RefractionRatio,
}

impl EllipsoidFamily {
    pub fn new(kappa: RefractionRatio) -> Result<Self, ConfigError> {
        if !kappa.is_lt1() {
            return Err(ConfigError::Invalid("ellipsoids need kappa < 1".into()));
        }
        Ok(EllipsoidFamily { kappa })
    }

    /// Checks `x . m >= kappa` on the closed domain for every direction `m`.
    pub fn check_admissible(&self, domain: &SourceDomain, dirs: &[Vec3]) -> Result<(), ConfigError> {
        let k = self.kappa.get();
        for m in dirs {
            let (v, x) = domain.min_dot(*m);
            if v < k {
                return Err(ConfigError::FarField {
                    detail: format!("min x.m = {v} below kappa = {k}"),
                    x: Some(x),
                    m: Some(*m),
                });
            }
        }
        Ok(())
    }
}

impl BuildingBlockFamily for EllipsoidFamily {
    fn envelope(&self) -> EnvelopeKind {
        EnvelopeKind::Min
    }
    fn monotone(&self) -> Monotone {
        Monotone::Increasing
    }
    fn limit_end(&self) -> (IntervalEnd, LimitKind) {
        (IntervalEnd::Lower, LimitKind::Zero)
    }
    fn param_interval(&self, _y: Vec3) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }
    fn evaluate(&self, x: Vec3, m: Vec3, t: f64) -> Result<f64, OutsideAperture> {
        let k = self.kappa.get();
        let c = x.dot(m);
        if c < k {
            return Err(OutsideAperture);
        }
        Ok(t / (1.0 - k * c))
    }
    fn param_through(&self, x: Vec3, m: Vec3, value: f64) -> f64 {
        value * (1.0 - self.kappa.get() * x.dot(m))
    }
    fn normal(&self, x: Vec3, m: Vec3, _t: f64) -> Option<Vec3> {
        (x - m * self.kappa.get()).normalized()
    }
    fn kappa(&self) -> Option<RefractionRatio> {
        Some(self.kappa)
    }
    fn dominated_start(&self, _y: Vec3, _y1: Vec3, t1: f64) -> f64 {
        // h_i >= t_i/(1-k^2) >= t1/(1-k) >= h_1 on the admissible set
        t1 * (1.0 + self.kappa.get())
    }
}

/// Far-field hyperboloids `b / (kappa x.m - 1)`, `kappa > 1`, admissible
/// where `x . m >= 1/kappa + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperboloidFamily {
    pub kappa: RefractionRatio,
    pub delta: f64,
}

impl HyperboloidFamily {
    pub fn new(kappa: RefractionRatio, delta: f64) -> Result<Self, ConfigError> {
        if kappa.is_lt1() {
            return Err(ConfigError::Invalid("hyperboloids need kappa > 1".into()));
        }
        let k = kappa.get();
        if !(delta > 0.0 && delta < 1.0 - 1.0 / k) {
            return Err(ConfigError::Invalid(format!(
                "delta must lie in (0, 1 - 1/kappa) = (0, {}), got {delta}",
                1.0 - 1.0 / k
            )));
        }
        Ok(HyperboloidFamily { kappa, delta })
    }

    pub fn check_admissible(&self, domain: &SourceDomain, dirs: &[Vec3]) -> Result<(), ConfigError> {
        let lim = 1.0 / self.kappa.get() + self.delta;
        for m in dirs {
            let (v, x) = domain.min_dot(*m);
            if v < lim {
                return Err(ConfigError::FarField {
                    detail: format!("min x.m = {v} below 1/kappa + delta = {lim}"),
                    x: Some(x),
                    m: Some(*m),
                });
            }
        }
        Ok(())
    }
}

impl BuildingBlockFamily for HyperboloidFamily {
    fn envelope(&self) -> EnvelopeKind {
        EnvelopeKind::Max
    }
    fn monotone(&self) -> Monotone {
        Monotone::Increasing
    }
    fn limit_end(&self) -> (IntervalEnd, LimitKind) {
        (IntervalEnd::Upper, LimitKind::Infinity)
    }
    fn param_interval(&self, _y: Vec3) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }
    fn evaluate(&self, x: Vec3, m: Vec3, t: f64) -> Result<f64, OutsideAperture> {
        let k = self.kappa.get();
        let c = x.dot(m);
        if k * c - 1.0 <= 0.0 {
            return Err(OutsideAperture);
        }
        Ok(t / (k * c - 1.0))
    }
    fn param_through(&self, x: Vec3, m: Vec3, value: f64) -> f64 {
        value * (self.kappa.get() * x.dot(m) - 1.0)
    }
    fn normal(&self, x: Vec3, m: Vec3, _t: f64) -> Option<Vec3> {
        (m * self.kappa.get() - x).normalized()
    }
    fn kappa(&self) -> Option<RefractionRatio> {
        Some(self.kappa)
    }
    fn dominated_start(&self, _y: Vec3, _y1: Vec3, t1: f64) -> f64 {
        // h_i <= t_i/(kappa delta) = t1/(kappa-1) <= h_1
        let k = self.kappa.get();
        t1 * k * self.delta / (k - 1.0)
    }
}

/// Affine functions `x . p + b` on a convex polygon in the plane `z = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFamily {
    /// Polygon vertices, counter-clockwise.
    pub vertices: Vec<Vec3>,
}

impl AffineFamily {
    pub fn new(vertices: Vec<Vec3>) -> Result<Self, ConfigError> {
        let poly = crate::polygon::ConvexPolygon::new(vertices)?;
        Ok(AffineFamily { vertices: poly.vertices().to_vec() })
    }
}

impl BuildingBlockFamily for AffineFamily {
    fn envelope(&self) -> EnvelopeKind {
        EnvelopeKind::Max
    }
    fn monotone(&self) -> Monotone {
        Monotone::Increasing
    }
    fn limit_end(&self) -> (IntervalEnd, LimitKind) {
        (IntervalEnd::Upper, LimitKind::Infinity)
    }
    fn param_interval(&self, _y: Vec3) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    fn evaluate(&self, x: Vec3, p: Vec3, t: f64) -> Result<f64, OutsideAperture> {
        Ok(x.x * p.x + x.y * p.y + t)
    }
    fn param_through(&self, x: Vec3, p: Vec3, value: f64) -> f64 {
        value - (x.x * p.x + x.y * p.y)
    }
    fn normal(&self, _x: Vec3, _p: Vec3, _t: f64) -> Option<Vec3> {
        None
    }
    fn kappa(&self) -> Option<RefractionRatio> {
        None
    }
    fn dominated_start(&self, p: Vec3, p1: Vec3, t1: f64) -> f64 {
        let d = p1 - p;
        let m = self.vertices.iter().map(|v| v.x * d.x + v.y * d.y).fold(f64::INFINITY, f64::min);
        t1 + m
    }
}

/// Closed set of the supported families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Oval(OvalFamily),
    Ellipsoid(EllipsoidFamily),
    Hyperboloid(HyperboloidFamily),
    Affine(AffineFamily),
}

macro_rules! dispatch {
    ($self:ident, $f:ident => $e:expr) => {
        match $self {
            Family::Oval($f) => $e,
            Family::Ellipsoid($f) => $e,
            Family::Hyperboloid($f) => $e,
            Family::Affine($f) => $e,
        }
    };
}

impl BuildingBlockFamily for Family {
    fn envelope(&self) -> EnvelopeKind {
        dispatch!(self, f => f.envelope())
    }
    fn monotone(&self) -> Monotone {
        dispatch!(self, f => f.monotone())
    }
    fn limit_end(&self) -> (IntervalEnd, LimitKind) {
        dispatch!(self, f => f.limit_end())
    }
    fn param_interval(&self, y: Vec3) -> (f64, f64) {
        dispatch!(self, f => f.param_interval(y))
    }
    fn evaluate(&self, x: Vec3, y: Vec3, t: f64) -> Result<f64, OutsideAperture> {
        dispatch!(self, f => f.evaluate(x, y, t))
    }
    fn param_through(&self, x: Vec3, y: Vec3, value: f64) -> f64 {
        dispatch!(self, f => f.param_through(x, y, value))
    }
    fn normal(&self, x: Vec3, y: Vec3, t: f64) -> Option<Vec3> {
        dispatch!(self, f => f.normal(x, y, t))
    }
    fn kappa(&self) -> Option<RefractionRatio> {
        dispatch!(self, f => f.kappa())
    }
    fn anchor_interval(&self, y1: Vec3) -> (f64, f64) {
        dispatch!(self, f => f.anchor_interval(y1))
    }
    fn dominated_start(&self, y: Vec3, y1: Vec3, t1: f64) -> f64 {
        dispatch!(self, f => f.dominated_start(y, y1, t1))
    }
}

pub fn oval_family(kappa: RefractionRatio, r0: f64, targets: &[Vec3]) -> Result<Family, ConfigError> {
    OvalFamily::new(kappa, r0, targets).map(Family::Oval)
}

pub fn ellipsoid_family(kappa: RefractionRatio) -> Result<Family, ConfigError> {
    EllipsoidFamily::new(kappa).map(Family::Ellipsoid)
}

pub fn hyperboloid_family(kappa: RefractionRatio, delta: f64) -> Result<Family, ConfigError> {
    HyperboloidFamily::new(kappa, delta).map(Family::Hyperboloid)
}

pub fn affine_family(vertices: Vec<Vec3>) -> Result<Family, ConfigError> {
    AffineFamily::new(vertices).map(Family::Affine)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceReport {
    pub monotone: bool,
    /// Largest difference quotient in `t` seen on the compact test interval.
    pub lipschitz: f64,
    /// Extreme block value at successive approaches to the limit end
    /// (sup for `Zero`, inf for `Infinity`).
    pub limit_sequence: Vec<f64>,
    pub limit_ok: bool,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.lipschitz.is_finite() && self.limit_ok
    }
}

/// Samples monotonicity, Lipschitz continuity in the parameter and the
/// uniform limit at the distinguished end for target `y` over points `xs`.
pub fn check_conformance<F: BuildingBlockFamily + ?Sized>(family: &F, y: Vec3, xs: &[Vec3]) -> ConformanceReport {
    let (a, b) = family.param_interval(y);
    let (lo, hi) = match (a.is_finite(), b.is_finite()) {
        (true, true) => (a + 0.05 * (b - a), b - 0.05 * (b - a)),
        (true, false) => (a + 0.1, a + 10.0),
        (false, true) => (b - 10.0, b - 0.1),
        (false, false) => (-5.0, 5.0),
    };
    let steps = 64;
    let ts: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let sign = match family.monotone() {
        Monotone::Increasing => 1.0,
        Monotone::Decreasing => -1.0,
    };
    let mut monotone = true;
    let mut lipschitz: f64 = 0.0;
    for x in xs {
        let vals: Vec<Option<f64>> = ts.iter().map(|t| family.evaluate(*x, y, *t).ok()).collect();
        for i in 1..ts.len() {
            if let (Some(v0), Some(v1)) = (vals[i - 1], vals[i]) {
                if !(sign * (v1 - v0) > 0.0) {
                    monotone = false;
                }
                lipschitz = lipschitz.max((v1 - v0).abs() / (ts[i] - ts[i - 1]));
            }
        }
    }

    let (end, kind) = family.limit_end();
    let end_val = match end {
        IntervalEnd::Lower => a,
        IntervalEnd::Upper => b,
    };
    let mut seq = Vec::new();
    for j in 1..=8 {
        let s = 10f64.powi(-j);
        let t = if end_val.is_finite() {
            let start = match end {
                IntervalEnd::Lower => hi,
                IntervalEnd::Upper => lo,
            };
            end_val + (start - end_val) * s
        } else {
            let dir = if end == IntervalEnd::Upper { 1.0 } else { -1.0 };
            dir / s
        };
        let vals = xs.iter().filter_map(|x| family.evaluate(*x, y, t).ok());
        let v = match kind {
            LimitKind::Zero => vals.map(f64::abs).fold(0.0, f64::max),
            LimitKind::Infinity => vals.fold(f64::INFINITY, f64::min),
        };
        seq.push(v);
    }
    let limit_ok = match kind {
        LimitKind::Zero => seq.windows(2).all(|w| w[1] < w[0]) && seq[seq.len() - 1] < 1e-6 * seq[0].max(1e-300),
        LimitKind::Infinity => seq.windows(2).all(|w| w[1] > w[0]) && seq[seq.len() - 1] > 1e6 * seq[0].abs().min(1.0),
    };
    ConformanceReport { monotone, lipschitz, limit_sequence: seq, limit_ok }
}
