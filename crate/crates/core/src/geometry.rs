//! Vectors, spherical caps, quadrature and direction sampling.
//!
//! Everything lives in R^3. Two-dimensional scenes use the plane z = 0 and
//! the `dimension` field of [`SourceDomain`] decides whether the cap is an arc
//! or a genuine spherical cap.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vec<f64>> for Vec3 {
    fn from(v: Vec<f64>) -> Self {
        Vec3::new(
            v.first().copied().unwrap_or(0.0),
            v.get(1).copied().unwrap_or(0.0),
            v.get(2).copied().unwrap_or(0.0),
        )
    }
}

impl From<Vec3> for Vec<f64> {
    fn from(v: Vec3) -> Self {
        vec![v.x, v.y, v.z]
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const E1: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const E2: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const E3: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    /// Unit vector in the same direction, `None` for (near) zero vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec(Vec3);

impl UnitVec {
    /// Normalizes `v`; fails for zero or non-finite input.
    pub fn new(v: Vec3) -> Option<UnitVec> {
        v.normalized().map(UnitVec)
    }

    /// Wraps a vector already known to be unit length (checked in debug builds).
    pub fn new_unchecked(v: Vec3) -> UnitVec {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not a unit vector: {v:?}");
        UnitVec(v)
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, o: UnitVec) -> f64 {
        self.0.dot(o.0)
    }
}

impl From<UnitVec> for Vec3 {
    fn from(u: UnitVec) -> Vec3 {
        u.0
    }
}

/// Two unit vectors completing `axis` to a right-handed orthonormal frame.
pub fn orthonormal_frame(axis: Vec3) -> (Vec3, Vec3) {
    let a = axis.normalized().unwrap_or(Vec3::E3);
    let helper = if a.x.abs() < 0.9 { Vec3::E1 } else { Vec3::E2 };
    let e1 = (helper - a * helper.dot(a)).normalized().unwrap();
    let e2 = a.cross(e1);
    (e1, e2)
}

/// Rotates `v` about the unit `axis` by `angle` (Rodrigues).
pub fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

/// Great-circle distance between two unit vectors.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    // atan2 form stays accurate for nearly parallel vectors.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Radiant intensity on the source cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Constant value.
    Uniform(f64),
    /// Piecewise linear profile in the polar angle from the axis, as
    /// `(angle, value)` pairs with increasing angles. Constant beyond the ends.
    Polar(Vec<(f64, f64)>),
}

impl Default for Density {
    fn default() -> Self {
        Density::Uniform(1.0)
    }
}

impl Density {
    pub fn eval_polar(&self, theta: f64) -> f64 {
        match self {
            Density::Uniform(c) => *c,
            Density::Polar(tab) => {
                if tab.is_empty() {
                    return 0.0;
                }
                if theta <= tab[0].0 {
                    return tab[0].1;
                }
                for w in tab.windows(2) {
                    let (t0, v0) = w[0];
                    let (t1, v1) = w[1];
                    if theta <= t1 {
                        let s = if t1 > t0 { (theta - t0) / (t1 - t0) } else { 1.0 };
                        return v0 + s * (v1 - v0);
                    }
                }
                tab[tab.len() - 1].1
            }
        }
    }

    /// Upper bound of the density, used for rejection sampling.
    pub fn upper_bound(&self) -> f64 {
        match self {
            Density::Uniform(c) => *c,
            Density::Polar(tab) => tab.iter().map(|p| p.1).fold(0.0, f64::max),
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        match self {
            Density::Uniform(c) if !(c.is_finite() && *c > 0.0) => {
                Err(ConfigError::Invalid(format!("uniform density must be positive, got {c}")))
            }
            Density::Polar(tab) => {
                if tab.is_empty() {
                    return Err(ConfigError::Invalid("empty density table".into()));
                }
                if tab.iter().any(|p| !(p.1.is_finite() && p.1 >= 0.0) || !p.0.is_finite()) {
                    return Err(ConfigError::Invalid("density table values must be finite and >= 0".into()));
                }
                if tab.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(ConfigError::Invalid("density table angles must increase".into()));
                }
                if tab.iter().all(|p| p.1 == 0.0) {
                    return Err(ConfigError::Invalid("density table is identically zero".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Spherical cap (n = 3) or circular arc (n = 2) of source directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    axis: Vec3,
    half_angle: f64,
    density: Density,
    dimension: usize,
    e1: Vec3,
    e2: Vec3,
}

impl SourceDomain {
    pub fn new(axis: Vec3, half_angle: f64, density: Density, dimension: usize) -> Result<Self, ConfigError> {
        if dimension != 2 && dimension != 3 {
            return Err(ConfigError::Invalid(format!("dimension must be 2 or 3, got {dimension}")));
        }
        let axis = axis
            .normalized()
            .ok_or_else(|| ConfigError::Invalid("source axis must be a nonzero vector".into()))?;
        if !(half_angle > 0.0 && half_angle <= PI / 2.0) {
            return Err(ConfigError::Invalid(format!(
                "half_angle must lie in (0, pi/2], got {half_angle}"
            )));
        }
        density.check()?;
        let (e1, e2) = if dimension == 2 {
            if axis.z.abs() > 1e-12 {
                return Err(ConfigError::Invalid("2D scenes need an axis in the xy-plane".into()));
            }
            let perp = Vec3::new(-axis.y, axis.x, 0.0);
            (perp, Vec3::E3)
        } else {
            orthonormal_frame(axis)
        };
        Ok(SourceDomain { axis, half_angle, density, dimension, e1, e2 })
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn half_angle(&self) -> f64 {
        self.half_angle
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Tangent frame: `e1` spans the arc in 2D, `(e1, e2)` the cap tangent plane in 3D.
    pub fn frame(&self) -> (Vec3, Vec3) {
        (self.e1, self.e2)
    }

    pub fn cos_half_angle(&self) -> f64 {
        self.half_angle.cos()
    }

    /// Solid angle (3D) or arc length (2D) of the cap.
    pub fn area(&self) -> f64 {
        match self.dimension {
            2 => 2.0 * self.half_angle,
            _ => 2.0 * PI * (1.0 - self.half_angle.cos()),
        }
    }

    /// Membership in the closed cap.
    pub fn contains(&self, x: Vec3) -> bool {
        let inplane = self.dimension == 3 || x.dot(self.e2).abs() < 1e-12;
        inplane && angle_between(self.axis, x) <= self.half_angle + 1e-15
    }

    pub fn density_at(&self, x: Vec3) -> f64 {
        self.density.eval_polar(angle_between(self.axis, x))
    }

    /// Direction at polar angle `theta` and azimuth `phi` (2D: signed angle, `phi` ignored).
    pub fn direction(&self, theta: f64, phi: f64) -> Vec3 {
        match self.dimension {
            2 => self.axis * theta.cos() + self.e1 * theta.sin(),
            _ => {
                let (s, c) = theta.sin_cos();
                self.axis * c + (self.e1 * phi.cos() + self.e2 * phi.sin()) * s
            }
        }
    }

    /// Smallest value of `x . d` over the closed cap, with a minimizing direction.
    pub fn min_dot(&self, d: Vec3) -> (f64, Vec3) {
        let dn = d.normalized().unwrap_or(self.axis);
        match self.dimension {
            2 => {
                let a = self.direction(self.half_angle, 0.0);
                let b = self.direction(-self.half_angle, 0.0);
                let (va, vb) = (a.dot(d), b.dot(d));
                if va <= vb { (va, a) } else { (vb, b) }
            }
            _ => {
                let beta = angle_between(self.axis, dn);
                let worst = (beta + self.half_angle).min(PI);
                // point of the boundary circle farthest from d
                let perp = dn - self.axis * dn.dot(self.axis);
                let away = match perp.normalized() {
                    Some(p) => -p,
                    None => self.e1,
                };
                let x = self.axis * self.half_angle.cos() + away * self.half_angle.sin();
                (d.norm() * worst.cos(), x)
            }
        }
    }

    /// Draws a direction with probability proportional to the density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let bound = self.density.upper_bound();
        loop {
            let x = self.sample_uniform(rng);
            if matches!(self.density, Density::Uniform(_)) {
                return x;
            }
            let u: f64 = rng.random::<f64>() * bound;
            if u < self.density_at(x) {
                return x;
            }
        }
    }

    /// Uniform direction in the cap with respect to solid angle (arc length in 2D).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match self.dimension {
            2 => {
                let t = (2.0 * rng.random::<f64>() - 1.0) * self.half_angle;
                self.direction(t, 0.0)
            }
            _ => {
                let c0 = self.half_angle.cos();
                let z = 1.0 - rng.random::<f64>() * (1.0 - c0);
                let phi = 2.0 * PI * rng.random::<f64>();
                self.direction(z.clamp(-1.0, 1.0).acos(), phi)
            }
        }
    }

    /// Total energy `\int f` computed in closed form for uniform densities,
    /// otherwise by a fine quadrature.
    pub fn total_energy(&self) -> f64 {
        match self.density {
            Density::Uniform(c) => c * self.area(),
            Density::Polar(_) => {
                let rule = build_cap_quadrature(self, 200_000).expect("resolution is large");
                rule.nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * self.density_at(*x))
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub const MIN_RESOLUTION: usize = 16;

/// Fibonacci spiral on the cap in 3D, midpoint arc grid in 2D. Equal weights.
pub fn build_cap_quadrature(domain: &SourceDomain, resolution: usize) -> Result<QuadratureRule, ConfigError> {
    if resolution < MIN_RESOLUTION {
        return Err(ConfigError::Invalid(format!(
            "quadrature resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let k = resolution;
    let w = domain.area() / k as f64;
    let nodes: Vec<Vec3> = match domain.dimension {
        2 => (0..k)
            .map(|i| {
                let t = -domain.half_angle + (i as f64 + 0.5) * 2.0 * domain.half_angle / k as f64;
                domain.direction(t, 0.0)
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            let c0 = domain.half_angle.cos();
            (0..k)
                .map(|i| {
                    let z = 1.0 - (1.0 - c0) * (i as f64 + 0.5) / k as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * i as f64;
                    domain.axis * z + (domain.e1 * phi.cos() + domain.e2 * phi.sin()) * r
                })
                .collect()
        }
    };
    Ok(QuadratureRule { weights: vec![w; k], nodes })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite integrand value {value} at node {index}")]
pub struct NonFiniteIntegrand {
    pub index: usize,
    pub value: f64,
}

/// `sum_k w_k g(x_k)`, summed in node order.
pub fn integrate<G: Fn(Vec3) -> f64>(rule: &QuadratureRule, g: G) -> Result<f64, NonFiniteIntegrand> {
    let mut acc = 0.0;
    for (index, (x, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let value = g(*x);
        if !value.is_finite() {
            return Err(NonFiniteIntegrand { index, value });
        }
        acc += w * value;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cap(half: f64, n: usize) -> SourceDomain {
        SourceDomain::new(if n == 3 { Vec3::E3 } else { Vec3::E2 }, half, Density::Uniform(1.0), n).unwrap()
    }

    #[test]
    fn hemisphere_weights() {
        let d = cap(PI / 2.0, 3);
        let r = build_cap_quadrature(&d, 10_000).unwrap();
        assert_relative_eq!(r.total_weight(), 2.0 * PI, max_relative = 1e-12);
        assert_relative_eq!(integrate(&r, |x| x.dot(Vec3::E3)).unwrap(), PI, max_relative = 1e-8);
    }

    #[test]
    fn cap_area_values() {
        let d = cap(PI / 6.0, 3);
        let r = build_cap_quadrature(&d, 4096).unwrap();
        assert_relative_eq!(integrate(&r, |_| 1.0).unwrap(), 0.841_787_214_1, max_relative = 1e-9);
        let d2 = cap(PI / 6.0, 2);
        let r2 = build_cap_quadrature(&d2, 100).unwrap();
        assert_relative_eq!(r2.total_weight(), PI / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn too_few_nodes() {
        assert!(build_cap_quadrature(&cap(0.3, 3), 15).is_err());
    }

    #[test]
    fn nodes_inside() {
        for n in [2, 3] {
            let d = cap(0.4, n);
            let c = d.cos_half_angle();
            for x in build_cap_quadrature(&d, 999).unwrap().nodes {
                assert!(x.dot(d.axis()) > c);
                assert!((x.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_reported() {
        let r = build_cap_quadrature(&cap(0.4, 3), 20).unwrap();
        let e = integrate(&r, |x| if x.z > 0.997 { f64::NAN } else { 1.0 }).unwrap_err();
        assert_eq!(e.index, 0);
    }

    #[test]
    fn min_dot_matches_sampling() {
        let d = SourceDomain::new(Vec3::E3, 0.35, Density::Uniform(1.0), 3).unwrap();
        let p = Vec3::new(1.0, 0.5, 4.0);
        let (m, x) = d.min_dot(p);
        assert_relative_eq!(x.dot(p), m, max_relative = 1e-12);
        let r = build_cap_quadrature(&d, 5000).unwrap();
        assert!(r.nodes.iter().all(|y| y.dot(p) >= m - 1e-12));
    }

    #[test]
    fn polar_density_interpolates() {
        let dens = Density::Polar(vec![(0.0, 2.0), (0.2, 1.0)]);
        assert_relative_eq!(dens.eval_polar(0.1), 1.5);
        assert_relative_eq!(dens.eval_polar(0.5), 1.0);
    }
}
