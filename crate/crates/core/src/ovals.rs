//! Cartesian ovals `|X| + kappa |X - P| = b` in polar form about the origin.
//!
//! For `kappa < 1` the refracting radius is the smaller root of the quadratic
//! in `h`; for `kappa > 1` it is the smaller root `rho_-` on the piece of the
//! oval that can send rays to `P`. Both are evaluated in the rationalized form
//! `(b^2 - kappa^2 |P|^2) / (... + sqrt(Delta))`, which has no cancellation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::geometry::Vec3;
use crate::snell::RefractionRatio;

/// The direction cannot be refracted to the focus by this oval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("direction outside the oval aperture")]
pub struct OutsideAperture;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianOval {
    focus: Vec3,
    b: f64,
    kappa: RefractionRatio,
}

/// Directions `x` with `x . P/|P| >= cos_threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aperture {
    pub cos_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvalBounds {
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_target_dist: f64,
    pub max_target_dist: f64,
}

const DELTA_CLAMP: f64 = 1e-14;

impl CartesianOval {
    /// `b` may sit at the degenerate end `kappa |P|`, where the oval is the origin.
    pub fn new(focus: Vec3, b: f64, kappa: RefractionRatio) -> Result<Self, ConfigError> {
        let p = focus.norm();
        if !(p > 0.0 && p.is_finite()) {
            return Err(ConfigError::Invalid("oval focus must be a nonzero finite point".into()));
        }
        let k = kappa.get();
        let ok = if k < 1.0 { b >= k * p && b < p } else { b > p && b <= k * p };
        if !ok || !b.is_finite() {
            let range = if k < 1.0 {
                format!("[{}, {})", k * p, p)
            } else {
                format!("({}, {}]", p, k * p)
            };
            return Err(ConfigError::Invalid(format!("oval parameter b = {b} outside {range}")));
        }
        Ok(CartesianOval { focus, b, kappa })
    }

    pub fn focus(&self) -> Vec3 {
        self.focus
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn kappa(&self) -> RefractionRatio {
        self.kappa
    }

    /// `Delta(x . P)`, the discriminant of the polar quadratic, written with
    /// factored differences of squares.
    fn delta(&self, t: f64) -> f64 {
        let k = self.kappa.get();
        let p = self.focus.norm();
        let b = self.b;
        let lin = b - k * k * t;
        lin * lin - (1.0 - k * k) * (b - k * p) * (b + k * p)
    }

    /// Refracting radius without the aperture restriction.
    ///
    /// For `kappa < 1` this is defined on the whole sphere; for `kappa > 1`
    /// it fails exactly where the refracting piece does not exist.
    pub fn polar_radius(&self, x: Vec3) -> Result<f64, OutsideAperture> {
        let k = self.kappa.get();
        let p = self.focus.norm();
        let b = self.b;
        let t = x.dot(self.focus);
        let mut d = self.delta(t);
        if d < 0.0 {
            if d >= -DELTA_CLAMP * b * b {
                d = 0.0;
            } else {
                return Err(OutsideAperture);
            }
        }
        if k < 1.0 {
            let num = (b - k * p) * (b + k * p);
            let den = (b - k * k * t) + d.sqrt();
            Ok(if num == 0.0 { 0.0 } else { num / den })
        } else {
            let lin = k * k * t - b;
            if lin < 0.0 {
                return Err(OutsideAperture);
            }
            let num = (k * p - b) * (k * p + b);
            let den = lin + d.sqrt();
            if num == 0.0 {
                Ok(0.0)
            } else if den > 0.0 {
                Ok(num / den)
            } else {
                Err(OutsideAperture)
            }
        }
    }

    /// Radius of the refracting piece in direction `x` (unit vector).
    pub fn radius(&self, x: Vec3) -> Result<f64, OutsideAperture> {
        if self.kappa.is_lt1() {
            radius_lt1(x, self)
        } else {
            radius_gt1(x, self)
        }
    }

    pub fn aperture(&self) -> Aperture {
        aperture(self)
    }

    pub fn bounds(&self) -> OvalBounds {
        bounds(self)
    }

    /// Surface point `h(x) x`.
    pub fn point(&self, x: Vec3) -> Result<Vec3, OutsideAperture> {
        self.radius(x).map(|h| x * h)
    }

    /// Unit normal at `h(x) x`, oriented so that `x . nu > 0`.
    pub fn normal(&self, x: Vec3) -> Result<Vec3, OutsideAperture> {
        oval_normal(x, self)
    }

    /// Value of `b` for which the oval with focus `P` passes through `r x`.
    pub fn param_through(focus: Vec3, kappa: RefractionRatio, x: Vec3, r: f64) -> f64 {
        r + kappa.get() * (x * r - focus).norm()
    }

    /// `|X| + kappa |X - P| - b` at a point `X`.
    pub fn residual(&self, pt: Vec3) -> f64 {
        pt.norm() + self.kappa.get() * (pt - self.focus).norm() - self.b
    }
}

/// Radius for `kappa < 1`; requires `x . P >= b`.
pub fn radius_lt1(x: Vec3, oval: &CartesianOval) -> Result<f64, OutsideAperture> {
    debug_assert!(oval.kappa.is_lt1());
    if x.dot(oval.focus) < oval.b {
        return Err(OutsideAperture);
    }
    oval.polar_radius(x)
}

/// Radius `rho_-` for `kappa > 1`; requires `x . P/|P| >= I(P, b)`.
pub fn radius_gt1(x: Vec3, oval: &CartesianOval) -> Result<f64, OutsideAperture> {
    debug_assert!(!oval.kappa.is_lt1());
    oval.polar_radius(x)
}

pub fn aperture(oval: &CartesianOval) -> Aperture {
    let k = oval.kappa.get();
    let p = oval.focus.norm();
    let b = oval.b;
    let c = if k < 1.0 {
        b / p
    } else {
        (b + ((k * k - 1.0) * (k * p - b) * (k * p + b)).max(0.0).sqrt()) / (k * k * p)
    };
    Aperture { cos_threshold: c }
}

pub fn bounds(oval: &CartesianOval) -> OvalBounds {
    let k = oval.kappa.get();
    let p = oval.focus.norm();
    let b = oval.b;
    if k < 1.0 {
        OvalBounds {
            min_radius: (b - k * p) / (1.0 + k),
            max_radius: (b - k * p) / (1.0 - k),
            min_target_dist: (p - b) / (1.0 - k),
            max_target_dist: ((p - b) * (p + b)).sqrt() / (1.0 - k * k).sqrt(),
        }
    } else {
        let min_radius = (k * p - b) / (k - 1.0);
        let max_radius = ((k * p - b) * (k * p + b)).sqrt() / (k * k - 1.0).sqrt();
        // |P - X| = (b - h)/kappa on the oval
        OvalBounds {
            min_radius,
            max_radius,
            min_target_dist: (b - max_radius) / k,
            max_target_dist: (b - p) / (k - 1.0),
        }
    }
}

pub fn oval_normal(x: Vec3, oval: &CartesianOval) -> Result<Vec3, OutsideAperture> {
    let h = oval.radius(x)?;
    let k = oval.kappa.get();
    let to_p = oval.focus - x * h;
    let m = to_p.normalized().ok_or(OutsideAperture)?;
    let g = x - m * k;
    let g = if k < 1.0 { g } else { -g };
    g.normalized().ok_or(OutsideAperture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snell::refract;
    use approx::assert_relative_eq;

    fn k(v: f64) -> RefractionRatio {
        RefractionRatio::new(v).unwrap()
    }

    fn dir(c: f64) -> Vec3 {
        Vec3::new(c, (1.0 - c * c).sqrt(), 0.0)
    }

    #[test]
    fn lt1_examples() {
        let o = CartesianOval::new(Vec3::new(2.0, 0.0, 0.0), 1.7, k(2.0 / 3.0)).unwrap();
        assert_relative_eq!(o.radius(Vec3::E1).unwrap(), 1.1, max_relative = 1e-14);
        assert_eq!(o.radius(dir(0.5)), Err(OutsideAperture));
        let b = o.bounds();
        assert_relative_eq!(b.min_radius, 0.22, max_relative = 1e-12);
        assert_relative_eq!(b.max_radius, 1.1, max_relative = 1e-12);
        assert_relative_eq!(b.max_target_dist, 1.11f64.sqrt() / (5.0f64 / 9.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(o.aperture().cos_threshold, 0.85);
        let degenerate = CartesianOval::new(Vec3::new(2.0, 0.0, 0.0), 4.0 / 3.0, k(2.0 / 3.0)).unwrap();
        assert_eq!(degenerate.radius(dir(0.9)).unwrap(), 0.0);
    }

    #[test]
    fn gt1_examples() {
        let o = CartesianOval::new(Vec3::new(2.0, 0.0, 0.0), 2.7, k(1.5)).unwrap();
        assert_relative_eq!(o.radius(Vec3::E1).unwrap(), 0.6, max_relative = 1e-13);
        let ap = o.aperture().cos_threshold;
        assert_relative_eq!(ap, 0.925, epsilon = 5e-4);
        assert_eq!(o.radius(dir(0.90)), Err(OutsideAperture));
        assert!(o.radius(dir(ap + 1e-9)).is_ok());
        assert_relative_eq!(o.bounds().max_radius, 1.71f64.sqrt() / 1.25f64.sqrt(), max_relative = 1e-12);
        // aperture boundary attains the maximum radius
        assert_relative_eq!(o.radius(dir(ap)).unwrap(), o.bounds().max_radius, max_relative = 1e-6);
    }

    #[test]
    fn gt1_limits() {
        let p = Vec3::new(2.0, 0.0, 0.0);
        let near_p = CartesianOval::new(p, 2.0 + 1e-9, k(1.5)).unwrap();
        assert_relative_eq!(near_p.radius(Vec3::E1).unwrap(), 2.0, max_relative = 1e-8);
        assert_relative_eq!(near_p.aperture().cos_threshold, 1.0, epsilon = 1e-4);
        let near_kp = CartesianOval::new(p, 3.0 - 1e-12, k(1.5)).unwrap();
        assert_relative_eq!(near_kp.aperture().cos_threshold, 1.0 / 1.5, epsilon = 1e-5);
    }

    #[test]
    fn invalid_parameters() {
        let p = Vec3::new(2.0, 0.0, 0.0);
        assert!(CartesianOval::new(p, 2.0, k(2.0 / 3.0)).is_err());
        assert!(CartesianOval::new(p, 1.0, k(2.0 / 3.0)).is_err());
        assert!(CartesianOval::new(p, 2.0, k(1.5)).is_err());
        assert!(CartesianOval::new(p, 3.1, k(1.5)).is_err());
        assert!(CartesianOval::new(Vec3::ZERO, 1.0, k(1.5)).is_err());
    }

    #[test]
    fn focus_and_normal() {
        for (kk, b) in [(2.0 / 3.0, 1.7), (1.5, 2.7)] {
            let p = Vec3::new(2.0, 0.0, 0.0);
            let o = CartesianOval::new(p, b, k(kk)).unwrap();
            assert_relative_eq!((o.normal(Vec3::E1).unwrap() - Vec3::E1).norm(), 0.0, epsilon = 1e-14);
            for c in [0.999, 0.99, 0.95] {
                let x = Vec3::new(c, 0.0, (1.0 - c * c).sqrt());
                let pt = o.point(x).unwrap();
                let m = refract(x, o.normal(x).unwrap(), o.kappa()).unwrap();
                let want = (p - pt).normalized().unwrap();
                assert_relative_eq!((m - want).norm(), 0.0, epsilon = 1e-12);
                assert!(o.residual(pt).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tangent_orthogonal_to_normal() {
        let p = Vec3::new(0.3, 0.1, 2.0);
        for (kk, b) in [(2.0 / 3.0, 1.6), (1.5, 2.6)] {
            let o = CartesianOval::new(p, b, k(kk)).unwrap();
            let x = Vec3::new(0.05, 0.02, 1.0).normalized().unwrap();
            let nu = o.normal(x).unwrap();
            let eps = 1e-6;
            for u in [Vec3::E1, Vec3::E2] {
                let xp = (x + u * eps).normalized().unwrap();
                let xm = (x - u * eps).normalized().unwrap();
                let tan = (o.point(xp).unwrap() - o.point(xm).unwrap()) / (2.0 * eps);
                assert!(tan.normalized().unwrap().dot(nu).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn param_through_inverts_radius() {
        let p = Vec3::new(0.2, 0.0, 3.0);
        for (kk, b) in [(2.0 / 3.0, 2.3), (1.5, 4.4)] {
            let o = CartesianOval::new(p, b, k(kk)).unwrap();
            let x = Vec3::new(0.02, 0.01, 1.0).normalized().unwrap();
            let h = o.radius(x).unwrap();
            assert_relative_eq!(CartesianOval::param_through(p, k(kk), x, h), b, max_relative = 1e-14);
        }
    }
}
