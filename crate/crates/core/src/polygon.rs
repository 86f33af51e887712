//! Convex polygons in the plane `z = 0` and exact cells of max-affine functions.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    verts: Vec<Vec3>,
}

fn cross2(o: Vec3, a: Vec3, b: Vec3) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

impl ConvexPolygon {
    /// Accepts either orientation; stores counter-clockwise.
    pub fn new(vertices: Vec<Vec3>) -> Result<Self, ConfigError> {
        if vertices.len() < 3 {
            return Err(ConfigError::Invalid("a polygon needs at least 3 vertices".into()));
        }
        if vertices.iter().any(|v| !v.is_finite() || v.z != 0.0) {
            return Err(ConfigError::Invalid("polygon vertices must be finite points with z = 0".into()));
        }
        let mut verts = vertices;
        if signed_area(&verts) < 0.0 {
            verts.reverse();
        }
        let n = verts.len();
        for i in 0..n {
            if cross2(verts[i], verts[(i + 1) % n], verts[(i + 2) % n]) < 0.0 {
                return Err(ConfigError::Invalid("polygon is not convex".into()));
            }
        }
        if signed_area(&verts) <= 0.0 {
            return Err(ConfigError::Invalid("polygon has zero area".into()));
        }
        Ok(ConvexPolygon { verts })
    }

    pub fn unit_square() -> Self {
        ConvexPolygon::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ])
        .unwrap()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.verts
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.verts)
    }

    pub fn centroid(&self) -> Vec3 {
        polygon_centroid(&self.verts)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let n = self.verts.len();
        (0..n).all(|i| cross2(self.verts[i], self.verts[(i + 1) % n], p) >= 0.0)
    }
}

/// Shoelace area, positive for counter-clockwise order.
pub fn signed_area(v: &[Vec3]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

pub fn polygon_centroid(v: &[Vec3]) -> Vec3 {
    let a = signed_area(v);
    if a == 0.0 {
        let n = v.len().max(1) as f64;
        return v.iter().fold(Vec3::ZERO, |s, p| s + *p) / n;
    }
    let n = v.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (v[i], v[(i + 1) % n]);
        let c = p.x * q.y - q.x * p.y;
        cx += (p.x + q.x) * c;
        cy += (p.y + q.y) * c;
    }
    Vec3::new(cx / (6.0 * a), cy / (6.0 * a), 0.0)
}

/// Keeps the part of a convex polygon where `a . x <= c` (Sutherland-Hodgman).
pub fn clip_halfplane(poly: &[Vec3], a: (f64, f64), c: f64) -> Vec<Vec3> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    let side = |p: Vec3| a.0 * p.x + a.1 * p.y - c;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let (sp, sq) = (side(p), side(q));
        if sp <= 0.0 {
            out.push(p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            let s = sp / (sp - sq);
            out.push(p + (q - p) * s);
        }
    }
    out
}

/// Source density on a planar domain: `c0 + c . x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarDensity {
    pub c0: f64,
    #[serde(default)]
    pub slope: [f64; 2],
}

impl Default for PlanarDensity {
    fn default() -> Self {
        PlanarDensity { c0: 1.0, slope: [0.0, 0.0] }
    }
}

impl PlanarDensity {
    pub fn uniform(c: f64) -> Self {
        PlanarDensity { c0: c, slope: [0.0, 0.0] }
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        self.c0 + self.slope[0] * p.x + self.slope[1] * p.y
    }

    /// Exact integral over a polygon: area times the value at the centroid.
    pub fn integrate(&self, poly: &[Vec3]) -> f64 {
        let a = signed_area(poly);
        if a <= 0.0 {
            return 0.0;
        }
        a * self.eval(polygon_centroid(poly))
    }

    pub fn check_positive(&self, domain: &ConvexPolygon) -> Result<(), ConfigError> {
        if domain.vertices().iter().any(|v| !(self.eval(*v) >= 0.0)) || !(self.integrate(domain.vertices()) > 0.0) {
            return Err(ConfigError::Invalid("planar density must be nonnegative with positive total".into()));
        }
        Ok(())
    }
}

/// Region of `domain` where block `i` of `max_j (x . p_j + b_j)` is the
/// active one, ties going to the smallest index.
pub fn max_affine_cell(domain: &ConvexPolygon, slopes: &[Vec3], params: &[f64], i: usize) -> Vec<Vec3> {
    let mut poly = domain.vertices().to_vec();
    let (pi, bi) = (slopes[i], params[i]);
    for (j, (pj, bj)) in slopes.iter().zip(params).enumerate() {
        if j == i {
            continue;
        }
        let a = (pj.x - pi.x, pj.y - pi.y);
        if a.0 == 0.0 && a.1 == 0.0 {
            if *bj > bi || (*bj == bi && j < i) {
                return Vec::new();
            }
            continue;
        }
        // x . p_i + b_i >= x . p_j + b_j  <=>  (p_j - p_i) . x <= b_i - b_j
        poly = clip_halfplane(&poly, a, bi - bj);
        if poly.len() < 3 {
            return Vec::new();
        }
    }
    poly
}
