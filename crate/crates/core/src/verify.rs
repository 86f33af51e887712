//! Independent checks of a solved refractor: Monte-Carlo ray tracing through
//! Snell's law, the analytic map onto a plane screen and the Jacobian
//! identity `det DZ g(Z) sqrt(1 - |x'|^2) = f(x)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{BuildingBlockFamily, Family};
use crate::geometry::Vec3;
use crate::refractor::{PolyBlockRefractor, Screen, DEFAULT_TIE_TOL};
use crate::snell::{phi, refract, RefractionRatio};

const BATCH: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayOutcome {
    /// Captured by `target`; `offset` is the distance to it (angle in the far field).
    Hit { target: usize, offset: f64 },
    Tir,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayTraceReport {
    /// Energy captured by each target.
    pub masses: Vec<f64>,
    pub hits: Vec<u64>,
    pub miss: f64,
    pub tir: f64,
    pub miss_count: u64,
    pub tir_count: u64,
    /// Rays whose direction lies on a ridge between blocks.
    pub ridge_count: u64,
    /// Hits assigned to a target other than the active block.
    pub map_disagreements: u64,
    pub rays: u64,
    pub energy: f64,
    pub capture_radius: f64,
    pub seed: u64,
}

impl RayTraceReport {
    /// Binomial standard deviation of the energy of target `i`.
    pub fn sigma(&self, i: usize) -> f64 {
        let p = self.hits[i] as f64 / self.rays as f64;
        self.energy * (p * (1.0 - p) / self.rays as f64).sqrt()
    }
}

/// Follows the ray in direction `x` through the refractor. Near-field hits are
/// measured on `screen` when given, else by the distance from the target to
/// the refracted line; far-field hits compare directions.
pub fn trace_ray(refr: &PolyBlockRefractor, screen: Option<&Screen>, x: Vec3, capture_radius: f64) -> RayOutcome {
    let Some((i, rho)) = refr.active(x) else {
        return RayOutcome::Miss;
    };
    let Some(kappa) = refr.family.kappa() else {
        return RayOutcome::Miss;
    };
    let Some(nu) = refr.family.normal(x, refr.targets[i], refr.params[i]) else {
        return RayOutcome::Miss;
    };
    let m = match refract(x, nu, kappa) {
        Ok(m) => m,
        Err(_) => return RayOutcome::Tir,
    };
    let far = matches!(refr.family, Family::Ellipsoid(_) | Family::Hyperboloid(_));
    let origin = x * rho;
    let dist = |p: Vec3| -> f64 {
        if far {
            return (m - p.normalized().unwrap_or(p)).norm();
        }
        match screen {
            Some(s) => s.intersect(origin, m).map_or(f64::INFINITY, |z| (z - p).norm()),
            None => {
                let s = (p - origin).dot(m);
                if s <= 0.0 {
                    f64::INFINITY
                } else {
                    (p - origin - m * s).norm()
                }
            }
        }
    };
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, p) in refr.targets.iter().enumerate() {
        let d = dist(*p);
        if d < best.1 {
            best = (j, d);
        }
    }
    if best.1 <= capture_radius {
        RayOutcome::Hit { target: best.0, offset: best.1 }
    } else {
        RayOutcome::Miss
    }
}

#[derive(Default, Clone)]
struct Tally {
    hits: Vec<u64>,
    miss: u64,
    tir: u64,
    ridge: u64,
    disagree: u64,
}

/// Traces `n_rays` directions drawn from the source density. Each batch of
/// rays has its own ChaCha stream, so the result does not depend on the
/// thread count.
pub fn raytrace(
    refr: &PolyBlockRefractor,
    screen: Option<&Screen>,
    n_rays: u64,
    capture_radius: f64,
    seed: u64,
) -> RayTraceReport {
    let n = refr.len();
    let batches = n_rays.div_ceil(BATCH as u64);
    let tallies: Vec<Tally> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let count = (n_rays - b * BATCH as u64).min(BATCH as u64);
            let mut t = Tally { hits: vec![0; n], ..Default::default() };
            for _ in 0..count {
                let x = refr.domain.sample(&mut rng);
                let owners = refr.refractor_map(x, DEFAULT_TIE_TOL);
                if owners.len() > 1 {
                    t.ridge += 1;
                }
                match trace_ray(refr, screen, x, capture_radius) {
                    RayOutcome::Hit { target, .. } => {
                        t.hits[target] += 1;
                        if !owners.contains(&target) {
                            t.disagree += 1;
                        }
                    }
                    RayOutcome::Tir => t.tir += 1,
                    RayOutcome::Miss => t.miss += 1,
                }
            }
            t
        })
        .collect();
    let mut total = Tally { hits: vec![0; n], ..Default::default() };
    for t in tallies {
        for (a, b) in total.hits.iter_mut().zip(&t.hits) {
            *a += b;
        }
        total.miss += t.miss;
        total.tir += t.tir;
        total.ridge += t.ridge;
        total.disagree += t.disagree;
    }
    let energy = refr.domain.total_energy();
    let per_ray = if n_rays == 0 { 0.0 } else { energy / n_rays as f64 };
    RayTraceReport {
        masses: total.hits.iter().map(|&h| h as f64 * per_ray).collect(),
        hits: total.hits,
        miss: total.miss as f64 * per_ray,
        tir: total.tir as f64 * per_ray,
        miss_count: total.miss,
        tir_count: total.tir,
        ridge_count: total.ridge,
        map_disagreements: total.disagree,
        rays: n_rays,
        energy,
        capture_radius,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForwardError {
    #[error("x' = {0:?} is outside the source domain")]
    OutsideDomain([f64; 2]),
    #[error("x' = {0:?} lies on or next to a ridge between blocks")]
    Ridge([f64; 2]),
    #[error("the refracted ray is totally internally reflected at x' = {0:?}")]
    Tir([f64; 2]),
    #[error("the refracted ray from x' = {0:?} never meets the plane")]
    NoIntersection([f64; 2]),
    #[error("no density estimate at Z = {0:?}")]
    NoDensity(Vec3),
}

/// Smooth piece of a refractor written over projected coordinates
/// `x' = (x_1, ..., x_{n-1})`, `x_n = sqrt(1 - |x'|^2)`.
#[derive(Debug, Clone, Copy)]
pub struct RadialChart<'a> {
    pub refr: &'a PolyBlockRefractor,
    /// Step of the central differences for `D rho`.
    pub h_fd: f64,
    /// Reject planes met only by the backward extension of the ray.
    pub forward_only: bool,
}

/// `rho`, `D rho` and the quantities built from them at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartPoint {
    pub x: Vec3,
    pub rho: f64,
    pub grad: [f64; 2],
}

impl<'a> RadialChart<'a> {
    pub fn new(refr: &'a PolyBlockRefractor) -> Self {
        RadialChart { refr, h_fd: 1e-3, forward_only: true }
    }

    pub fn dim(&self) -> usize {
        self.refr.domain.dimension() - 1
    }

    /// Direction for projected coordinates.
    pub fn lift(&self, xp: [f64; 2]) -> Option<Vec3> {
        if self.dim() == 1 {
            let s = 1.0 - xp[0] * xp[0];
            (s > 0.0).then(|| Vec3::new(xp[0], s.sqrt(), 0.0))
        } else {
            let s = 1.0 - xp[0] * xp[0] - xp[1] * xp[1];
            (s > 0.0).then(|| Vec3::new(xp[0], xp[1], s.sqrt()))
        }
    }

    /// Projected coordinates of a direction.
    pub fn project(&self, x: Vec3) -> [f64; 2] {
        if self.dim() == 1 { [x.x, 0.0] } else { [x.x, x.y] }
    }

    /// `(D rho, 0)` as a vector of the ambient space.
    fn hat(&self, p: [f64; 2]) -> Vec3 {
        if self.dim() == 1 { Vec3::new(p[0], 0.0, 0.0) } else { Vec3::new(p[0], p[1], 0.0) }
    }

    fn last(&self, v: Vec3) -> f64 {
        if self.dim() == 1 { v.y } else { v.z }
    }

    /// Radius through the block active at `xp`, which must also be active on
    /// the whole stencil.
    fn block_at(&self, xp: [f64; 2], block: usize) -> Result<f64, ForwardError> {
        let x = self.lift(xp).ok_or(ForwardError::OutsideDomain(xp))?;
        if !self.refr.domain.contains(x) {
            return Err(ForwardError::OutsideDomain(xp));
        }
        match self.refr.active(x) {
            Some((i, r)) if i == block && self.refr.refractor_map(x, DEFAULT_TIE_TOL).len() == 1 => Ok(r),
            _ => Err(ForwardError::Ridge(xp)),
        }
    }

    /// `rho` and `D rho` by the five-point central stencil.
    pub fn point(&self, xp: [f64; 2]) -> Result<ChartPoint, ForwardError> {
        let x = self.lift(xp).ok_or(ForwardError::OutsideDomain(xp))?;
        if !self.refr.domain.contains(x) {
            return Err(ForwardError::OutsideDomain(xp));
        }
        let (block, rho) = self.refr.active(x).ok_or(ForwardError::OutsideDomain(xp))?;
        let h = self.h_fd;
        let mut grad = [0.0; 2];
        for (k, g) in grad.iter_mut().enumerate().take(self.dim()) {
            let at = |s: f64| {
                let mut q = xp;
                q[k] += s;
                self.block_at(q, block)
            };
            *g = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        }
        Ok(ChartPoint { x, rho, grad })
    }

    /// `F(x', u, p)` of the map `Z = F D(rho^2)` onto `{x_n = 0}`.
    pub fn big_f(&self, xp: [f64; 2], u: f64, p: [f64; 2], kappa: RefractionRatio) -> Option<f64> {
        let d = self.dim();
        let pp: f64 = (0..d).map(|k| p[k] * p[k]).sum();
        let px: f64 = (0..d).map(|k| p[k] * xp[k]).sum();
        let g = (u * u + pp - px * px).sqrt();
        let ph = phi(u / g, kappa)?;
        Some(0.5 * ph / (-g + (u + px) * ph))
    }

    /// Point where the ray refracted at `x'` meets `{x_n = c}`.
    pub fn forward_map(&self, xp: [f64; 2], c: f64) -> Result<Vec3, ForwardError> {
        let cp = self.point(xp)?;
        let kappa = self.refr.family.kappa().ok_or(ForwardError::Tir(xp))?;
        let d = self.dim();
        let (u, p) = (cp.rho, cp.grad);
        let pp: f64 = (0..d).map(|k| p[k] * p[k]).sum();
        let px: f64 = (0..d).map(|k| p[k] * xp[k]).sum();
        let g = (u * u + pp - px * px).sqrt();
        let ph = phi(u / g, kappa).ok_or(ForwardError::Tir(xp))?;
        let f = 0.5 * ph / (-g + (u + px) * ph);
        // the map onto x_n = 0, then a slide along the ray to x_n = c
        let w = self.hat(p) * (2.0 * u * f);
        let s = cp.x * u;
        let xn = self.last(s);
        let t = (xn - c) / xn;
        // y_n has the sign of 1 - Phi (rho + D rho . x') / G
        let a = 1.0 - ph * (u + px) / g;
        let ahead = !self.forward_only || (c - xn) * a > 0.0;
        if !(t.is_finite() && f.is_finite() && ahead) {
            return Err(ForwardError::NoIntersection(xp));
        }
        Ok(s + (w - s) * t)
    }

    /// Planar coordinates of `forward_map`.
    fn z_coords(&self, xp: [f64; 2], c: f64) -> Result<[f64; 2], ForwardError> {
        let z = self.forward_map(xp, c)?;
        Ok(self.project(z))
    }

    /// Jacobian `DZ` by central differences of `forward_map` with step `h`.
    pub fn dz(&self, xp: [f64; 2], c: f64, h: f64) -> Result<[[f64; 2]; 2], ForwardError> {
        let d = self.dim();
        let mut m = [[0.0; 2]; 2];
        for j in 0..d {
            let mut a = xp;
            let mut b = xp;
            a[j] += h;
            b[j] -= h;
            let (za, zb) = (self.z_coords(a, c)?, self.z_coords(b, c)?);
            for i in 0..d {
                m[i][j] = (za[i] - zb[i]) / (2.0 * h);
            }
        }
        Ok(m)
    }

    /// `det DZ` through the Monge-Ampere form for the plane `{x_n = 0}`:
    /// `det(D^2 rho + A) (2 rho)^(n-1) F^(n-2) (F + D rho . D_p F)`, with the
    /// derivatives of `rho` and `F` by central differences of step `h`.
    pub fn det_dz_ma(&self, xp: [f64; 2], h: f64) -> Result<f64, ForwardError> {
        let d = self.dim();
        let kappa = self.refr.family.kappa().ok_or(ForwardError::Tir(xp))?;
        let cp = self.point(xp)?;
        let (u, p) = (cp.rho, cp.grad);
        let f_at = |xq: [f64; 2], uq: f64, pq: [f64; 2]| self.big_f(xq, uq, pq, kappa).ok_or(ForwardError::Tir(xp));
        let f = f_at(xp, u, p)?;
        let mut fx = [0.0; 2];
        let mut fp = [0.0; 2];
        let hf = 1e-6;
        for k in 0..d {
            let (mut a, mut b) = (xp, xp);
            a[k] += hf;
            b[k] -= hf;
            fx[k] = (f_at(a, u, p)? - f_at(b, u, p)?) / (2.0 * hf);
            let (mut a, mut b) = (p, p);
            a[k] += hf;
            b[k] -= hf;
            fp[k] = (f_at(xp, u, a)? - f_at(xp, u, b)?) / (2.0 * hf);
        }
        let fu = (f_at(xp, u + hf, p)? - f_at(xp, u - hf, p)?) / (2.0 * hf);
        // Hessian from differences of the gradient
        let mut hess = [[0.0; 2]; 2];
        for j in 0..d {
            let (mut a, mut b) = (xp, xp);
            a[j] += h;
            b[j] -= h;
            let (ga, gb) = (self.point(a)?.grad, self.point(b)?.grad);
            for i in 0..d {
                hess[i][j] = (ga[i] - gb[i]) / (2.0 * h);
            }
        }
        let dp_fp: f64 = (0..d).map(|k| p[k] * fp[k]).sum();
        let den = u * (f + dp_fp);
        let mut m = hess;
        for i in 0..d {
            for j in 0..d {
                m[i][j] += ((f + u * fu) * p[i] * p[j] + u * p[i] * fx[j]) / den;
            }
        }
        let n = d as i32 + 1;
        let v = det(m, d) * (2.0 * u).powi(n - 1) * f.powi(n - 2) * (f + dp_fp);
        if v.is_finite() { Ok(v) } else { Err(ForwardError::Tir(xp)) }
    }
}

pub fn det(m: [[f64; 2]; 2], d: usize) -> f64 {
    if d == 1 { m[0][0] } else { m[0][0] * m[1][1] - m[0][1] * m[1][0] }
}

/// Density of hits on the plane `{x_n = c}`, binned on a uniform grid and
/// read back by bilinear interpolation between cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneHistogram {
    pub origin: [f64; 2],
    pub cell: [f64; 2],
    pub counts: [usize; 2],
    pub dim: usize,
    /// Energy per unit area, row-major in the second coordinate.
    pub values: Vec<f64>,
    pub samples: u64,
}

/// Scott's rule width `3.5 sigma n^(-1/(d+2))`.
pub fn scott_width(values: &[f64], d: usize) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    3.5 * var.sqrt() * n.powf(-1.0 / (d as f64 + 2.0))
}

impl PlaneHistogram {
    /// Traces `n_rays` rays onto `{x_n = c}` and bins the hits.
    pub fn trace(refr: &PolyBlockRefractor, c: f64, n_rays: u64, seed: u64) -> Result<Self, ForwardError> {
        let chart = RadialChart::new(refr);
        let d = chart.dim();
        let batches = n_rays.div_ceil(BATCH as u64);
        let pts: Vec<[f64; 2]> = (0..batches)
            .into_par_iter()
            .flat_map_iter(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b);
                let count = (n_rays - b * BATCH as u64).min(BATCH as u64);
                let mut out = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let x = refr.domain.sample(&mut rng);
                    if let Some(z) = plane_hit(refr, x, c, d) {
                        out.push(chart.project(z));
                    }
                }
                out
            })
            .collect();
        if pts.len() < 2 {
            return Err(ForwardError::NoDensity(Vec3::ZERO));
        }
        let per_ray = refr.domain.total_energy() / n_rays as f64;
        Ok(Self::from_points(&pts, d, per_ray, n_rays))
    }

    /// Bins `pts`, each carrying `weight`.
    pub fn from_points(pts: &[[f64; 2]], d: usize, weight: f64, samples: u64) -> Self {
        let mut origin = [0.0; 2];
        let mut cell = [1.0; 2];
        let mut counts = [1usize; 2];
        for k in 0..d {
            let col: Vec<f64> = pts.iter().map(|p| p[k]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w = scott_width(&col, d).max(1e-300);
            counts[k] = (((hi - lo) / w).ceil() as usize).max(1);
            cell[k] = (hi - lo) / counts[k] as f64 * (1.0 + 1e-12);
            origin[k] = lo;
        }
        let mut values = vec![0.0; counts[0] * counts[1]];
        let area = cell[0] * if d == 2 { cell[1] } else { 1.0 };
        for p in pts {
            let i = (((p[0] - origin[0]) / cell[0]) as usize).min(counts[0] - 1);
            let j = if d == 2 { (((p[1] - origin[1]) / cell[1]) as usize).min(counts[1] - 1) } else { 0 };
            values[j * counts[0] + i] += weight / area;
        }
        PlaneHistogram { origin, cell, counts, dim: d, values, samples }
    }

    /// Bilinear interpolation between cell centers; `None` outside the
    /// centers' hull or next to an empty cell.
    pub fn eval(&self, z: [f64; 2]) -> Option<f64> {
        let d = self.dim;
        let mut idx = [0usize; 2];
        let mut frac = [0.0; 2];
        for k in 0..d {
            let s = (z[k] - self.origin[k]) / self.cell[k] - 0.5;
            if !(s >= 0.0) || s >= (self.counts[k] - 1) as f64 {
                return None;
            }
            idx[k] = s as usize;
            frac[k] = s - idx[k] as f64;
        }
        let at = |i: usize, j: usize| self.values[j * self.counts[0] + i];
        let corners: Vec<(f64, f64)> = if d == 1 {
            vec![(at(idx[0], 0), 1.0 - frac[0]), (at(idx[0] + 1, 0), frac[0])]
        } else {
            vec![
                (at(idx[0], idx[1]), (1.0 - frac[0]) * (1.0 - frac[1])),
                (at(idx[0] + 1, idx[1]), frac[0] * (1.0 - frac[1])),
                (at(idx[0], idx[1] + 1), (1.0 - frac[0]) * frac[1]),
                (at(idx[0] + 1, idx[1] + 1), frac[0] * frac[1]),
            ]
        };
        if corners.iter().any(|(v, _)| *v <= 0.0) {
            return None;
        }
        Some(corners.iter().map(|(v, w)| v * w).sum())
    }
}

/// Point where the ray refracted at direction `x` meets `{x_n = c}`.
pub fn plane_hit(refr: &PolyBlockRefractor, x: Vec3, c: f64, d: usize) -> Option<Vec3> {
    let (i, rho) = refr.active(x)?;
    let nu = refr.family.normal(x, refr.targets[i], refr.params[i])?;
    let m = refract(x, nu, refr.family.kappa()?).ok()?;
    let normal = if d == 1 { Vec3::E2 } else { Vec3::E3 };
    Screen::Plane { point: normal * c, normal }.intersect(x * rho, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub xp: [f64; 2],
    pub z: Vec3,
    pub det_dz: f64,
    pub g: f64,
    pub f: f64,
    /// `det DZ g(Z) sqrt(1 - |x'|^2) - f`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualField {
    pub points: Vec<ResidualPoint>,
    /// Grid points skipped (ridge, outside, no density estimate).
    pub skipped: usize,
    pub spacing: f64,
    pub h_fd: f64,
}

impl ResidualField {
    pub fn relative(&self) -> Vec<f64> {
        self.points.iter().map(|p| (p.residual / p.f).abs()).collect()
    }

    /// Fraction of evaluated points with relative residual at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let r = self.relative();
        if r.is_empty() {
            return 0.0;
        }
        r.iter().filter(|v| **v <= tol).count() as f64 / r.len() as f64
    }
}

/// Evaluates the Jacobian identity on a square grid of `n` points per side
/// over the projected cap shrunk to `interior` of its angular radius.
pub fn ma_residual<G>(refr: &PolyBlockRefractor, c: f64, n: usize, interior: f64, h_fd: f64, g: G) -> ResidualField
where
    G: Fn(Vec3) -> Option<f64> + Sync,
{
    let chart = RadialChart::new(refr);
    let d = chart.dim();
    let dom = &refr.domain;
    let cos_in = (dom.half_angle() * interior).cos();
    let proj: Vec<[f64; 2]> = {
        // bounding box of the projected cap from its rim
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for k in 0..=360 {
            let x = dom.direction(dom.half_angle(), (k as f64).to_radians());
            let p = chart.project(x);
            for a in 0..d {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = chart.project(dom.axis());
        for a in 0..d {
            lo[a] = lo[a].min(axis[a]);
            hi[a] = hi[a].max(axis[a]);
        }
        let step = |a: usize, i: usize| lo[a] + (hi[a] - lo[a]) * (i as f64 + 0.5) / n as f64;
        if d == 1 {
            (0..n).map(|i| [step(0, i), 0.0]).collect()
        } else {
            (0..n * n).map(|k| [step(0, k % n), step(1, k / n)]).collect()
        }
    };
    let spacing = {
        let a = proj[0];
        let b = proj[1.min(proj.len() - 1)];
        (b[0] - a[0]).abs()
    };
    let results: Vec<Option<ResidualPoint>> = proj
        .par_iter()
        .map(|xp| {
            let x = chart.lift(*xp)?;
            if x.dot(dom.axis()) < cos_in {
                return None;
            }
            let z = chart.forward_map(*xp, c).ok()?;
            let m = chart.dz(*xp, c, h_fd).ok()?;
            let gz = g(z)?;
            let det_dz = det(m, d);
            let xn = chart.last(x);
            let f = dom.density_at(x);
            Some(ResidualPoint { xp: *xp, z, det_dz, g: gz, f, residual: det_dz.abs() * gz * xn - f })
        })
        .collect();
    let points: Vec<ResidualPoint> = results.into_iter().flatten().collect();
    let in_cap = proj
        .iter()
        .filter(|xp| chart.lift(**xp).is_some_and(|x| x.dot(dom.axis()) >= cos_in))
        .count();
    ResidualField { skipped: in_cap - points.len(), points, spacing, h_fd }
}
