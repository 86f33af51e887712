//! Semi-discrete solver: coordinate descent on the block parameters with the
//! first parameter held fixed, plus the general-measure and planar drivers.
//!
//! Every block other than the anchor starts at a value where the anchor block
//! beats it on the whole domain, so it receives no energy. The target with
//! the largest deficit is then grown by bisection on its own parameter until
//! its mass lands in a window just below its weight. Growing one block only
//! takes energy from the others, so no target ever exceeds its weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{BuildingBlockFamily, EnvelopeKind, Family};
use crate::error::ConfigError;
use crate::geometry::{angle_between, build_cap_quadrature, QuadratureRule, Vec3};
use crate::polygon::{max_affine_cell, ConvexPolygon, PlanarDensity};
use crate::refractor::{
    validate_scene, DensityGrid, MaxAffine, Mode, PlanarProblem, PolyBlockRefractor, SceneConfig, Target, TargetSpec,
};

fn default_mass_tol() -> f64 {
    1e-3
}
fn default_max_iters() -> usize {
    20_000
}
fn default_bisection_tol() -> f64 {
    1e-14
}
fn default_resolution() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Allowed `|M_i - g_i|` as a fraction of the total energy.
    #[serde(default = "default_mass_tol")]
    pub mass_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Anchor parameter of target 1.
    pub b1: f64,
    /// Absolute width at which a parameter bisection stops.
    #[serde(default = "default_bisection_tol")]
    pub bisection_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Quadrature nodes on the source cap.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

impl SolveOptions {
    pub fn with_anchor(b1: f64) -> Self {
        SolveOptions {
            mass_tol: default_mass_tol(),
            max_iters: default_max_iters(),
            b1,
            bisection_tol: default_bisection_tol(),
            seed: 0,
            resolution: default_resolution(),
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.mass_tol > 1e-8 && self.mass_tol < 1e-1) {
            return Err(ConfigError::Invalid(format!("mass_tol must lie in (1e-8, 1e-1), got {}", self.mass_tol)));
        }
        if !(self.bisection_tol > 0.0) {
            return Err(ConfigError::Invalid("bisection_tol must be positive".into()));
        }
        if !self.b1.is_finite() {
            return Err(ConfigError::Invalid("anchor b1 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Target moved in this iteration (none for the final row).
    pub target: Option<usize>,
    /// `max_i |M_i - g_i| / omega` before the move.
    pub max_rel_error: f64,
    pub measure_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub params: Vec<f64>,
    pub masses: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
    pub iterations: usize,
    pub measure_evaluations: usize,
    pub history: Vec<HistoryRow>,
}

impl SolveReport {
    pub fn max_rel_error(&self) -> f64 {
        max_rel_error(&self.masses, &self.weights, self.total)
    }
}

fn max_rel_error(m: &[f64], g: &[f64], total: f64) -> f64 {
    m.iter().zip(g).map(|(m, g)| (m - g).abs()).fold(0.0, f64::max) / total
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("anchor b1 = {b1} outside the admissible interval ({lo}, {hi})")]
    InfeasibleAnchor { b1: f64, lo: f64, hi: f64 },
    #[error("no convergence: {reason} (max relative mass error {:.3e} after {} iterations)", report.max_rel_error(), report.iterations)]
    NonConvergence { reason: String, report: Box<SolveReport> },
    #[error("anchoring through X0 failed: {0}")]
    Anchor(String),
}

/// Energy bookkeeping the descent needs.
pub trait MassModel {
    fn len(&self) -> usize;
    fn total(&self) -> f64;
    fn masses(&mut self, params: &[f64]) -> Vec<f64>;
    /// Freezes all blocks except `i` for subsequent `mass_of` calls.
    fn prepare(&mut self, params: &[f64], i: usize);
    fn mass_of(&mut self, t: f64) -> f64;
    /// Row-major `d mass_i / d param_j`, if the model can estimate it
    /// directly.
    fn jacobian(&mut self, _params: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Switch events per column for the threshold Jacobian.
const JACOBIAN_EVENTS: usize = 40;

const CHUNK: usize = 2048;

/// Quadrature-based masses on a source cap.
///
/// Keeps every block's values at the nodes plus, per node, the best and
/// second best block, so that moving one block costs one column. While a
/// single block is varied, blocks being monotone in their parameter means a
/// node won at some parameter stays won further in the gain direction; each
/// node remembers the bracket in which its status is still open and is only
/// re-evaluated inside it.
pub struct QuadratureModel<'a> {
    family: &'a Family,
    targets: &'a [Vec3],
    nodes: &'a [Vec3],
    fw: Vec<f64>,
    total: f64,
    columns: Vec<Vec<f64>>,
    column_params: Vec<f64>,
    worst: f64,
    min_env: bool,
    gain: f64,
    best: Vec<(f64, usize)>,
    second: Vec<(f64, usize)>,
    current: usize,
    others: Vec<(f64, usize)>,
    /// Per node, in gain coordinates `u = gain * t`: won for `u >= win_u`,
    /// lost for `u <= lose_u`.
    win_u: Vec<f64>,
    lose_u: Vec<f64>,
}

/// `(value, index)` pairs ordered by envelope preference, lower index first on ties.
fn precedes(min_env: bool, a: (f64, usize), b: (f64, usize)) -> bool {
    let better = if min_env { a.0 < b.0 } else { a.0 > b.0 };
    better || (a.0 == b.0 && a.1 < b.1)
}

impl<'a> QuadratureModel<'a> {
    pub fn new(family: &'a Family, targets: &'a [Vec3], rule: &'a QuadratureRule, density: impl Fn(Vec3) -> f64) -> Self {
        let fw: Vec<f64> = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * density(*x)).collect();
        let total = fw.iter().sum();
        let min_env = family.envelope() == EnvelopeKind::Min;
        QuadratureModel {
            family,
            targets,
            nodes: &rule.nodes,
            fw,
            total,
            columns: vec![Vec::new(); targets.len()],
            column_params: vec![f64::NAN; targets.len()],
            worst: if min_env { f64::INFINITY } else { f64::NEG_INFINITY },
            min_env,
            gain: family.gain_direction(),
            best: Vec::new(),
            second: Vec::new(),
            current: 0,
            others: Vec::new(),
            win_u: Vec::new(),
            lose_u: Vec::new(),
        }
    }

    fn column(&self, i: usize, t: f64) -> Vec<f64> {
        let (fam, y, worst) = (self.family, self.targets[i], self.worst);
        self.nodes.par_iter().map(|x| fam.evaluate(*x, y, t).unwrap_or(worst)).collect()
    }

    fn rebuild(&mut self) {
        let none = (self.worst, usize::MAX);
        let min_env = self.min_env;
        let cols = &self.columns;
        let (best, second): (Vec<_>, Vec<_>) = (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let (mut b, mut s) = (none, none);
                for (i, c) in cols.iter().enumerate() {
                    let v = (c[k], i);
                    if b.1 == usize::MAX || precedes(min_env, v, b) {
                        s = b;
                        b = v;
                    } else if s.1 == usize::MAX || precedes(min_env, v, s) {
                        s = v;
                    }
                }
                (b, s)
            })
            .unzip();
        self.best = best;
        self.second = second;
    }

    /// Replaces block `i`'s column by one whose values are no worse anywhere.
    fn improve(&mut self, i: usize, col: &[f64]) {
        let min_env = self.min_env;
        self.best.par_iter_mut().zip(self.second.par_iter_mut()).zip(col.par_iter()).for_each(|((b, s), &v)| {
            let v = (v, i);
            if b.1 == i {
                *b = v;
            } else if s.1 == i {
                *s = v;
                if precedes(min_env, *s, *b) {
                    std::mem::swap(b, s);
                }
            } else if precedes(min_env, v, *b) {
                *s = *b;
                *b = v;
            } else if s.1 == usize::MAX || precedes(min_env, v, *s) {
                *s = v;
            }
        });
    }

    /// Block `i` got worse everywhere: nodes where it was among the two
    /// best are recomputed from all columns.
    fn worsen(&mut self, i: usize) {
        let none = (self.worst, usize::MAX);
        let min_env = self.min_env;
        let cols = &self.columns;
        self.best.par_iter_mut().zip(self.second.par_iter_mut()).enumerate().for_each(|(k, (b, s))| {
            if b.1 != i && s.1 != i {
                return;
            }
            let (mut nb, mut ns) = (none, none);
            for (j, c) in cols.iter().enumerate() {
                let v = (c[k], j);
                if nb.1 == usize::MAX || precedes(min_env, v, nb) {
                    ns = nb;
                    nb = v;
                } else if ns.1 == usize::MAX || precedes(min_env, v, ns) {
                    ns = v;
                }
            }
            *b = nb;
            *s = ns;
        });
    }

    fn refresh(&mut self, params: &[f64]) {
        let changed: Vec<usize> =
            (0..params.len()).filter(|&i| self.column_params[i].to_bits() != params[i].to_bits()).collect();
        if changed.is_empty() {
            return;
        }
        if self.best.is_empty() || changed.len() > 1 {
            for &i in &changed {
                self.columns[i] = self.column(i, params[i]);
                self.column_params[i] = params[i];
            }
            self.rebuild();
            return;
        }
        let i = changed[0];
        let col = self.column(i, params[i]);
        let improved = self.gain * (params[i] - self.column_params[i]) > 0.0;
        if improved {
            self.improve(i, &col);
        }
        self.columns[i] = col;
        self.column_params[i] = params[i];
        if !improved {
            self.worsen(i);
        }
    }
}

impl MassModel for QuadratureModel<'_> {
    fn len(&self) -> usize {
        self.targets.len()
    }

    /// Central differences read off the nodes: for each node the parameter
    /// at which the best block would lose it to the second best, and the one
    /// at which the second best would take it. Each column uses the smallest
    /// margins, so no block is actually moved.
    fn jacobian(&mut self, params: &[f64]) -> Option<Vec<f64>> {
        self.refresh(params);
        let n = self.len();
        let (fam, targets, gain, worst) = (self.family, self.targets, self.gain, self.worst);
        // (column, margin in gain coordinates, weight, other block)
        let mut events: Vec<(usize, f64, f64, usize)> = self
            .nodes
            .par_iter()
            .zip(self.best.par_iter().zip(&self.second))
            .zip(&self.fw)
            .flat_map_iter(|((x, (b, s)), &w)| {
                let mut out = Vec::new();
                if s.1 != usize::MAX && b.0 != worst && s.0 != worst {
                    let lose = gain * (params[b.1] - fam.param_through(*x, targets[b.1], s.0));
                    let win = gain * (fam.param_through(*x, targets[s.1], b.0) - params[s.1]);
                    if lose.is_finite() {
                        out.push((b.1, lose.max(0.0), w, s.1));
                    }
                    if win.is_finite() {
                        out.push((s.1, win.max(0.0), w, b.1));
                    }
                }
                out.into_iter()
            })
            .collect();
        events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut jac = vec![0.0; n * n];
        for col in events.chunk_by(|a, b| a.0 == b.0) {
            let c = col[0].0;
            let k = JACOBIAN_EVENTS.min(col.len());
            let h = match col.get(k) {
                Some(next) => 0.5 * (col[k - 1].1 + next.1),
                None => col[k - 1].1 * (1.0 + 1e-12),
            };
            if h <= 0.0 {
                return None;
            }
            for &(_, _, w, other) in col.iter().take_while(|e| e.1 < h) {
                // per unit of parameter: the block gains the node, `other` loses it
                let d = gain * w / (2.0 * h);
                jac[c * n + c] += d;
                jac[other * n + c] -= d;
            }
        }
        Some(jac)
    }

    fn total(&self) -> f64 {
        self.total
    }

    fn masses(&mut self, params: &[f64]) -> Vec<f64> {
        self.refresh(params);
        let mut m = vec![0.0; self.len()];
        for (b, w) in self.best.iter().zip(&self.fw) {
            m[b.1] += w;
        }
        m
    }

    fn prepare(&mut self, params: &[f64], i: usize) {
        self.refresh(params);
        self.current = i;
        let u0 = self.gain * params[i];
        let min_env = self.min_env;
        let col = &self.columns[i];
        self.others = self.best.iter().zip(&self.second).map(|(b, s)| if b.1 == i { *s } else { *b }).collect();
        let (win, lose): (Vec<f64>, Vec<f64>) = self
            .others
            .iter()
            .zip(col)
            .map(|(o, &v)| {
                if o.1 == usize::MAX || precedes(min_env, (v, i), *o) {
                    (u0, f64::NEG_INFINITY)
                } else {
                    (f64::INFINITY, u0)
                }
            })
            .unzip();
        self.win_u = win;
        self.lose_u = lose;
    }

    fn mass_of(&mut self, t: f64) -> f64 {
        let i = self.current;
        let (fam, y, worst, min_env) = (self.family, self.targets[i], self.worst, self.min_env);
        let u = self.gain * t;
        let (nodes, others, fw) = (self.nodes, &self.others, &self.fw);
        self.win_u
            .par_chunks_mut(CHUNK)
            .zip(self.lose_u.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(c, (win, lose))| {
                let mut s = 0.0;
                for off in 0..win.len() {
                    let k = c * CHUNK + off;
                    let won = if u >= win[off] {
                        true
                    } else if u <= lose[off] {
                        false
                    } else {
                        let v = fam.evaluate(nodes[k], y, t).unwrap_or(worst);
                        let o = others[k];
                        let w = o.1 == usize::MAX || precedes(min_env, (v, i), o);
                        if w {
                            win[off] = u;
                        } else {
                            lose[off] = u;
                        }
                        w
                    };
                    if won {
                        s += fw[k];
                    }
                }
                s
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    }
}

/// Exact cell energies of a max-affine function on a convex polygon.
pub struct PolygonModel<'a> {
    domain: &'a ConvexPolygon,
    density: PlanarDensity,
    slopes: &'a [Vec3],
    total: f64,
    params: Vec<f64>,
    current: usize,
}

impl<'a> PolygonModel<'a> {
    pub fn new(domain: &'a ConvexPolygon, density: PlanarDensity, slopes: &'a [Vec3]) -> Self {
        let total = density.integrate(domain.vertices());
        PolygonModel { domain, density, slopes, total, params: Vec::new(), current: 0 }
    }
}

impl MassModel for PolygonModel<'_> {
    fn len(&self) -> usize {
        self.slopes.len()
    }
    fn total(&self) -> f64 {
        self.total
    }
    fn masses(&mut self, params: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.density.integrate(&max_affine_cell(self.domain, self.slopes, params, i)))
            .collect()
    }
    fn prepare(&mut self, params: &[f64], i: usize) {
        self.params = params.to_vec();
        self.current = i;
    }
    fn mass_of(&mut self, t: f64) -> f64 {
        self.params[self.current] = t;
        self.density.integrate(&max_affine_cell(self.domain, self.slopes, &self.params, self.current))
    }
}

/// Family-level data the descent needs for each target.
#[derive(Debug, Clone)]
pub struct DescentSetup {
    pub weights: Vec<f64>,
    pub start: Vec<f64>,
    /// Open parameter interval per target.
    pub intervals: Vec<(f64, f64)>,
    /// `+1` if increasing a parameter gives its block more energy.
    pub gain: f64,
    /// Parameters at which each block receives no energy. When given, the
    /// start is treated as a warm start: it is refined by Newton steps,
    /// then targets above their weight are pulled back into the feasible
    /// set before the descent.
    pub retreat: Option<Vec<f64>>,
}

/// Largest-deficit-first coordinate descent. `setup.start[0]` is the anchor
/// and is never changed.
pub fn descend<M: MassModel>(model: &mut M, setup: &DescentSetup, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    let n = model.len();
    if setup.retreat.is_none() || n < 3 {
        return descend_plain(model, setup, opts);
    }
    let mut params = setup.start.clone();
    let mut evals = 1;
    let mut masses = model.masses(&params);
    balance_anchor(model, setup, &mut params, &mut masses, &mut evals, setup.weights[0], 0.05);
    newton_polish(model, setup, &mut params, &mut masses, &mut evals, opts.mass_tol);
    let rest = DescentSetup { start: params, ..setup.clone() };
    let merge = |mut r: SolveReport| {
        r.measure_evaluations += evals;
        for h in &mut r.history {
            h.measure_evaluations += evals;
        }
        r
    };
    match descend_plain(model, &rest, opts) {
        Ok(r) => Ok(merge(r)),
        Err(SolveError::NonConvergence { reason, report }) => {
            Err(SolveError::NonConvergence { reason, report: Box::new(merge(*report)) })
        }
        Err(e) => Err(e),
    }
}

fn descend_plain<M: MassModel>(model: &mut M, setup: &DescentSetup, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    let n = model.len();
    let total = model.total();
    let g = &setup.weights;
    let mut params = setup.start.clone();
    let mut evals = 1;
    let mut masses = model.masses(&params);
    let mut history = Vec::new();
    let make_report = |params: &[f64], masses: &[f64], it: usize, evals: usize, history: &[HistoryRow]| SolveReport {
        params: params.to_vec(),
        masses: masses.to_vec(),
        weights: g.to_vec(),
        total,
        iterations: it,
        measure_evaluations: evals,
        history: history.to_vec(),
    };
    if n == 1 {
        history.push(HistoryRow { iteration: 0, target: None, max_rel_error: max_rel_error(&masses, g, total), measure_evaluations: evals });
        return Ok(make_report(&params, &masses, 0, evals, &history));
    }
    let window = opts.mass_tol * total / (n - 1) as f64;
    if let Some(retreat) = &setup.retreat {
        // a pulled-back block hands nodes to its neighbors; when one node
        // outweighs the window this can go back and forth, hence the cap
        for _ in 0..opts.max_iters.min(4 * n) {
            let over = (1..n)
                .map(|i| (i, masses[i] - g[i]))
                .filter(|p| p.1 > window)
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            let Some((i, _)) = over else { break };
            model.prepare(&params, i);
            // `over` has too much mass, `under` does not
            let (mut over, mut under) = (params[i], retreat[i]);
            let mut accepted = None;
            loop {
                let mid = 0.5 * (over + under);
                if (over - under).abs() <= opts.bisection_tol || mid == over || mid == under {
                    break;
                }
                evals += 1;
                let m = model.mass_of(mid);
                if m > g[i] {
                    over = mid;
                } else if m >= g[i] - window {
                    accepted = Some(mid);
                    break;
                } else {
                    under = mid;
                }
            }
            params[i] = accepted.unwrap_or(under);
            evals += 1;
            masses = model.masses(&params);
        }
    }
    if let Some(i) = (1..n).find(|&i| masses[i] > g[i] + opts.mass_tol * total) {
        return Err(SolveError::NonConvergence {
            reason: format!("initial state infeasible: target {i} starts with {} > {}", masses[i], g[i]),
            report: Box::new(make_report(&params, &masses, 0, evals, &history)),
        });
    }
    let mut stalled = vec![false; n];
    for it in 0..opts.max_iters {
        let err = max_rel_error(&masses, g, total);
        let pick = (1..n)
            .filter(|&i| !stalled[i])
            .map(|i| (i, g[i] - masses[i]))
            .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        let worst_deficit = (1..n).map(|i| g[i] - masses[i]).fold(f64::NEG_INFINITY, f64::max);
        if worst_deficit <= window || err <= opts.mass_tol {
            history.push(HistoryRow { iteration: it, target: None, max_rel_error: err, measure_evaluations: evals });
            return Ok(make_report(&params, &masses, it, evals, &history));
        }
        let Some((i, _)) = pick.filter(|p| p.1 > window) else {
            history.push(HistoryRow { iteration: it, target: None, max_rel_error: err, measure_evaluations: evals });
            // quantized masses can stall short of the window while the
            // tolerance itself already holds
            if err <= opts.mass_tol {
                return Ok(make_report(&params, &masses, it, evals, &history));
            }
            return Err(SolveError::NonConvergence {
                reason: "every deficient target is stalled (a single quadrature node carries more than the tolerance window)".into(),
                report: Box::new(make_report(&params, &masses, it, evals, &history)),
            });
        };
        history.push(HistoryRow { iteration: it, target: Some(i), max_rel_error: err, measure_evaluations: evals });

        model.prepare(&params, i);
        let lo_mass = g[i] - window;
        let hi_mass = g[i];
        let t0 = params[i];
        let (a, b) = setup.intervals[i];
        let gain_end = if setup.gain > 0.0 { b } else { a };
        let mut eval = |t: f64, evals: &mut usize| {
            *evals += 1;
            model.mass_of(t)
        };
        // `short` never has too much mass, `long` has at least lo_mass.
        let mut short = t0;
        let mut long = None;
        let mut accepted = None;
        if gain_end.is_finite() {
            let mut frac = 0.5;
            for _ in 0..200 {
                let t = gain_end + (t0 - gain_end) * frac;
                if t == t0 || t == gain_end {
                    break;
                }
                let m = eval(t, &mut evals);
                if m > hi_mass {
                    long = Some(t);
                    break;
                } else if m >= lo_mass {
                    accepted = Some(t);
                    break;
                }
                short = t;
                frac *= 0.5;
            }
        } else {
            let mut step = t0.abs().max(1.0) * 1e-3;
            for _ in 0..200 {
                let t = t0 + setup.gain * step;
                let m = eval(t, &mut evals);
                if m > hi_mass {
                    long = Some(t);
                    break;
                } else if m >= lo_mass {
                    accepted = Some(t);
                    break;
                }
                short = t;
                step *= 2.0;
            }
        }
        if accepted.is_none() {
            if let Some(mut l) = long {
                loop {
                    let mid = 0.5 * (short + l);
                    if (l - short).abs() <= opts.bisection_tol || mid == short || mid == l {
                        break;
                    }
                    let m = eval(mid, &mut evals);
                    if m > hi_mass {
                        l = mid;
                    } else if m >= lo_mass {
                        accepted = Some(mid);
                        break;
                    } else {
                        short = mid;
                    }
                }
            }
        }
        let new_t = accepted.unwrap_or(short);
        if new_t == t0 {
            stalled[i] = true;
        } else {
            params[i] = new_t;
            stalled.iter_mut().for_each(|s| *s = false);
            if accepted.is_none() {
                stalled[i] = true;
            }
        }
        evals += 1;
        masses = model.masses(&params);
    }
    let err = max_rel_error(&masses, g, total);
    history.push(HistoryRow { iteration: opts.max_iters, target: None, max_rel_error: err, measure_evaluations: evals });
    Err(SolveError::NonConvergence {
        reason: format!("max_iters = {} reached", opts.max_iters),
        report: Box::new(make_report(&params, &masses, opts.max_iters, evals, &history)),
    })
}

/// Shifts all non-anchor parameters together until the anchor's block is
/// within `rel * g0` of `g0`. The shift is read off the anchor's own
/// parameter, which only costs one column per trial.
fn balance_anchor<M: MassModel>(
    model: &mut M,
    setup: &DescentSetup,
    params: &mut [f64],
    masses: &mut Vec<f64>,
    evals: &mut usize,
    g0: f64,
    rel: f64,
) {
    for _ in 0..4 {
        if (masses[0] - g0).abs() <= rel * g0 {
            return;
        }
        model.prepare(params, 0);
        let t0 = params[0];
        // `short` gives the anchor too little, `long` too much
        let (mut short, mut long) = if masses[0] > g0 { (None, Some(t0)) } else { (Some(t0), None) };
        let mut step = t0.abs().max(1.0) * 1e-9;
        while short.is_none() || long.is_none() {
            if step > t0.abs().max(1.0) {
                return;
            }
            let t = if short.is_none() { t0 - setup.gain * step } else { t0 + setup.gain * step };
            *evals += 1;
            if model.mass_of(t) > g0 {
                long = Some(t);
            } else {
                short = Some(t);
            }
            step *= 2.0;
        }
        let (mut a, mut b) = (short.unwrap(), long.unwrap());
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            if mid == a || mid == b {
                break;
            }
            *evals += 1;
            let m = model.mass_of(mid);
            if (m - g0).abs() <= 0.2 * rel * g0 {
                a = mid;
                break;
            }
            if m > g0 {
                b = mid;
            } else {
                a = mid;
            }
        }
        let delta = a - t0;
        for i in 1..params.len() {
            let (lo, hi) = setup.intervals[i];
            let t = params[i] - delta;
            params[i] = if t <= lo {
                0.5 * (params[i] + lo)
            } else if t >= hi {
                0.5 * (params[i] + hi)
            } else {
                t
            };
        }
        *evals += 1;
        *masses = model.masses(params);
    }
}

/// Brings `params` close to the weights before the descent: the anchor is
/// balanced by a common shift of the others, then damped Newton steps fix
/// the rest. Aims half a window below each weight so that few blocks need
/// pulling back afterwards. `params` and `masses` are left at the last
/// accepted state.
fn newton_polish<M: MassModel>(
    model: &mut M,
    setup: &DescentSetup,
    params: &mut [f64],
    masses: &mut Vec<f64>,
    evals: &mut usize,
    tol: f64,
) {
    let n = model.len();
    let total = model.total();
    let half = 0.5 * tol * total / (n - 1) as f64;
    let goal: Vec<f64> = setup
        .weights
        .iter()
        .enumerate()
        .map(|(i, g)| if i == 0 { g + half * (n - 1) as f64 } else { g - half })
        .collect();
    let mut err = max_rel_error(masses, &goal, total);
    for _ in 0..8 {
        if err <= 0.25 * tol {
            break;
        }
        balance_anchor(model, setup, params, masses, evals, goal[0], 0.1 * tol * total / goal[0]);
        newton_steps(model, setup, params, masses, evals, &goal, 0.25 * tol, 3);
        let e = max_rel_error(masses, &goal, total);
        if e >= err {
            break;
        }
        err = e;
    }
    *evals += 1;
    model.masses(params);
}

/// Newton iterations toward `goal` using the model's Jacobian; true once
/// within `goal_tol`.
#[allow(clippy::too_many_arguments)]
fn newton_steps<M: MassModel>(
    model: &mut M,
    setup: &DescentSetup,
    params: &mut [f64],
    masses: &mut Vec<f64>,
    evals: &mut usize,
    goal: &[f64],
    goal_tol: f64,
    max_steps: usize,
) -> bool {
    let n = model.len();
    let m = n - 1;
    let total = model.total();
    let l1 = |ms: &[f64]| (1..n).map(|i| (ms[i] - goal[i]).abs()).sum::<f64>();
    let mut resid = l1(masses);
    for _ in 0..max_steps {
        if max_rel_error(masses, goal, total) <= goal_tol {
            return true;
        }
        *evals += 1;
        let Some(full) = model.jacobian(params) else { return false };
        let mut jac = vec![0.0; m * m];
        for i in 1..n {
            jac[(i - 1) * m..i * m].copy_from_slice(&full[i * n + 1..(i + 1) * n]);
            // a block with no boundary nodes: pretend it grows its weight
            // over a tenth of the interval
            if jac[(i - 1) * m + i - 1] == 0.0 {
                let (a, b) = setup.intervals[i];
                let width = if (b - a).is_finite() { b - a } else { params[i].abs().max(1.0) };
                jac[(i - 1) * m + i - 1] = setup.gain * setup.weights[i] / (0.1 * width);
            }
        }
        let rhs: Vec<f64> = (1..n).map(|i| goal[i] - masses[i]).collect();
        let Some(delta) = solve_dense(jac, rhs) else { return false };
        let mut step = 1.0;
        loop {
            if step < 1.0 / 64.0 {
                return false;
            }
            let trial: Vec<f64> = params
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if i == 0 {
                        return t;
                    }
                    let (a, b) = setup.intervals[i];
                    let x = t + step * delta[i - 1];
                    // stay strictly inside, never past the midpoint to an end
                    if x <= a {
                        0.5 * (t + a)
                    } else if x >= b {
                        0.5 * (t + b)
                    } else {
                        x
                    }
                })
                .collect();
            *evals += 1;
            let tm = model.masses(&trial);
            let r = l1(&tm);
            if r < resid {
                params.copy_from_slice(&trial);
                *masses = tm;
                resid = r;
                break;
            }
            step *= 0.5;
        }
    }
    max_rel_error(masses, goal, total) <= goal_tol
}

/// Gaussian elimination with partial pivoting on a row-major square matrix.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&x, &y| a[x * n + k].abs().total_cmp(&a[y * n + k].abs()))?;
        if a[p * n + k].abs() < 1e-300 {
            return None;
        }
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            b.swap(k, p);
        }
        for r in k + 1..n {
            let f = a[r * n + k] / a[k * n + k];
            if f != 0.0 {
                for c in k..n {
                    a[r * n + c] -= f * a[k * n + c];
                }
                b[r] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a[k * n + c] * x[c]).sum();
        x[k] = (b[k] - s) / a[k * n + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Block family matching the scene mode.
pub fn family_for(scene: &SceneConfig) -> Result<Family, ConfigError> {
    let pts = scene.support_points();
    match scene.mode {
        Mode::NearLt1 | Mode::NearGt1 => crate::blocks::oval_family(scene.kappa, scene.r0, &pts),
        Mode::FarLt1 => crate::blocks::ellipsoid_family(scene.kappa),
        Mode::FarGt1 => crate::blocks::hyperboloid_family(
            scene.kappa,
            scene.delta.ok_or_else(|| ConfigError::Invalid("far_gt1 needs delta".into()))?,
        ),
        Mode::MaBvp => Err(ConfigError::Invalid("ma_bvp has no cap family".into())),
    }
}

fn scene_targets(scene: &SceneConfig) -> Result<(Vec<Vec3>, Vec<f64>), ConfigError> {
    let t = scene
        .point_targets()
        .ok_or_else(|| ConfigError::Invalid("this solve needs point targets; discretize the density first".into()))?;
    let pts = t
        .iter()
        .map(|t| if scene.mode.is_far() { t.point.normalized().unwrap() } else { t.point })
        .collect();
    Ok((pts, t.iter().map(|t| t.weight).collect()))
}

/// Solves for point targets with `b_1 = opts.b1` held fixed.
pub fn solve_dirac(
    scene: &SceneConfig,
    family: &Family,
    opts: &SolveOptions,
) -> Result<(PolyBlockRefractor, SolveReport), SolveError> {
    solve_dirac_from(scene, family, opts, None)
}

/// As [`solve_dirac`], optionally starting from blocks placed on a
/// previously solved refractor for nearby targets.
fn solve_dirac_from(
    scene: &SceneConfig,
    family: &Family,
    opts: &SolveOptions,
    warm: Option<&PolyBlockRefractor>,
) -> Result<(PolyBlockRefractor, SolveReport), SolveError> {
    opts.check()?;
    validate_scene(scene)?;
    let (targets, weights) = scene_targets(scene)?;
    let (lo, hi) = family.anchor_interval(targets[0]);
    if !(opts.b1 > lo && opts.b1 < hi) {
        return Err(SolveError::InfeasibleAnchor { b1: opts.b1, lo, hi });
    }
    let rule = build_cap_quadrature(&scene.domain, opts.resolution)?;
    let cold: Vec<f64> = std::iter::once(opts.b1)
        .chain(targets[1..].iter().map(|y| family.dominated_start(*y, targets[0], opts.b1)))
        .collect();
    let intervals: Vec<(f64, f64)> = targets.iter().map(|y| family.param_interval(*y)).collect();
    let (start, retreat) = match warm {
        Some(prev) => (warm_start(family, prev, &targets, &rule, &cold, &intervals), Some(cold)),
        None => (cold, None),
    };
    let setup = DescentSetup { weights, intervals, start, gain: family.gain_direction(), retreat };
    let dom = scene.domain.clone();
    let mut model = QuadratureModel::new(family, &targets, &rule, |x| dom.density_at(x));
    let mut report = descend(&mut model, &setup, opts)?;
    let refr = PolyBlockRefractor::new(family.clone(), targets, report.params.clone(), scene.domain.clone())?;
    report.masses = refr.refractor_measure(&rule);
    Ok((refr, report))
}

/// Places each block (except the anchor) through `prev` at the mean
/// direction of the cell of the nearest old target.
fn warm_start(
    family: &Family,
    prev: &PolyBlockRefractor,
    targets: &[Vec3],
    rule: &QuadratureRule,
    cold: &[f64],
    intervals: &[(f64, f64)],
) -> Vec<f64> {
    let mut sums = vec![Vec3::ZERO; prev.len()];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        if let Some((i, _)) = prev.active(*x) {
            sums[i] += *x * *w;
        }
    }
    let centers: Vec<(Vec3, Vec3)> =
        (0..prev.len()).filter_map(|i| sums[i].normalized().map(|d| (prev.targets[i], d))).collect();
    let mut start = cold.to_vec();
    for j in 1..targets.len() {
        let Some(xc) = predict_direction(&centers, targets[j]) else { continue };
        let t = family.param_through(xc, targets[j], prev.radius(xc));
        let (a, b) = intervals[j];
        if t > a && t < b {
            start[j] = t;
        }
    }
    start
}

/// Direction a target should pull from, by a ridge-regularized affine fit
/// of cell mean direction against target over the nearest coarse cells.
fn predict_direction(centers: &[(Vec3, Vec3)], t: Vec3) -> Option<Vec3> {
    let mut near: Vec<&(Vec3, Vec3)> = centers.iter().collect();
    near.sort_by(|a, b| (a.0 - t).norm().total_cmp(&(b.0 - t).norm()));
    near.truncate(8);
    let first = near.first()?;
    if near.len() < 3 {
        return Some(first.1);
    }
    let k = near.len() as f64;
    let tbar = near.iter().fold(Vec3::ZERO, |s, c| s + c.0) * (1.0 / k);
    let dbar = near.iter().fold(Vec3::ZERO, |s, c| s + c.1) * (1.0 / k);
    let comp = |v: Vec3| [v.x, v.y, v.z];
    let mut tt = [0.0; 9];
    let mut dt = [0.0; 9];
    for c in &near {
        let (a, b) = (comp(c.0 - tbar), comp(c.1 - dbar));
        for r in 0..3 {
            for q in 0..3 {
                tt[r * 3 + q] += a[r] * a[q];
                dt[r * 3 + q] += b[r] * a[q];
            }
        }
    }
    let lambda = 1e-9 * (tt[0] + tt[4] + tt[8]).max(f64::MIN_POSITIVE);
    for r in 0..3 {
        tt[r * 3 + r] += lambda;
    }
    // A = DT (TT)^-1, so each row of A solves TT a = row of DT (TT is symmetric)
    let off = comp(t - tbar);
    let mut d = comp(dbar);
    for (r, dr) in d.iter_mut().enumerate() {
        let row = solve_dense(tt.to_vec(), dt[r * 3..r * 3 + 3].to_vec())?;
        *dr += (0..3).map(|q| row[q] * off[q]).sum::<f64>();
    }
    Vec3::new(d[0], d[1], d[2]).normalized().or(Some(first.1))
}

/// Solves a scene with the family implied by its mode.
pub fn solve_scene(scene: &SceneConfig, opts: &SolveOptions) -> Result<(PolyBlockRefractor, SolveReport), SolveError> {
    let fam = family_for(scene)?;
    solve_dirac(scene, &fam, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub low: SolveReport,
    pub high: SolveReport,
    /// Index of the first parameter that moved against the anchor shift.
    pub param_violation: Option<usize>,
    /// `min over nodes of s (rho_high - rho_low)`, `s` the growth sign of the blocks.
    pub envelope_gap: f64,
    pub envelopes_ordered: bool,
}

impl MonotoneReport {
    pub fn ordered(&self) -> bool {
        self.param_violation.is_none() && self.envelopes_ordered
    }
}

/// Solves at `b1` and `b1 + delta_b1` and compares parameters and envelopes.
pub fn check_monotone(
    scene: &SceneConfig,
    family: &Family,
    opts: &SolveOptions,
    delta_b1: f64,
) -> Result<MonotoneReport, SolveError> {
    let (r_lo, low) = solve_dirac(scene, family, opts)?;
    let mut hi_opts = opts.clone();
    hi_opts.b1 = opts.b1 + delta_b1;
    let (r_hi, high) = solve_dirac(scene, family, &hi_opts)?;
    let dir = if delta_b1 >= 0.0 { 1.0 } else { -1.0 };
    let param_violation = (0..low.params.len()).find(|&i| dir * (high.params[i] - low.params[i]) < -opts.bisection_tol);
    let growth = match family.monotone() {
        crate::blocks::Monotone::Increasing => dir,
        crate::blocks::Monotone::Decreasing => -dir,
    };
    let rule = build_cap_quadrature(&scene.domain, opts.resolution)?;
    let envelope_gap = rule
        .nodes
        .iter()
        .map(|x| growth * (r_hi.radius(*x) - r_lo.radius(*x)))
        .fold(f64::INFINITY, f64::min);
    let scale = rule.nodes.iter().map(|x| r_lo.radius(*x).abs()).fold(0.0, f64::max);
    Ok(MonotoneReport {
        low,
        high,
        param_violation,
        envelope_gap,
        envelopes_ordered: envelope_gap >= -1e-12 * scale,
    })
}

/// Splits the positive-mass cells of `grid` into `n` clusters of nearly
/// equal mass by recursive cuts along the wider grid direction. Returns the
/// mass-weighted centroid and total mass of each cluster; the masses add up
/// to the grid total.
pub fn cluster_equal_mass(grid: &DensityGrid, n: usize) -> Vec<Target> {
    let cells: Vec<(Vec3, f64, (f64, f64))> = grid
        .cells()
        .into_iter()
        .map(|(c, m, (i, j))| (c, m, ((i as f64 + 0.5) * grid.u.norm(), (j as f64 + 0.5) * grid.v.norm())))
        .collect();
    let mut out = Vec::with_capacity(n);
    split(cells, n.max(1), &mut out);
    out
}

fn split(mut cells: Vec<(Vec3, f64, (f64, f64))>, n: usize, out: &mut Vec<Target>) {
    if n == 1 || cells.len() <= 1 {
        let m: f64 = cells.iter().map(|c| c.1).sum();
        let c = cells.iter().fold(Vec3::ZERO, |s, c| s + c.0 * c.1) / m;
        out.push(Target { point: c, weight: m });
        // remaining requested clusters cannot be formed from a single cell
        return;
    }
    let span = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| (l.min(f(&c.2)), h.max(f(&c.2))));
        hi - lo
    };
    let use_u = span(&|p| p.0) >= span(&|p| p.1);
    cells.sort_by(|a, b| {
        let (ka, kb) = if use_u { ((a.2 .0, a.2 .1), (b.2 .0, b.2 .1)) } else { ((a.2 .1, a.2 .0), (b.2 .1, b.2 .0)) };
        ka.partial_cmp(&kb).unwrap()
    });
    let n1 = n / 2;
    let total: f64 = cells.iter().map(|c| c.1).sum();
    let want = total * n1 as f64 / n as f64;
    let mut acc = 0.0;
    let mut cut = 1;
    let mut best = f64::INFINITY;
    for (idx, c) in cells.iter().enumerate().take(cells.len() - 1) {
        acc += c.1;
        let d = (acc - want).abs();
        if d < best {
            best = d;
            cut = idx + 1;
        }
    }
    let right = cells.split_off(cut);
    split(cells, n1, out);
    split(right, n - n1, out);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralStage {
    pub n: usize,
    pub refractor: PolyBlockRefractor,
    pub report: SolveReport,
    /// Index (in the clustered list) of the target used as anchor.
    pub anchor_target: usize,
    pub rho_x0: f64,
    /// Sup over quadrature nodes of `|rho_N - rho_previous|`.
    pub sup_diff_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralReport {
    pub stages: Vec<GeneralStage>,
}

impl GeneralReport {
    pub fn last(&self) -> &PolyBlockRefractor {
        &self.stages.last().expect("at least one stage").refractor
    }
}

/// Largest `|X0|` allowed for anchoring.
pub fn anchor_radius_bound(scene: &SceneConfig) -> Result<f64, ConfigError> {
    let k = scene.kappa.get();
    let fam = family_for(scene)?;
    match (scene.mode, fam) {
        (Mode::NearLt1, _) => Ok(((1.0 - k) / (1.0 + k)).powi(3) * scene.r0),
        (Mode::NearGt1, Family::Oval(f)) => Ok(f.sigma() / (k - 1.0)),
        _ => Err(ConfigError::Invalid("anchoring through a point needs a near-field scene".into())),
    }
}

/// Discretizes the target density at each size in `schedule` and solves
/// with the refractor forced through the point `x0`.
///
/// `rho(x0)` equals the value of the block active at `x0`. With that block
/// used as the anchor, the anchor parameter is the unique root in closed form
/// (`b = |X0| + kappa |X0 - P|`). The active block is found by re-anchoring on
/// whichever target owns `x0` after a solve; if that cycles, bisection on the
/// anchor parameter of a fixed target takes over.
pub fn solve_general(
    scene: &SceneConfig,
    schedule: &[usize],
    x0: Vec3,
    opts: &SolveOptions,
) -> Result<GeneralReport, SolveError> {
    let grid = match &scene.targets {
        TargetSpec::DensityGrid(g) => g.clone(),
        TargetSpec::Points(_) => return Err(ConfigError::Invalid("solve_general needs a target density grid".into()).into()),
    };
    validate_scene(scene)?;
    let r = x0.norm();
    let dir = x0.normalized().ok_or_else(|| SolveError::Anchor("X0 must be nonzero".into()))?;
    if !scene.domain.contains(dir) {
        return Err(SolveError::Anchor(format!("X0 direction {dir:?} outside the source cap")));
    }
    let bound = anchor_radius_bound(scene)?;
    if !(r < bound) {
        return Err(SolveError::Anchor(format!("|X0| = {r} must be below {bound}")));
    }
    let fam = family_for(scene)?;
    let rule = build_cap_quadrature(&scene.domain, opts.resolution)?;
    let mut stages: Vec<GeneralStage> = Vec::new();
    for &n in schedule {
        let clusters = cluster_equal_mass(&grid, n);
        let mut by_angle: Vec<usize> = (0..clusters.len()).collect();
        let angle = |i: usize| angle_between(clusters[i].point.normalized().unwrap(), dir);
        by_angle.sort_by(|&a, &b| angle(a).partial_cmp(&angle(b)).unwrap());
        let mut anchor = by_angle[0];
        let mut tried = Vec::new();
        let stage = loop {
            tried.push(anchor);
            let (sub, order) = reordered(scene, &clusters, anchor);
            let b1 = fam.param_through(dir, clusters[anchor].point, r);
            let mut o = opts.clone();
            o.b1 = b1;
            let (refr, report) = solve_dirac_from(&sub, &fam, &o, stages.last().map(|s| &s.refractor))?;
            let (owner, rho) = refr.active(dir).ok_or_else(|| SolveError::Anchor("X0 direction not covered".into()))?;
            if owner == 0 {
                break Some((refr, report, anchor, rho, order));
            }
            // follow the owner; on a cycle take the nearest untried target
            let next = Some(order[owner])
                .filter(|i| !tried.contains(i))
                .or_else(|| by_angle.iter().copied().find(|i| !tried.contains(i)));
            match next {
                Some(i) => anchor = i,
                None => break None,
            }
        };
        let (refr, report, anchor, rho, _) = match stage {
            Some(s) => s,
            None => {
                let (refr, report, rho) = anchor_by_bisection(scene, &fam, &clusters, tried[0], dir, r, opts)?;
                let order = reordered(scene, &clusters, tried[0]).1;
                (refr, report, tried[0], rho, order)
            }
        };
        let sup_diff_prev = stages.last().map(|prev| {
            rule.nodes
                .iter()
                .map(|x| (refr.radius(*x) - prev.refractor.radius(*x)).abs())
                .fold(0.0, f64::max)
        });
        stages.push(GeneralStage { n, refractor: refr, report, anchor_target: anchor, rho_x0: rho, sup_diff_prev });
    }
    Ok(GeneralReport { stages })
}

/// Scene with point targets, `anchor` moved to the front. Also returns the
/// original index of each reordered target.
fn reordered(scene: &SceneConfig, clusters: &[Target], anchor: usize) -> (SceneConfig, Vec<usize>) {
    let mut order: Vec<usize> = vec![anchor];
    order.extend((0..clusters.len()).filter(|&i| i != anchor));
    let mut targets: Vec<Target> = order.iter().map(|&i| clusters[i]).collect();
    // exact conservation against the source energy
    let energy = scene.domain.total_energy();
    let sum: f64 = targets.iter().map(|t| t.weight).sum();
    for t in &mut targets {
        t.weight *= energy / sum;
    }
    let mut sub = scene.clone();
    sub.targets = TargetSpec::Points(targets);
    (sub, order)
}

fn anchor_by_bisection(
    scene: &SceneConfig,
    fam: &Family,
    clusters: &[Target],
    anchor: usize,
    dir: Vec3,
    r: f64,
    opts: &SolveOptions,
) -> Result<(PolyBlockRefractor, SolveReport, f64), SolveError> {
    let (sub, _) = reordered(scene, clusters, anchor);
    let (lo, hi) = fam.anchor_interval(clusters[anchor].point);
    let solve_at = |b1: f64| -> Result<(PolyBlockRefractor, SolveReport, f64), SolveError> {
        let mut o = opts.clone();
        o.b1 = b1;
        let (refr, rep) = solve_dirac(&sub, fam, &o)?;
        let rho = refr.radius(dir);
        Ok((refr, rep, rho))
    };
    let pad = 1e-9 * (hi - lo);
    let (mut a, mut b) = (lo + pad, hi - pad);
    let fa = solve_at(a)?.2 - r;
    let fb = solve_at(b)?.2 - r;
    if fa * fb > 0.0 {
        return Err(SolveError::Anchor(format!(
            "radius at x0 ranges over [{}, {}] on the anchor interval, |X0| = {r}",
            (fa + r).min(fb + r),
            (fa + r).max(fb + r)
        )));
    }
    let mut best = solve_at(0.5 * (a + b))?;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        best = solve_at(mid)?;
        let f = best.2 - r;
        if f.abs() <= opts.bisection_tol || (b - a).abs() <= opts.bisection_tol {
            break;
        }
        if (f > 0.0) == (fb > 0.0) {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(best)
}

/// Max-affine solution `u = max(x . p_i + b_i)` with `b_1 = opts.b1`.
pub fn solve_second_bvp(problem: &PlanarProblem, opts: &SolveOptions) -> Result<(MaxAffine, SolveReport), SolveError> {
    opts.check()?;
    problem.validate()?;
    let fam = crate::blocks::AffineFamily::new(problem.domain.vertices().to_vec())?;
    let slopes: Vec<Vec3> = problem.targets.iter().map(|t| t.point).collect();
    let weights: Vec<f64> = problem.targets.iter().map(|t| t.weight).collect();
    let start: Vec<f64> = std::iter::once(opts.b1)
        .chain(slopes[1..].iter().map(|p| fam.dominated_start(*p, slopes[0], opts.b1)))
        .collect();
    let setup = DescentSetup {
        weights,
        intervals: slopes.iter().map(|p| fam.param_interval(*p)).collect(),
        start,
        gain: fam.gain_direction(),
        retreat: None,
    };
    let mut model = PolygonModel::new(&problem.domain, problem.density, &slopes);
    let report = descend(&mut model, &setup, opts)?;
    let u = MaxAffine {
        domain: problem.domain.clone(),
        density: problem.density,
        slopes,
        params: report.params.clone(),
    };
    Ok((u, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Density, SourceDomain};
    use crate::refractor::Screen;
    use crate::snell::RefractionRatio;
    use approx::assert_relative_eq;

    fn scene(kappa: f64, pts: &[(f64, f64)], tau: f64, r0: f64) -> SceneConfig {
        let dom = SourceDomain::new(Vec3::E3, 20f64.to_radians(), Density::Uniform(1.0), 3).unwrap();
        let w = dom.total_energy() / pts.len() as f64;
        SceneConfig {
            mode: if kappa < 1.0 { Mode::NearLt1 } else { Mode::NearGt1 },
            kappa: RefractionRatio::new(kappa).unwrap(),
            targets: TargetSpec::Points(pts.iter().map(|(a, b)| Target { point: Vec3::new(*a, *b, 5.0), weight: w }).collect()),
            domain: dom,
            screen: Some(Screen::plane_at(5.0, 3)),
            r0,
            tau,
            delta: None,
        }
    }

    fn anchor_mid(s: &SceneConfig, frac: f64) -> SolveOptions {
        let fam = family_for(s).unwrap();
        let p1 = s.point_targets().unwrap()[0].point;
        let (lo, hi) = fam.anchor_interval(p1);
        let mut o = SolveOptions::with_anchor(lo + frac * (hi - lo));
        o.resolution = 5000;
        o
    }

    #[test]
    fn single_target_returns_immediately() {
        let s = scene(2.0 / 3.0, &[(0.0, 0.0)], 0.2, 0.5);
        let o = anchor_mid(&s, 0.5);
        let (_, rep) = solve_scene(&s, &o).unwrap();
        assert_eq!(rep.params, vec![o.b1]);
        assert_relative_eq!(rep.masses[0], s.domain.area(), max_relative = 1e-12);
    }

    #[test]
    fn symmetric_split_both_regimes() {
        for (k, tau, r0) in [(2.0 / 3.0, 0.2, 0.5), (1.5, 0.15, 0.2)] {
            let s = scene(k, &[(0.4, 0.0), (-0.4, 0.0)], tau, r0);
            let o = anchor_mid(&s, 0.5);
            let (_, rep) = solve_scene(&s, &o).unwrap();
            assert!(rep.max_rel_error() <= o.mass_tol, "{k}: {}", rep.max_rel_error());
            assert_eq!(rep.params[0], o.b1);
            // mirror targets at equal distance: the solved block matches the anchor
            let (lo, hi) = family_for(&s).unwrap().anchor_interval(Vec3::new(0.4, 0.0, 5.0));
            assert!((rep.params[1] - rep.params[0]).abs() < 2e-2 * (hi - lo), "{k}: {:?}", rep.params);
        }
    }

    #[test]
    fn anchor_outside_interval() {
        let s = scene(2.0 / 3.0, &[(0.0, 0.0), (0.3, 0.0)], 0.2, 0.5);
        let o = SolveOptions::with_anchor(10.0);
        assert!(matches!(solve_scene(&s, &o), Err(SolveError::InfeasibleAnchor { .. })));
    }

    #[test]
    fn clustering_conserves_mass() {
        let g = DensityGrid::uniform_disk(Vec3::new(0.0, 0.0, 5.0), Vec3::E1, Vec3::E2, 0.5, 40, 2.0);
        for n in [1, 4, 7, 16] {
            let c = cluster_equal_mass(&g, n);
            assert_eq!(c.len(), n);
            let s: f64 = c.iter().map(|t| t.weight).sum();
            assert_relative_eq!(s, 2.0, max_relative = 1e-12);
            let (mn, mx) = c.iter().fold((f64::INFINITY, 0.0f64), |(a, b), t| (a.min(t.weight), b.max(t.weight)));
            assert!(mx / mn < 1.2, "{n}: {mn} {mx}");
        }
    }

    #[test]
    fn second_bvp_two_targets() {
        let problem = PlanarProblem {
            domain: ConvexPolygon::unit_square(),
            density: PlanarDensity::uniform(1.0),
            targets: vec![
                Target { point: Vec3::new(-1.0, 0.0, 0.0), weight: 0.5 },
                Target { point: Vec3::new(1.0, 0.0, 0.0), weight: 0.5 },
            ],
        };
        let mut o = SolveOptions::with_anchor(0.0);
        o.mass_tol = 1e-7;
        let (u, rep) = solve_second_bvp(&problem, &o).unwrap();
        assert!(rep.max_rel_error() <= 1e-7);
        // boundary x = 1/2: -x + b1 = x + b2 at x = 1/2  =>  b2 = b1 - 1
        assert_relative_eq!(u.params[1], -1.0, epsilon = 1e-6);
    }
}
