//! `refractor-forge` command line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::error::ConfigError;
use crate::geometry::Vec3;
use crate::refractor::{validate_scene, PolyBlockRefractor, Screen, TargetSpec};
use crate::scene::{anchor_interval, Problem, SceneFile, Solution, StageSummary};
use crate::solver::{family_for, solve_dirac, solve_general, solve_second_bvp, SolveError, SolveReport};
use crate::verify::{ma_residual, raytrace, PlaneHistogram, RadialChart};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "refractor-forge", version, about = "Design and check point-source refracting surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scene against the geometric assumptions.
    Validate(Common),
    /// Solve a scene and write `<out>.solution.json` and `<out>.history.csv`.
    Solve(Common),
    /// Ray trace a solution; writes `<out>.raytrace.json` and `<out>.raytrace.csv`.
    Verify(Common),
    /// Write the solved surface as a mesh or a radius table.
    Export(Common),
    /// Jacobian identity residual on a plane screen; writes `<out>.residual.csv`.
    Residual(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Obj,
    Ply,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scene file, or a solution file for verify/export/residual.
    #[arg(long, alias = "solution")]
    pub scene: PathBuf,
    /// Output prefix (defaults to the input path without extension).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    pub rays: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Obj)]
    pub format: Format,
    /// Mesh vertex count for export, grid points per side for residual.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Capture radius for verify (default `1e-6` times the largest target distance).
    #[arg(long)]
    pub capture: Option<f64>,
    /// Plane `x_n = c` for residual (default: the scene's plane screen).
    #[arg(long)]
    pub plane: Option<f64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solve(SolveError::NonConvergence { .. }) => EXIT_NONCONVERGENCE,
            CliError::Solve(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn out_path(c: &Common, suffix: &str) -> PathBuf {
    let base = c.out.clone().unwrap_or_else(|| {
        let s = c.scene.with_extension("");
        // drop a second ".solution" so outputs sit next to the scene
        match s.extension() {
            Some(e) if e == "solution" => s.with_extension(""),
            _ => s,
        }
    });
    let mut name = base.into_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

/// Parses the arguments, runs the command and returns the exit code.
/// Messages go to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            if code == EXIT_OK {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Validate(c) => cmd_validate(c),
        Command::Solve(c) => cmd_solve(c),
        Command::Verify(c) => cmd_verify(c),
        Command::Export(c) => cmd_export(c),
        Command::Residual(c) => cmd_residual(c),
    };
    match result {
        Ok(msg) => {
            let _ = out.write_all(msg.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the global worker pool at `REFRACTOR_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var("REFRACTOR_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn load_scene(c: &Common) -> Result<SceneFile, CliError> {
    Ok(SceneFile::from_json(&read(&c.scene)?)?)
}

pub fn cmd_validate(c: &Common) -> Result<String, CliError> {
    let file = load_scene(c)?;
    let mut s = String::new();
    match file.problem()? {
        Problem::Cap(scene) => {
            let r = validate_scene(&scene)?;
            let _ = writeln!(s, "scene OK ({:?}, kappa = {})", r.mode, scene.kappa.get());
            let _ = writeln!(s, "targets: {}", r.targets);
            let _ = writeln!(s, "source energy: {:.12}", r.source_energy);
            let _ = writeln!(s, "target weight: {:.12}", r.target_weight);
            let _ = writeln!(s, "inner product margin: {:.6e}", r.inner_product_margin);
            if let Some(b) = r.r0_bound {
                let _ = writeln!(s, "r0 = {} (bound {:.6e})", scene.r0, b);
            }
            if let Some(u) = r.ray_uniqueness {
                let _ = writeln!(s, "screen clear of the surface cone: {u}");
            }
        }
        Problem::Planar(p) => {
            let e = p.validate()?;
            let _ = writeln!(s, "planar scene OK: {} targets, energy {:.12}", p.targets.len(), e);
        }
    }
    Ok(s)
}

fn history_csv(rep: &SolveReport) -> String {
    let mut s = String::from("iteration,target,max_rel_error,measure_evaluations\n");
    for h in &rep.history {
        let t = h.target.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:e},{}", h.iteration, t, h.max_rel_error, h.measure_evaluations);
    }
    s
}

/// Solves the scene file; shared by `solve` and the commands that accept a
/// scene in place of a solution.
pub fn solve_file(file: &SceneFile) -> Result<(Solution, SolveReport), CliError> {
    match file.problem()? {
        Problem::Planar(p) => {
            let opts = file.solve_options(None)?;
            let (u, rep) = solve_second_bvp(&p, &opts)?;
            Ok((Solution::from_report(file, None, u.slopes.clone(), &rep), rep))
        }
        Problem::Cap(scene) => match &scene.targets {
            TargetSpec::Points(_) => {
                let fam = family_for(&scene)?;
                let opts = file.solve_options(Some(anchor_interval(&scene)?))?;
                let (refr, rep) = solve_dirac(&scene, &fam, &opts)?;
                Ok((Solution::from_report(file, Some(fam), refr.targets.clone(), &rep), rep))
            }
            TargetSpec::DensityGrid(_) => {
                let g = file
                    .general
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("density targets need a \"general\" block with x0 and schedule".into()))?;
                // the anchor parameter comes from x0
                let opts = file.options_with(0.0);
                let report = solve_general(&scene, &g.schedule, g.x0, &opts)?;
                let last = report.stages.last().ok_or_else(|| ConfigError::Invalid("empty schedule".into()))?;
                let mut sol = Solution::from_report(file, Some(last.refractor.family.clone()), last.refractor.targets.clone(), &last.report);
                sol.stages = report
                    .stages
                    .iter()
                    .map(|s| StageSummary {
                        n: s.n,
                        rho_x0: s.rho_x0,
                        sup_diff_prev: s.sup_diff_prev,
                        max_rel_error: s.report.max_rel_error(),
                    })
                    .collect();
                Ok((sol, last.report.clone()))
            }
        },
    }
}

pub fn cmd_solve(c: &Common) -> Result<String, CliError> {
    let file = load_scene(c)?;
    let (sol, rep) = solve_file(&file)?;
    let json = serde_json::to_string_pretty(&sol).expect("solution serializes") + "\n";
    let sol_path = out_path(c, ".solution.json");
    let hist_path = out_path(c, ".history.csv");
    write(&sol_path, &json)?;
    write(&hist_path, &history_csv(&rep))?;
    let mut s = String::new();
    let _ = writeln!(s, "solved {} targets in {} iterations ({} measure evaluations)", sol.params.len(), sol.iterations, sol.measure_evaluations);
    let _ = writeln!(s, "max relative mass error: {:.3e}", sol.max_rel_error);
    for (i, (b, (m, g))) in sol.params.iter().zip(sol.masses.iter().zip(&sol.weights)).enumerate() {
        let _ = writeln!(s, "  target {i}: b = {b:.15e}, mass = {m:.9e}, weight = {g:.9e}");
    }
    let _ = writeln!(s, "wrote {} and {}", sol_path.display(), hist_path.display());
    Ok(s)
}

/// Loads a solution, or solves when handed a scene file.
fn load_solution(c: &Common) -> Result<Solution, CliError> {
    let text = read(&c.scene)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", c.scene.display())))?;
    if v.get("params").is_some() {
        Ok(Solution::from_json(&text)?)
    } else {
        Ok(solve_file(&SceneFile::from_json(&text)?)?.0)
    }
}

fn cap_refractor(sol: &Solution) -> Result<PolyBlockRefractor, CliError> {
    Ok(sol.refractor()?)
}

pub fn cmd_verify(c: &Common) -> Result<String, CliError> {
    let sol = load_solution(c)?;
    let refr = cap_refractor(&sol)?;
    let far = sol.scene.mode.is_far();
    let capture = c.capture.unwrap_or_else(|| {
        if far {
            1e-6
        } else {
            1e-6 * refr.targets.iter().map(|p| p.norm()).fold(0.0, f64::max)
        }
    });
    let screen = if far { None } else { sol.scene.screen };
    let rep = raytrace(&refr, screen.as_ref(), c.rays, capture, c.seed);
    let json_path = out_path(c, ".raytrace.json");
    let csv_path = out_path(c, ".raytrace.csv");
    write(&json_path, &(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n"))?;
    let mut csv = String::from("target,x,y,z,solver_mass,traced_mass,sigma\n");
    for i in 0..refr.len() {
        let p = refr.targets[i];
        let _ = writeln!(csv, "{i},{},{},{},{:e},{:e},{:e}", p.x, p.y, p.z, sol.masses[i], rep.masses[i], rep.sigma(i));
    }
    write(&csv_path, &csv)?;
    let mut s = String::new();
    let _ = writeln!(s, "traced {} rays (seed {}), capture radius {:e}", rep.rays, rep.seed, capture);
    for i in 0..refr.len() {
        let _ = writeln!(s, "  target {i}: traced {:.6e}, solver {:.6e}", rep.masses[i], sol.masses[i]);
    }
    let _ = writeln!(s, "miss {:.3e}, total internal reflection {:.3e}, ridge rays {}", rep.miss, rep.tir, rep.ridge_count);
    let _ = writeln!(s, "wrote {} and {}", json_path.display(), csv_path.display());
    Ok(s)
}

/// Vertex directions and triangles of a cap with about `n` vertices: rings
/// of `6k` points at equally spaced polar angles.
pub fn cap_mesh(refr: &PolyBlockRefractor, n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let dom = &refr.domain;
    let rings = (((n.max(7) as f64 - 1.0) / 3.0).sqrt().floor() as usize).max(1);
    let mut dirs = vec![dom.axis()];
    let mut start = vec![0usize];
    for k in 1..=rings {
        start.push(dirs.len());
        let theta = dom.half_angle() * k as f64 / rings as f64;
        for j in 0..6 * k {
            dirs.push(dom.direction(theta, 2.0 * std::f64::consts::PI * j as f64 / (6 * k) as f64));
        }
    }
    let mut tris = Vec::new();
    for k in 1..=rings {
        let (m_in, m_out) = (if k == 1 { 1 } else { 6 * (k - 1) }, 6 * k);
        let (s_in, s_out) = (start[k - 1], start[k]);
        // walk both rings by angle
        let (mut a, mut b) = (0usize, 0usize);
        while a < m_in || b < m_out {
            let ang_in = (a as f64 + 1.0) / m_in as f64;
            let ang_out = (b as f64 + 1.0) / m_out as f64;
            let ia = s_in + a % m_in;
            let ob = s_out + b % m_out;
            if b < m_out && (a >= m_in || ang_out <= ang_in) {
                tris.push([ia, ob, s_out + (b + 1) % m_out]);
                b += 1;
            } else {
                tris.push([ia, ob, s_in + (a + 1) % m_in]);
                a += 1;
            }
        }
    }
    tris.retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
    (dirs, tris)
}

/// Sampled 2D profile ordered by signed angle from the axis.
pub fn arc_profile(refr: &PolyBlockRefractor, n: usize) -> Vec<(f64, Vec3)> {
    let dom = &refr.domain;
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let t = -dom.half_angle() + 2.0 * dom.half_angle() * i as f64 / (n - 1) as f64;
            (t, dom.direction(t.abs(), if t < 0.0 { std::f64::consts::PI } else { 0.0 }))
        })
        .collect()
}

pub fn cmd_export(c: &Common) -> Result<String, CliError> {
    let sol = load_solution(c)?;
    let refr = cap_refractor(&sol)?;
    let res = c.resolution.unwrap_or(1000);
    let radius = |x: Vec3| -> Result<f64, CliError> {
        let r = refr.radius(x);
        if r.is_finite() {
            Ok(r)
        } else {
            Err(ConfigError::Invalid(format!("no admissible block at direction {x:?}")).into())
        }
    };
    let (path, body) = match (c.format, refr.domain.dimension()) {
        (Format::Csv, 2) => {
            let mut s = String::from("angle,x1,x2,rho\n");
            for (t, x) in arc_profile(&refr, res) {
                let _ = writeln!(s, "{t},{},{},{}", x.x, x.y, radius(x)?);
            }
            (out_path(c, ".csv"), s)
        }
        (Format::Csv, _) => {
            let (dirs, _) = cap_mesh(&refr, res);
            let mut s = String::from("x1,x2,x3,rho\n");
            for x in dirs {
                let _ = writeln!(s, "{},{},{},{}", x.x, x.y, x.z, radius(x)?);
            }
            (out_path(c, ".csv"), s)
        }
        (_, 2) => return Err(ConfigError::Invalid("2D scenes export as csv".into()).into()),
        (fmt, _) => {
            let (dirs, tris) = cap_mesh(&refr, res);
            let verts = dirs.iter().map(|x| radius(*x).map(|r| *x * r)).collect::<Result<Vec<_>, _>>()?;
            if fmt == Format::Obj {
                let mut s = String::from("# refractor surface\n");
                for v in &verts {
                    let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
                }
                for t in &tris {
                    let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
                }
                (out_path(c, ".obj"), s)
            } else {
                let mut s = format!(
                    "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                    verts.len(),
                    tris.len()
                );
                for v in &verts {
                    let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
                }
                for t in &tris {
                    let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
                }
                (out_path(c, ".ply"), s)
            }
        }
    };
    write(&path, &body)?;
    Ok(format!("wrote {}\n", path.display()))
}

pub fn cmd_residual(c: &Common) -> Result<String, CliError> {
    let sol = load_solution(c)?;
    let refr = cap_refractor(&sol)?;
    let d = refr.domain.dimension();
    let plane = match (c.plane, sol.scene.screen) {
        (Some(p), _) => p,
        (None, Some(Screen::Plane { point, normal })) => {
            let up = if d == 2 { Vec3::E2 } else { Vec3::E3 };
            let n = normal.normalized().unwrap_or(up);
            if (n - up).norm() > 1e-12 && (n + up).norm() > 1e-12 {
                return Err(ConfigError::Invalid("the screen is not a plane x_n = c; pass --plane".into()).into());
            }
            up.dot(point)
        }
        _ => return Err(ConfigError::Invalid("residual needs a plane screen or --plane".into()).into()),
    };
    let hist = PlaneHistogram::trace(&refr, plane, c.rays, c.seed)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let chart = RadialChart::new(&refr);
    let n = c.resolution.unwrap_or(20);
    let field = ma_residual(&refr, plane, n, 0.8, 1e-3, |z| hist.eval(chart.project(z)));
    let mut s = String::from("x1,x2,z1,z2,z3,det_dz,g,f,residual,relative\n");
    for p in &field.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
            p.xp[0], p.xp[1], p.z.x, p.z.y, p.z.z, p.det_dz, p.g, p.f, p.residual, (p.residual / p.f).abs()
        );
    }
    let path = out_path(c, ".residual.csv");
    write(&path, &s)?;
    Ok(format!(
        "{} grid points ({} skipped), {:.1}% within 5% relative residual\nwrote {}\n",
        field.points.len(),
        field.skipped,
        100.0 * field.fraction_within(0.05),
        path.display()
    ))
}

/// Entry point of the binary.
pub fn main() -> i32 {
    init_threads();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
