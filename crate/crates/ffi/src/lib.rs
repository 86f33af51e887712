//! C ABI over `refractor-forge`.
//!
//! Scenes and solutions are opaque handles created from JSON and released
//! with their `_free` function. Every call returns an [`RfStatus`]; on
//! failure [`rf_last_error_message`] describes the problem for the calling
//! thread. Vectors are `double[3]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use refractor_forge::cli::{solve_file, CliError};
use refractor_forge::refractor::{validate_scene, PolyBlockRefractor};
use refractor_forge::scene::{Problem, SceneFile, Solution};
use refractor_forge::snell::{refract, RefractError};
use refractor_forge::solver::SolveError;
use refractor_forge::verify::raytrace;
use refractor_forge::{CartesianOval, ConfigError, RefractionRatio, Vec3};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or inconsistent input.
    Config = 3,
    AssumptionH1 = 4,
    AssumptionH2 = 5,
    AssumptionH3 = 6,
    AssumptionH4 = 7,
    Conservation = 8,
    InfeasibleAnchor = 9,
    NonConvergence = 10,
    OutsideAperture = 11,
    TotalInternalReflection = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Parsed scene.
pub struct RfScene {
    file: SceneFile,
}

/// Solved scene.
pub struct RfSolution {
    solution: Solution,
    refractor: Option<PolyBlockRefractor>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn config_status(e: &ConfigError) -> RfStatus {
    match e {
        ConfigError::H1 { .. } => RfStatus::AssumptionH1,
        ConfigError::H2 { .. } => RfStatus::AssumptionH2,
        ConfigError::H3 { .. } => RfStatus::AssumptionH3,
        ConfigError::H4 { .. } => RfStatus::AssumptionH4,
        ConfigError::Conservation { .. } => RfStatus::Conservation,
        _ => RfStatus::Config,
    }
}

fn fail(status: RfStatus, msg: impl Into<String>) -> RfStatus {
    set_error(msg);
    status
}

fn from_config(e: ConfigError) -> RfStatus {
    fail(config_status(&e), e.to_string())
}

fn from_cli(e: CliError) -> RfStatus {
    let status = match &e {
        CliError::Config(c) | CliError::Solve(SolveError::Config(c)) => config_status(c),
        CliError::Solve(SolveError::InfeasibleAnchor { .. }) => RfStatus::InfeasibleAnchor,
        CliError::Solve(SolveError::NonConvergence { .. }) => RfStatus::NonConvergence,
        _ => RfStatus::Config,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> RfStatus) -> RfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RfStatus::Panic, "internal panic"),
    }
}

unsafe fn vec3(p: *const f64) -> Vec3 {
    let s = std::slice::from_raw_parts(p, 3);
    Vec3::new(s[0], s[1], s[2])
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses a scene document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_scene_from_json(json: *const c_char, out: *mut *mut RfScene) -> RfStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(RfStatus::InvalidUtf8, "scene is not UTF-8");
        };
        match SceneFile::from_json(text) {
            Ok(file) => {
                *out = Box::into_raw(Box::new(RfScene { file }));
                RfStatus::Ok
            }
            Err(e) => from_config(e),
        }
    })
}

/// # Safety
/// `scene` must come from [`rf_scene_from_json`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn rf_scene_free(scene: *mut RfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Checks the scene; the status names the violated assumption.
///
/// # Safety
/// `scene` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_scene_validate(scene: *const RfScene) -> RfStatus {
    guard(|| {
        let Some(s) = scene.as_ref() else {
            return fail(RfStatus::NullPointer, "null scene");
        };
        let r = s.file.problem().and_then(|p| match p {
            Problem::Cap(c) => validate_scene(&c).map(|_| ()),
            Problem::Planar(p) => p.validate().map(|_| ()),
        });
        match r {
            Ok(()) => RfStatus::Ok,
            Err(e) => from_config(e),
        }
    })
}

/// Solves the scene with the anchor given in its solver block.
///
/// # Safety
/// `scene` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_scene_solve(scene: *const RfScene, out: *mut *mut RfSolution) -> RfStatus {
    guard(|| {
        if scene.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        match solve_file(&(*scene).file) {
            Ok((solution, _)) => {
                let refractor = solution.refractor().ok();
                *out = Box::into_raw(Box::new(RfSolution { solution, refractor }));
                RfStatus::Ok
            }
            Err(e) => from_cli(e),
        }
    })
}

/// Loads a solution document written by the command line tool.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_from_json(json: *const c_char, out: *mut *mut RfSolution) -> RfStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(RfStatus::InvalidUtf8, "solution is not UTF-8");
        };
        match Solution::from_json(text) {
            Ok(solution) => {
                let refractor = solution.refractor().ok();
                *out = Box::into_raw(Box::new(RfSolution { solution, refractor }));
                RfStatus::Ok
            }
            Err(e) => from_config(e),
        }
    })
}

/// # Safety
/// `sol` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_free(sol: *mut RfSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Number of targets (0 for NULL).
///
/// # Safety
/// `sol` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_len(sol: *const RfSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.solution.params.len())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> RfStatus {
    if out.is_null() {
        return fail(RfStatus::NullPointer, "null output buffer");
    }
    if len < src.len() {
        return fail(RfStatus::BufferTooSmall, format!("need {} entries, got {len}", src.len()));
    }
    std::slice::from_raw_parts_mut(out, src.len()).copy_from_slice(src);
    RfStatus::Ok
}

/// Copies the block parameters into `out[0..len]`.
///
/// # Safety
/// `sol` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_params(sol: *const RfSolution, out: *mut f64, len: usize) -> RfStatus {
    guard(|| match sol.as_ref() {
        Some(s) => copy_out(&s.solution.params, out, len),
        None => fail(RfStatus::NullPointer, "null solution"),
    })
}

/// Copies the energy received by each target into `out[0..len]`.
///
/// # Safety
/// `sol` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_masses(sol: *const RfSolution, out: *mut f64, len: usize) -> RfStatus {
    guard(|| match sol.as_ref() {
        Some(s) => copy_out(&s.solution.masses, out, len),
        None => fail(RfStatus::NullPointer, "null solution"),
    })
}

/// Solution document as a NUL-terminated JSON string; release it with
/// [`rf_string_free`]. NULL on failure.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_to_json(sol: *const RfSolution) -> *mut c_char {
    clear_error();
    let Some(s) = sol.as_ref() else {
        set_error("null solution");
        return ptr::null_mut();
    };
    match serde_json::to_string(&s.solution).ok().and_then(|t| CString::new(t).ok()) {
        Some(c) => c.into_raw(),
        None => {
            set_error("serialization failed");
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn rf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn refractor_of<'a>(sol: *const RfSolution) -> Result<&'a PolyBlockRefractor, RfStatus> {
    let s = sol.as_ref().ok_or_else(|| fail(RfStatus::NullPointer, "null solution"))?;
    s.refractor.as_ref().ok_or_else(|| fail(RfStatus::Config, "solution has no cap refractor"))
}

/// Radius of the solved surface in direction `x`.
///
/// # Safety
/// `sol` must be a live handle, `x` must point to 3 doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_radius(sol: *const RfSolution, x: *const f64, out: *mut f64) -> RfStatus {
    guard(|| {
        if x.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        let r = match refractor_of(sol) {
            Ok(r) => r,
            Err(s) => return s,
        };
        let Some(d) = vec3(x).normalized() else {
            return fail(RfStatus::Config, "zero direction");
        };
        let v = r.radius(d);
        if v.is_finite() {
            *out = v;
            RfStatus::Ok
        } else {
            fail(RfStatus::OutsideAperture, "no block covers this direction")
        }
    })
}

/// Monte-Carlo ray trace of the solution. `masses` receives the energy per
/// target; `miss` and `tir` may be NULL.
///
/// # Safety
/// `sol` must be a live handle and `masses` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_solution_raytrace(
    sol: *const RfSolution,
    n_rays: u64,
    capture_radius: f64,
    seed: u64,
    masses: *mut f64,
    len: usize,
    miss: *mut f64,
    tir: *mut f64,
) -> RfStatus {
    guard(|| {
        let r = match refractor_of(sol) {
            Ok(r) => r,
            Err(s) => return s,
        };
        if !(capture_radius > 0.0) {
            return fail(RfStatus::Config, "capture radius must be positive");
        }
        let far = (*sol).solution.scene.mode.is_far();
        let screen = if far { None } else { (*sol).solution.scene.screen };
        let rep = raytrace(r, screen.as_ref(), n_rays, capture_radius, seed);
        let st = copy_out(&rep.masses, masses, len);
        if st != RfStatus::Ok {
            return st;
        }
        if !miss.is_null() {
            *miss = rep.miss;
        }
        if !tir.is_null() {
            *tir = rep.tir;
        }
        RfStatus::Ok
    })
}

/// Radius in direction `x` of the oval `|X| + kappa |X - P| = b`.
///
/// # Safety
/// `p` and `x` must point to 3 doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn rf_oval_radius(p: *const f64, b: f64, kappa: f64, x: *const f64, out: *mut f64) -> RfStatus {
    guard(|| {
        if p.is_null() || x.is_null() || out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        let k = match RefractionRatio::new(kappa) {
            Ok(k) => k,
            Err(e) => return from_config(e),
        };
        let oval = match CartesianOval::new(vec3(p), b, k) {
            Ok(o) => o,
            Err(e) => return from_config(e),
        };
        let Some(d) = vec3(x).normalized() else {
            return fail(RfStatus::Config, "zero direction");
        };
        match oval.radius(d) {
            Ok(r) => {
                *out = r;
                RfStatus::Ok
            }
            Err(_) => fail(RfStatus::OutsideAperture, "direction outside the aperture"),
        }
    })
}

/// Refracted unit direction of the ray `x` at a surface with unit normal `nu`.
///
/// # Safety
/// `x`, `nu` and `m_out` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_refract(x: *const f64, nu: *const f64, kappa: f64, m_out: *mut f64) -> RfStatus {
    guard(|| {
        if x.is_null() || nu.is_null() || m_out.is_null() {
            return fail(RfStatus::NullPointer, "null argument");
        }
        let k = match RefractionRatio::new(kappa) {
            Ok(k) => k,
            Err(e) => return from_config(e),
        };
        match refract(vec3(x), vec3(nu), k) {
            Ok(m) => {
                std::slice::from_raw_parts_mut(m_out, 3).copy_from_slice(&[m.x, m.y, m.z]);
                RfStatus::Ok
            }
            Err(RefractError::TotalInternalReflection) => fail(RfStatus::TotalInternalReflection, "total internal reflection"),
            Err(e) => fail(RfStatus::Config, e.to_string()),
        }
    })
}
