use std::path::{Path, PathBuf};

use refractor_forge::cli::{run, EXIT_CONFIG, EXIT_IO, EXIT_NONCONVERGENCE, EXIT_OK};
use refractor_forge::scene::{SceneFile, Solution};
use refractor_forge::Vec3;

fn scene(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes").join(name)
}

fn forge(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("refractor-forge").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn solve_into(dir: &Path, name: &str) -> PathBuf {
    let prefix = dir.join(name.trim_end_matches(".json"));
    let s = scene(name);
    let (code, _, err) = forge(&["solve", "--scene", s.to_str().unwrap(), "--out", prefix.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let mut p = prefix.into_os_string();
    p.push(".solution.json");
    PathBuf::from(p)
}

#[test]
fn exit_codes() {
    let ok = scene("demo_lt1.json");
    assert_eq!(forge(&["validate", "--scene", ok.to_str().unwrap()]).0, EXIT_OK);
    for f in ["h1_fail", "h2_fail", "h3_fail", "h4_fail", "conservation_fail"] {
        let p = scene(&format!("fixtures/{f}.json"));
        let (code, _, err) = forge(&["validate", "--scene", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_CONFIG, "{f}");
        assert!(err.starts_with("error:"), "{f}: {err}");
    }
    let missing = scene("no_such_scene.json");
    assert_eq!(forge(&["validate", "--scene", missing.to_str().unwrap()]).0, EXIT_IO);
    assert_eq!(forge(&["validate"]).0, EXIT_CONFIG);
    assert_eq!(forge(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(forge(&["--help"]).0, EXIT_OK);
}

#[test]
fn iteration_cap_reports_nonconvergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = SceneFile::from_json(&std::fs::read_to_string(scene("demo_lt1.json")).unwrap()).unwrap();
    file.solver.max_iters = Some(1);
    let p = dir.path().join("capped.json");
    std::fs::write(&p, serde_json::to_string(&file).unwrap()).unwrap();
    let (code, _, err) = forge(&["solve", "--scene", p.to_str().unwrap()]);
    assert_eq!(code, EXIT_NONCONVERGENCE, "{err}");
}

#[test]
fn solve_writes_solution_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let sol_path = solve_into(dir.path(), "demo_lt1.json");
    let sol = Solution::from_json(&std::fs::read_to_string(&sol_path).unwrap()).unwrap();
    assert_eq!(sol.params.len(), 5);
    assert!(sol.max_rel_error <= 1e-3);
    let hist = std::fs::read_to_string(dir.path().join("demo_lt1.history.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("iteration,target,max_rel_error,measure_evaluations"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), sol.iterations + 1);
    // evaluation counts never decrease
    let evals: Vec<usize> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(evals.windows(2).all(|w| w[0] <= w[1]));
}

/// Every exported vertex lies on one of the ovals it was built from.
#[test]
fn obj_export_round_trips_onto_the_ovals() {
    let dir = tempfile::tempdir().unwrap();
    let sol_path = solve_into(dir.path(), "demo_lt1.json");
    let sol = Solution::from_json(&std::fs::read_to_string(&sol_path).unwrap()).unwrap();
    let kappa = sol.scene.kappa.unwrap();
    let out = dir.path().join("mesh");
    let (code, _, err) = forge(&[
        "export",
        "--solution",
        sol_path.to_str().unwrap(),
        "--format",
        "obj",
        "--resolution",
        "400",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = std::fs::read_to_string(dir.path().join("mesh.obj")).unwrap();
    let mut verts = Vec::new();
    let mut faces = 0;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|s| s.parse().unwrap()).collect();
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it.map(|s| s.parse().unwrap()).collect();
                assert_eq!(idx.len(), 3);
                assert!(idx.iter().all(|&i| i >= 1 && i <= verts.len()));
                faces += 1;
            }
            _ => {}
        }
    }
    assert!(verts.len() >= 300, "{}", verts.len());
    assert!(faces >= verts.len());
    for v in &verts {
        let best = sol
            .targets
            .iter()
            .zip(&sol.params)
            .map(|(p, b)| ((v.norm() + kappa * (*v - *p).norm() - b) / b).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8, "{v:?}: {best:e}");
    }
}

#[test]
fn planar_csv_export_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let sol_path = solve_into(dir.path(), "arc_2d.json");
    let out = dir.path().join("arc");
    let args = ["export", "--solution", sol_path.to_str().unwrap(), "--format", "csv", "--resolution", "101", "--out", out.to_str().unwrap()];
    assert_eq!(forge(&args).0, EXIT_OK);
    let text = std::fs::read_to_string(dir.path().join("arc.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|s| s.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 101);
    assert!(rows.windows(2).all(|w| w[0][0] < w[1][0]));
    assert!(rows.iter().all(|r| r[3] > 0.0 && r[3].is_finite()));
    // obj has no meaning for a planar arc
    let bad = ["export", "--solution", sol_path.to_str().unwrap(), "--format", "obj", "--out", out.to_str().unwrap()];
    assert_eq!(forge(&bad).0, EXIT_CONFIG);
}

#[test]
fn verify_accepts_a_solution() {
    let dir = tempfile::tempdir().unwrap();
    let sol_path = solve_into(dir.path(), "single_oval.json");
    let out = dir.path().join("single");
    let (code, stdout, err) =
        forge(&["verify", "--solution", sol_path.to_str().unwrap(), "--rays", "20000", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("traced 20000 rays"));
    let csv = std::fs::read_to_string(dir.path().join("single.raytrace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
