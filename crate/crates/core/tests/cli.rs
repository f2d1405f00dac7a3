use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thb-egg")).current_dir(dir).args(args).output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn square_init_solve_quality_gives_winslow_two() {
    let dir = tempfile::tempdir().unwrap();
    let geo = dir.path().join("square.json");
    assert!(run(dir.path(), &["geometry", "square", "--out", geo.to_str().unwrap()]).status.success());
    assert!(run(dir.path(), &["init", geo.to_str().unwrap()]).status.success());
    assert!(run(dir.path(), &["solve", "--method", "newton", "--report", "s.json"]).status.success());
    let out = run(dir.path(), &["quality", "--report", "q.json"]);
    assert_eq!(out.status.code(), Some(0));
    let q = json(&dir.path().join("q.json"));
    let lw = q["quality"]["values"]["winslow"].as_f64().unwrap();
    assert!((lw - 2.0).abs() <= 1e-9, "{lw}");
}

#[test]
fn picard_without_diffusion_warns() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["init", "builtin:skewed-quad"]).status.success());
    let out = run(dir.path(), &["solve", "--method", "picard", "--mu", "0", "--report", "p.json"]);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(2));
    let notes = json(&dir.path().join("p.json"))["notes"].to_string();
    assert!(notes.contains("ill-posed"), "{notes}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    // no state yet
    assert_eq!(run(dir.path(), &["solve"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["init", "builtin:nowhere"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.json"), r#"{"sides": {"south": {"degree": "three"}}}"#).unwrap();
    let out = run(dir.path(), &["init", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sides.south"));
    // the folded horseshoe cannot converge in one iteration
    assert!(run(dir.path(), &["init", "builtin:horseshoe"]).status.success());
    let out = run(dir.path(), &["solve", "--max-iters", "1", "--report", "s.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn adapt_on_horseshoe_reaches_bijectivity_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for k in 0..2 {
        assert!(run(dir.path(), &["init", "builtin:horseshoe"]).status.success());
        let name = format!("a{k}.json");
        let out = run(dir.path(), &["adapt", "--goal", "bijectivity", "--beta", "0.2", "--report", &name]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(std::fs::read(dir.path().join(&name)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["success"], true);
    assert_eq!(r["rounds"].as_array().unwrap().last().unwrap()["num_negative"], 0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"n0": 3, "solver": {"max_iters": 7}}"#).unwrap();
    assert!(run(dir.path(), &["--config", "c.json", "init", "builtin:square", "--n0", "5"]).status.success());
    let st = json(&dir.path().join("thb-egg.state.json"));
    assert_eq!(st["config"]["n0"], 5);
    assert_eq!(st["config"]["solver"]["max_iters"], 7);
    std::fs::write(dir.path().join("bad.json"), r#"{"n0": 3, "colour": 1}"#).unwrap();
    assert_eq!(run(dir.path(), &["--config", "bad.json", "solve"]).status.code(), Some(1));
}

#[test]
fn export_writes_svg_and_map() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["init", "builtin:annulus"]).status.success());
    let out = run(dir.path(), &["export", "svg", "--out", "a.svg", "--isolines", "5,7", "--elements"]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(dir.path().join("a.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 12);
    assert!(run(dir.path(), &["export", "json", "--out", "m.json"]).status.success());
    assert!(json(&dir.path().join("m.json"))["coeffs"].as_array().unwrap().len() > 0);
}
