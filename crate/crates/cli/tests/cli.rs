use std::path::Path;
use std::process::{Command, Output};

use bilevel_fw_cli::output::parse_polylines;
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilevel-fw")).args(args).output().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let j = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(j).unwrap().parse().unwrap()).collect()
}

#[test]
fn toy_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("toy");
    let o = bin(&[
        "run",
        "--problem",
        "toy",
        "--solver",
        "fw",
        "--hypergrad",
        "aid",
        "--tau",
        "1e-3",
        "--seeds",
        "0..4",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 0..5 {
        assert!(out.join(format!("trace_{seed}.csv")).is_file());
    }
    assert!(out.join("complexity_ledger.csv").is_file());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 5);
    assert_eq!(summary["solver"], "fw");
    assert!(std::fs::read_to_string(out.join("gap_plot.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn validate_reports_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"problem": {"kind": "toy"}, "solver_cfg": {"sigma": 0.1}}"#);
    let o = bin(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));

    let cfg = write_config(tmp.path(), r#"{"problem": {"kind": "toy"}, "solver_cfg": {"tau": 0.01, "sigma": 0.4}}"#);
    let o = bin(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("0.4"));

    let o = bin(&["validate", &cfg, "--sigma", "0.1", "--solver", "pwfw"]);
    assert!(o.status.success());
    let echoed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["solver"], "pwfw");
    assert_eq!(echoed["hypergrad"]["kind"], "aid");
    assert_eq!(echoed["solver_cfg"]["sigma"], 0.1);
}

#[test]
fn solver_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    // a Lipschitz constant far below the truth makes every trial step fail
    let cfg = write_config(
        tmp.path(),
        r#"{"problem": {"kind": "custom_polytope",
                        "domain": {"kind": "unit_simplex", "dim": 3},
                        "objective": {"kind": "quadratic", "q": [[50, 0, 0], [0, 50, 0], [0, 0, 50]], "c": [1, 0, -1]}},
            "solver_cfg": {"tau": 1e-6, "lipschitz": 1e-300}}"#,
    );
    let out = tmp.path().join("out");
    let o = bin(&["run", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn plot_points_match_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("one");
    let o = bin(&["run", "--problem", "toy", "--tau", "1e-4", "--seeds", "3", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    let best = column(&out.join("trace_3.csv"), "best_gap");
    let svg = std::fs::read_to_string(out.join("gap_plot.svg")).unwrap();
    let lines = parse_polylines(&svg);
    assert_eq!(lines.len(), 1);
    let (solver, points) = &lines[0];
    assert_eq!(solver, "fw");
    assert_eq!(points.len(), best.len());
    for (i, ((x, y), g)) in points.iter().zip(&best).enumerate() {
        assert_eq!(*x, i as f64);
        assert_eq!(*y, g.max(1e-16).log10());
    }
}

#[test]
fn compare_plot_has_one_curve_per_solver() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cmp");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hexagon_quartic.json");
    let o = bin(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--tau",
        "1e-3",
        "--seeds",
        "0..1",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let svg = std::fs::read_to_string(out.join("gap_plot.svg")).unwrap();
    let lines = parse_polylines(&svg);
    assert_eq!(lines.len(), 3);
    for (solver, points) in lines {
        assert!(out.join(&solver).join("trace_0.csv").is_file());
        let mean = summary["solvers"][&solver]["best_gap"]["mean"].as_array().unwrap();
        assert_eq!(points.len(), mean.len());
        for ((_, y), m) in points.iter().zip(mean) {
            // serde_json parses floats to within an ulp, not exactly
            let expect = m.as_f64().unwrap().max(1e-16).log10();
            assert!((y - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{solver}: {y} vs {expect}");
        }
    }
}
