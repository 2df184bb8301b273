//! End-to-end CLI contract: the bundled fixture pipeline, artifact inventory,
//! and the exit-code conventions.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_spatgpd")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture_5x5")
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn run_ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn count_data_lines(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
}

#[test]
fn full_pipeline_on_bundled_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let fx = fixture();
    let grid = fx.join("grid.csv");
    let obs = fx.join("observations.csv");
    let base = [
        "--grid",
        grid.to_str().unwrap(),
        "--observations",
        obs.to_str().unwrap(),
        "--out-dir",
        &out,
        "--threads",
        "1",
        "--seed",
        "11",
    ];
    let with_base = |head: &[&str], extra: &[&str]| -> Vec<String> {
        head.iter()
            .chain(base.iter())
            .chain(extra.iter())
            .map(|s| s.to_string())
            .collect()
    };

    run_ok(&with_base(&["threshold-scan"], &["--cell", "0"]));
    run_ok(&with_base(&["k-factor"], &[]));
    run_ok(&with_base(&["fit"], &["--n-iter", "3000", "--burn-in", "1000"]));
    run_ok(&with_base(&["single-cell"], &["--n-iter", "3000", "--burn-in", "1000"]));
    run_ok(&with_base(&["return-levels"], &["--r", "100,1000,10000"]));
    run_ok(&with_base(&["predict"], &[]));
    run_ok(&with_base(&["diagnose"], &[]));

    let root = dir.path();
    for rel in [
        "scan_cell_0.csv",
        "k_report.csv",
        "k_cells.csv",
        "archive/theta.csv",
        "archive/beta.csv",
        "archive/sigma_theta.csv",
        "archive/sigma_phi.csv",
        "archive/phi.csv",
        "archive/accept.csv",
        "archive/log_post.csv",
        "archive/chain_meta.csv",
        "run_meta.csv",
        "chain_cell_0.csv",
        "single_cell_summary.csv",
        "return_levels.csv",
        "uncertainty_comparison.csv",
        "predictive_levels.csv",
        "diagnostics.csv",
    ] {
        assert!(root.join(rel).exists(), "missing artifact {rel}");
    }

    // 25 cells x 3 return periods + header
    assert_eq!(count_data_lines(&root.join("return_levels.csv")), 76);

    // every artifact opens with the config-hash/seed header
    let head = std::fs::read_to_string(root.join("return_levels.csv")).unwrap();
    assert!(head.starts_with("# spatgpd "), "missing artifact header");
}

#[test]
fn geojson_map_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let fx = fixture();
    run_ok(&[
        "fit",
        "--grid",
        fx.join("grid.csv").to_str().unwrap(),
        "--observations",
        fx.join("observations.csv").to_str().unwrap(),
        "--out-dir",
        &out,
        "--n-iter",
        "400",
        "--burn-in",
        "100",
        "--threads",
        "1",
    ]);
    run_ok(&[
        "return-levels",
        "--grid",
        fx.join("grid.csv").to_str().unwrap(),
        "--observations",
        fx.join("observations.csv").to_str().unwrap(),
        "--out-dir",
        &out,
        "--threads",
        "1",
        "--format",
        "geojson",
        "--r",
        "100",
    ]);
    let text = std::fs::read_to_string(dir.path().join("return_levels.geojson")).unwrap();
    let json_start = text.find('{').unwrap();
    assert!(text[json_start..].contains("\"FeatureCollection\""));
    assert!(text[json_start..].contains("\"features\""));
}

#[test]
fn exit_codes() {
    // missing data file: 2, with the path in the message
    let out = run(&[
        "fit",
        "--grid",
        "/nonexistent/grid.csv",
        "--observations",
        "/nonexistent/obs.csv",
        "--out-dir",
        "/tmp",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("/nonexistent/"),
        "stderr should name the missing path"
    );

    // config error: 1
    let fx = fixture();
    let out = run(&[
        "fit",
        "--grid",
        fx.join("grid.csv").to_str().unwrap(),
        "--observations",
        fx.join("observations.csv").to_str().unwrap(),
        "--out-dir",
        "/tmp",
        "--quantile",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(1));

    // unknown subcommand: 1
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    // help and version: 0
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
}
