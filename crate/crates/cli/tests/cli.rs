//! End-to-end runs of the `projseg` binary on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "width = 32\nheight = 32\nsample_points = 128\nepochs = 1\ncrf_epochs = 1\nviews_per_step = 2\n";

fn projseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = projseg(args);
    assert!(
        out.status.success(),
        "projseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("tables");
    let data = data.to_str().unwrap();
    let common = ["--config", &cfg, "--seed", "5"];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd, data];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        ok(&args)
    };
    assert!(run("generate", &["--family", "table", "--count", "4"]).contains("4 shapes (2 train, 2 test)"));
    run("views", &[]);
    run("render", &[]);
    run("train", &["--mode", "disjoint"]);
    run("infer", &[]);
    run("infer", &["--unary-only"]);
    let table = run("eval", &[]);
    assert!(table.contains("table") && table.contains("dataset avg"), "{table}");
    run("eval", &["--unary-only", "--split", "all"]);
    assert!(run("export", &[]).contains("exported 4 meshes"));

    let echoed = fs::read_to_string(Path::new(data).join("model/config.txt")).unwrap();
    assert!(
        echoed.contains("seed = 5") && echoed.contains("mode = \"disjoint\""),
        "{echoed}"
    );
    let ply = fs::read_to_string(Path::new(data).join("export/table_000.ply")).unwrap();
    assert!(ply.starts_with("ply\n"));
}

#[test]
fn ground_truth_export_uses_two_colors_for_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("t");
    let data = data.to_str().unwrap();
    ok(&["generate", data, "--config", &cfg, "--count", "2"]);
    ok(&["export", data, "--truth"]);
    let ply = fs::read_to_string(Path::new(data).join("export/table_000.ply")).unwrap();
    let mut colors: Vec<&str> = ply
        .lines()
        .filter(|l| l.starts_with("3 "))
        .map(|l| l.splitn(5, ' ').nth(4).unwrap())
        .collect();
    colors.sort();
    colors.dedup();
    assert_eq!(colors, vec!["135 86 146", "243 195 0"]);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    let out = projseg(&["train", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.json"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "width = 100\n").unwrap();
    let out = projseg(&["views", tmp.path().to_str().unwrap(), "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 8"));

    let out = projseg(&["generate", tmp.path().to_str().unwrap(), "--family", "teapot"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("teapot"));
}
