use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--toy-per-class", "30", "--toy-size", "8", "--width", "4"];

fn ddm(args: &[&str], extra: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddm"))
        .args(args)
        .args(extra)
        .output()
        .unwrap()
}

fn condense(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let out = dir.join(name);
    let mut args = vec!["condense"];
    args.extend(SMALL);
    if !extra.contains(&"--ipc") {
        args.extend(["--ipc", "3"]);
    }
    args.extend(["--iters", "6", "--real-batch", "8", "--log-interval", "2"]);
    args.extend(extra);
    args.push("--out");
    ddm(&args, &[&out])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn condense_writes_set_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = condense(dir.path(), "s.ddmc", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("s.ddmc").exists());
    let csv = std::fs::read_to_string(dir.path().join("s.ddmc.metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss_total,loss_mmd,loss_mm,loss_cm,loss_icd");
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn single_image_per_class_warns_about_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let o = condense(dir.path(), "one.ddmc", &["--ipc", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn invalid_flags_exit_1_without_output() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [&["--ipc", "0"][..], &["--momentum", "1.5"], &["--k-frac", "0"], &["--layers", "7"]] {
        let o = condense(dir.path(), "bad.ddmc", extra);
        assert_eq!(o.status.code(), Some(1), "{extra:?}: {}", stderr(&o));
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    assert_eq!(ddm(&["condense", "--bogus"], &[]).status.code(), Some(1));
    assert_eq!(ddm(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn diverging_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = condense(dir.path(), "nan.ddmc", &["--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(!dir.path().join("nan.ddmc").exists());
}

#[test]
fn evaluate_reports_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("rand");
    let mut args = vec!["evaluate"];
    args.extend(SMALL);
    args.extend(["--source", "random", "--ipc", "2", "--epochs", "3", "--out"]);
    let o = ddm(&args, &[&prefix]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("rand.report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3 * 2);
    let summary = std::fs::read_to_string(dir.path().join("rand.summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("random,"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
}

#[test]
fn evaluate_missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ddmc");
    let mut args = vec!["evaluate"];
    args.extend(SMALL);
    args.push("--file");
    assert_eq!(ddm(&args, &[&missing]).status.code(), Some(1));
}

#[test]
fn diagnose_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(condense(dir.path(), "s.ddmc", &[]).status.code(), Some(0));
    let set = dir.path().join("s.ddmc");
    let prefix = dir.path().join("diag");
    let mut args = vec!["diagnose"];
    args.extend(SMALL);
    args.extend(["--drift", "--drift-epochs", "2", "--file"]);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddm"));
    let o = cmd
        .args(&args)
        .arg(&set)
        .arg("--against")
        .arg(&set)
        .arg("--out")
        .arg(&prefix)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let gaps = std::fs::read_to_string(dir.path().join("diag.style_gap.csv")).unwrap();
    let mut lines = gaps.lines();
    assert_eq!(lines.next(), Some("class,style_gap"));
    for line in lines {
        assert_eq!(line.split(',').nth(1), Some("0"), "{line}");
    }
    let drift = std::fs::read_to_string(dir.path().join("diag.drift.csv")).unwrap();
    assert_eq!(drift.lines().count(), 1 + 3);
    let texture = std::fs::read_to_string(dir.path().join("diag.texture.csv")).unwrap();
    let rows: Vec<&str> = texture.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].split_once(',').unwrap().1, rows[1].split_once(',').unwrap().1);
}
