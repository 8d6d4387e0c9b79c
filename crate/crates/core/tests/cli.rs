use std::process::{Command, Output};

fn wasiprof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wasiprof")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(wasiprof(&["--help"]).status.code(), Some(0));
    let v = wasiprof(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(wasiprof(&[]).status.code(), Some(2));
    assert_eq!(wasiprof(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wasiprof(&["gen-input", "--out", "x"]).status.code(), Some(2));
    assert_eq!(wasiprof(&["gen-input", "--size", "1", "--record-width", "wide", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn missing_replay_log_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = wasiprof(&["replay", "--log", missing.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("wasiprof: "), "{}", stderr(&o));
}

#[test]
fn unknown_profile_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    std::fs::write(&cfg, "runtimes = [\"native\"]\n").unwrap();
    let o = wasiprof(&[
        "profile",
        "--profile",
        "no-such-runtime",
        "--workload",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gen_input_writes_fixed_width_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("in.txt");
    let o = wasiprof(&["gen-input", "--size", "2KiB", "--record-width", "280", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = std::fs::read(&out).unwrap();
    assert_eq!(data.len(), 2048);
    assert!(data.split_inclusive(|&c| c == b'\n').all(|r| r.len() <= 280));
    assert_eq!(data.iter().filter(|&&c| c == b'\n').count(), 2048 / 280);
    assert!(data.iter().all(|c| c.is_ascii_alphanumeric() || *c == b'\n'));
}

#[test]
fn gen_input_zero_size_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wasiprof(&["gen-input", "--size", "0", "--out", dir.path().join("z").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_of_no_sessions_emits_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let html = dir.path().join("r.html");
    let findings = dir.path().join("f.jsonl");
    let o = wasiprof(&[
        "analyze",
        "--sessions",
        dir.path().to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--findings",
        findings.to_str().unwrap(),
        "--html",
        html.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1);
    assert!(std::fs::read(&findings).unwrap().is_empty());
    assert!(std::fs::read_to_string(&html).unwrap().contains("no data"));
}
