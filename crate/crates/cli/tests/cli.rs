use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kfe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kfe"))
        .args(args)
        .env_remove("KFE_THREADS")
        .output()
        .expect("kfe runs")
}

fn ok(args: &[&str]) -> String {
    let out = kfe(args);
    assert!(
        out.status.success(),
        "kfe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kfe(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast session of a preset.
fn simulate(preset: &str, dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--preset",
        preset,
        "--out",
        s(dir),
        "--rings",
        "8",
        "--steps",
        "120",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn keyframe_count(db: &Path) -> usize {
    read_json(&db.join("manifest.json"))["keyframes"]
        .as_array()
        .unwrap()
        .len()
}

fn selection_log(db: &Path) -> Vec<Value> {
    std::fs::read_to_string(db.join("selection.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["select", "--help"]);
    assert!(help.contains("--alpha") && help.contains("0.25"));
    assert!(help.contains("--beta") && help.contains("--policy"));
    assert!(ok(&["simulate", "--help"]).contains("corner-room"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["select", "--bogus"]), 2);
    assert_eq!(code(&[]), 2);
    let missing = dir.path().join("nope.json");
    assert_eq!(
        code(&[
            "simulate",
            "--world",
            s(&missing),
            "--out",
            s(&dir.path().join("x"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "select",
            "--session",
            s(dir.path()),
            "--out",
            s(&dir.path().join("db"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "select",
            "--session",
            s(dir.path()),
            "--out",
            "db",
            "--alpha",
            "3"
        ]),
        2
    );
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate("loop", &a, &["--waypoints", "8", "--interval", "4"]);
    simulate("loop", &b, &["--waypoints", "8", "--interval", "4"]);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 1);
    for name in names {
        let bytes = std::fs::read(a.join(&name)).unwrap();
        assert!(
            bytes == std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn select_keeps_a_consistent_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let (session, db) = (dir.path().join("s"), dir.path().join("db"));
    simulate("corner-room", &session, &[]);
    let out = ok(&["select", "--session", s(&session), "--out", s(&db)]);
    assert!(out.contains("keyframes"));
    let n = keyframe_count(&db);
    assert!(n >= 1);

    let log = selection_log(&db);
    let selected = log.iter().filter(|r| r["selected"] == true).count();
    assert_eq!(selected, n);
    let mut prev = 0.0;
    for r in &log {
        let b = r["running_bound"].as_f64().unwrap();
        assert!(b >= prev - 1e-12 && b >= -1e-12);
        prev = b;
    }
    let metrics = std::fs::read_to_string(db.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), log.len() + 1);
}

#[test]
fn corridor_triggers_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let (session, db) = (dir.path().join("s"), dir.path().join("db"));
    simulate("corridor", &session, &[]);
    let out = ok(&["select", "--session", s(&session), "--out", s(&db)]);
    assert!(out.contains("degeneracy"), "{out}");
    assert!(selection_log(&db)
        .iter()
        .any(|r| r["trigger"] == "degeneracy"));
}

#[test]
fn distance_policy_keeps_more_keyframes_on_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    simulate("loop", &session, &["--interval", "2"]);
    let count = |policy: &str, name: &str| {
        let db = dir.path().join(name);
        ok(&[
            "select",
            "--session",
            s(&session),
            "--out",
            s(&db),
            "--alpha",
            "0.45",
            "--policy",
            policy,
        ]);
        keyframe_count(&db)
    };
    let descriptor = count("descriptor", "d");
    let distance = count("distance:5m", "m");
    assert!(
        descriptor < distance,
        "descriptor {descriptor} vs distance {distance}"
    );
}

#[test]
fn submap_reports_greedy_and_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let (session, db) = (dir.path().join("s"), dir.path().join("db"));
    simulate("corner-room", &session, &[]);
    ok(&[
        "select",
        "--session",
        s(&session),
        "--out",
        s(&db),
        "--alpha",
        "0.4",
    ]);
    let scans = std::fs::read_to_string(session.join("session.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert!((2..=12).contains(&keyframe_count(&db)));
    let scan = (scans - 1).to_string();
    let text = ok(&[
        "submap",
        "--db",
        s(&db),
        "--session",
        s(&session),
        "--scan",
        &scan,
        "--n",
        "3",
        "--audit",
        "--brute-force",
    ]);
    let report: Value = serde_json::from_str(&text).unwrap();
    let greedy = report["lambda_min"].as_f64().unwrap();
    let best = report["brute_force"]["lambda_min"].as_f64().unwrap();
    assert!(greedy <= best + 1e-9);
    assert!(report["selected_ids"].as_array().unwrap().len() <= 3);
    assert!(report["marginals"]
        .as_array()
        .unwrap()
        .iter()
        .all(|m| m.as_f64().unwrap() >= 0.0));
    assert_eq!(
        code(&[
            "submap",
            "--db",
            s(&db),
            "--session",
            s(&session),
            "--scan",
            "999999"
        ]),
        2
    );
}

#[test]
fn summarize_honors_count_and_byte_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    simulate("corner-room", &session, &["--waypoints", "6"]);
    let total = std::fs::read_to_string(session.join("session.jsonl"))
        .unwrap()
        .lines()
        .count();

    let full = dir.path().join("full.json");
    ok(&[
        "summarize",
        "--session",
        s(&session),
        "--k",
        &total.to_string(),
        "--out",
        s(&full),
        "--method",
        "greedy",
    ]);
    let m = read_json(&full);
    assert!((m["value"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let small = dir.path().join("small.json");
    let ply = dir.path().join("map.ply");
    ok(&[
        "summarize",
        "--session",
        s(&session),
        "--k",
        "2",
        "--out",
        s(&small),
        "--merged-ply",
        s(&ply),
    ]);
    let m = read_json(&small);
    assert!(m["selected_ids"].as_array().unwrap().len() <= 2);
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply"));

    let bytes = m["serialized_bytes"].as_u64().unwrap();
    let budgeted = dir.path().join("budget.json");
    ok(&[
        "summarize",
        "--session",
        s(&session),
        "--budget",
        &bytes.to_string(),
        "--out",
        s(&budgeted),
    ]);
    let m = read_json(&budgeted);
    assert!(m["serialized_bytes"].as_u64().unwrap() <= bytes);

    assert_eq!(
        code(&[
            "summarize",
            "--session",
            s(&session),
            "--k",
            "0",
            "--out",
            s(&small)
        ]),
        2
    );
    assert_eq!(
        code(&["summarize", "--session", s(&session), "--out", s(&small)]),
        2
    );
}

#[test]
fn eval_writes_one_row_per_scan() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    simulate("corridor", &session, &["--waypoints", "10"]);
    let scans = std::fs::read_to_string(session.join("session.jsonl"))
        .unwrap()
        .lines()
        .count();
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--session", s(&session), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("scan_id,"));
    assert_eq!(text.lines().count(), scans + 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    simulate("corner-room", &session, &[]);
    let config = dir.path().join("cfg.json");
    // `rings` belongs to simulate and is ignored by select
    std::fs::write(&config, r#"{"alpha": 1.5, "rings": 4}"#).unwrap();

    let from_file = dir.path().join("f");
    ok(&[
        "select",
        "--config",
        s(&config),
        "--session",
        s(&session),
        "--out",
        s(&from_file),
    ]);
    let overridden = dir.path().join("o");
    ok(&[
        "select",
        "--config",
        s(&config),
        "--session",
        s(&session),
        "--out",
        s(&overridden),
        "--alpha",
        "0.05",
    ]);
    let alpha = |db: &Path| {
        read_json(&db.join("manifest.json"))["selector"]["alpha"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(alpha(&from_file), 1.5);
    assert_eq!(alpha(&overridden), 0.05);

    std::fs::write(&config, r#"{"not_a_flag": 1}"#).unwrap();
    assert_eq!(
        code(&[
            "select",
            "--config",
            s(&config),
            "--session",
            s(&session),
            "--out",
            s(&from_file)
        ]),
        2
    );
}
