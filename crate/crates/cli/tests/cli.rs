use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sieve-sim"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn passing_scenario_exits_zero() {
    let out = sim(&["run", path(&scenario("quiet-run.toml"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn failed_assertion_exits_one() {
    let out = sim(&["run", path(&scenario("wrong-assertion.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("FAIL"));
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "v = 1\nprotocol = \"sieve\"\n[sim]\nn = 4\nf = 1\nbogus = 3\n").unwrap();
    assert_eq!(sim(&["run", path(&broken)]).status.code(), Some(2));
    assert_eq!(
        sim(&["run", path(&dir.path().join("missing.toml"))]).status.code(),
        Some(2)
    );
    assert_eq!(sim(&["frobnicate"]).status.code(), Some(2));
    let q = scenario("quiet-run.toml");
    assert_eq!(sim(&["sweep", path(&q), "--seeds", "5..5"]).status.code(), Some(2));
    assert_eq!(sim(&["run", path(&q), "--mode", "partial"]).status.code(), Some(2));
}

#[test]
fn trace_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let out = sim(&["run", path(&scenario("quiet-run.toml")), "--trace-out", path(&trace)]);
    assert_eq!(out.status.code(), Some(0));
    let got = std::fs::read(&trace).unwrap();
    let want = std::fs::read(scenario("quiet-run.golden.jsonl")).unwrap();
    assert!(got == want, "trace differs from quiet-run.golden.jsonl");
}

#[test]
fn metrics_document_reflects_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.json");
    let out = sim(&[
        "run",
        path(&scenario("quiet-run.toml")),
        "--seed",
        "4",
        "--metrics-out",
        path(&m),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
    assert_eq!(doc["seed"], 4);
    assert_eq!(doc["confirms"], 5);
    assert_eq!(doc["aborts"], 0);
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["messages.invoke"], 5);
}

#[test]
fn mode_override_keeps_outcome() {
    let out = sim(&["run", path(&scenario("faulty-approver.toml")), "--mode", "hash"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mode=hash"));
}

#[test]
fn sweep_is_deterministic_and_agrees_with_run() {
    let dir = tempfile::tempdir().unwrap();
    let q = scenario("mixed-fault.toml");
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert_eq!(
        sim(&["sweep", path(&q), "--seeds", "0..12", "--summary-out", path(&a)])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        sim(&["sweep", path(&q), "--seeds", "0..12", "--summary-out", path(&b)])
            .status
            .code(),
        Some(0)
    );
    let lines = std::fs::read_to_string(&a).unwrap();
    assert_eq!(lines, std::fs::read_to_string(&b).unwrap());
    assert_eq!(lines.lines().count(), 12);

    let seven: serde_json::Value = serde_json::from_str(lines.lines().nth(7).unwrap()).unwrap();
    let m = dir.path().join("m.json");
    sim(&["run", path(&q), "--seed", "7", "--metrics-out", path(&m)]);
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
    for k in ["confirms", "aborts", "end_time", "epochs_started"] {
        assert_eq!(seven[k], run[k], "{k}");
    }
}

#[test]
fn failing_sweep_exits_one() {
    let out = sim(&["sweep", path(&scenario("wrong-assertion.toml")), "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
