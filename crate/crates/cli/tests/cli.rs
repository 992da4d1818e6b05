use std::fs;
use std::process::{Command, Output};

fn flock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flock"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn config_prints_parsable_preset() {
    let o = flock(&["config", "energy"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("kind = \"energy\""));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("energy.toml");
    fs::write(&path, &text).unwrap();
    let o = flock(&[
        "energy",
        "--config",
        path.to_str().unwrap(),
        "--trials",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn unknown_kind_is_an_error() {
    let o = flock(&["config", "nope"]);
    assert!(!o.status.success());
}

#[test]
fn mismatched_config_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poa.toml");
    fs::write(&path, stdout(&flock(&["config", "poa"]))).unwrap();
    let o = flock(&["balance", "--config", path.to_str().unwrap(), "--trials", "2"]);
    assert!(!o.status.success());
}

#[test]
fn poa_experiment_writes_csvs_and_emits_instance() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.toml");
    let emit = format!("0:1={}", inst.display());
    let o = flock(&[
        "poa",
        "--trials",
        "3",
        "--m",
        "3",
        "--n",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
        "--emit-instance",
        &emit,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("experiment,sweep_value,n,mean"));
    assert!(summary.contains("poa:poa,0.5,3,"));
    let trials = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    // Long format: 4 sweep points x 3 trials x 8 metrics plus header.
    assert_eq!(trials.lines().count(), 97);
    assert!(inst.exists());

    let o = flock(&["oracle", "--instance", inst.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn experiments_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = flock(&[
            "convergence",
            "--trials",
            "3",
            "--seed",
            "42",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let read = |d: &tempfile::TempDir| fs::read_to_string(d.path().join("trials.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn gen_then_run_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("i.toml");
    let trace = dir.path().join("trace.csv");
    let o = flock(&["gen", "--m", "4", "--n", "6", "--seed", "3", "--out", inst.to_str().unwrap()]);
    assert!(o.status.success());
    let o = flock(&[
        "run",
        "--instance",
        inst.to_str().unwrap(),
        "--eta",
        "0.9",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.contains("equilibrium") || last.contains("cap"), "{last}");
}

#[test]
fn run_controlled_with_cost_variant() {
    let o = flock(&["run", "--controlled", "--jitter", "0.1", "--max-rounds", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = flock(&["run", "--cost", "adaptive-eta", "--eta", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bound_reports_lambda_and_bound() {
    let o = flock(&["bound", "--a", "9", "--w-min", "5", "--w-max", "300"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("condition on grid: pass"));
    let bound: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("bound = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(bound >= 1.0);
}

#[test]
fn bound_rejects_inverted_bracket() {
    let o = flock(&["bound", "--w-min", "10", "--w-max", "1"]);
    assert!(!o.status.success());
}
