use std::path::Path;
use std::process::{Command, Output};

fn fedlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlab")).args(args).env("FEDLAB_OUT", out).output().unwrap()
}

fn preset(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name).to_string_lossy().into_owned()
}

#[test]
fn train_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o =
            fedlab(&["train", "--set", "seed=1", "--set", "train.rounds=3", "--set", "privacy.kind=dynamic_dp"], &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let scenario = out.join("default");
        files.push((
            std::fs::read(scenario.join("results.csv")).unwrap(),
            std::fs::read(scenario.join("ledger.csv")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn zero_rounds_reports_only_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlab(&["train", "--set", "seed=1", "--set", "train.rounds=0", "--set", "scenario=t0"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("t0/results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scenario,round,metric,value"));
    assert!(lines.all(|l| l.starts_with("t0,0,")));
}

#[test]
fn availability_sweep_emits_four_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlab(
        &["sweep", "--config", &preset("fig9.cfg"), "--set", "train.rounds=2", "--set", "poison.window_start=1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for alpha in ["0.6", "0.7", "0.8", "0.9"] {
        assert!(dir.path().join(format!("alpha={alpha}")).join("results.csv").exists());
    }
}

#[test]
fn report_folds_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlab(&["train", "--set", "seed=1", "--set", "train.rounds=2"], dir.path());
    assert!(o.status.success());
    let results = dir.path().join("default/results.csv");
    let rep = dir.path().join("report");
    let o = fedlab(&["report", results.to_str().unwrap(), "--out", rep.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rep.join("summary.csv").exists());
    assert!(rep.join("line-accuracy.csv").exists());
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = fedlab(&["train", "--set", "seed=1", "--set", "train.bogus=1"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    let invalid = fedlab(&["train", "--set", "seed=1", "--set", "train.rounds=many"], dir.path());
    assert_eq!(invalid.status.code(), Some(1));
    let missing = fedlab(&["train", "--config", "/nonexistent/fedlab.cfg"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    let diverged =
        fedlab(&["train", "--set", "seed=1", "--set", "train.rounds=3", "--set", "train.global_lr=1e308"], dir.path());
    assert_eq!(diverged.status.code(), Some(2), "{}", String::from_utf8_lossy(&diverged.stderr));
    let unseeded = fedlab(&["train"], dir.path());
    assert_eq!(unseeded.status.code(), Some(1));
}
