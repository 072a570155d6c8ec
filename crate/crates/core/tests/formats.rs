use fedlab::data::{load_idx, synth_blobs, write_idx};
use fedlab::harness::{read_results, run_sweep, write_results, Config, ExperimentConfig, Metric, ResultSet};
use std::path::Path;

fn presets() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_blobs(3, &[5, 7], 4, 1.0, 1).unwrap();
    let (img, lab) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
    write_idx(&ds, &img, &lab).unwrap();
    let back = load_idx(&img, &lab).unwrap();
    assert_eq!(back.labels(), ds.labels());
    let again = dir.path().join("x2.idx");
    write_idx(&back, &again, dir.path().join("y2.idx")).unwrap();
    assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn results_csv_parses_back() {
    let mut rs = ResultSet::new();
    rs.push("a", 0, Metric::Accuracy, 0.1).unwrap();
    rs.push("a", 3, Metric::Epsilon, 1.0 / 3.0).unwrap();
    let mut text = Vec::new();
    write_results(rs.rows(), &mut text).unwrap();
    let rows = read_results(text.as_slice()).unwrap();
    let mut again = Vec::new();
    write_results(&rows, &mut again).unwrap();
    assert_eq!(text, again);
    assert!(String::from_utf8(text).unwrap().starts_with("scenario,round,metric,value\n"));
}

#[test]
fn every_preset_parses() {
    let mut count = 0;
    for entry in std::fs::read_dir(presets()).unwrap() {
        let cfg = Config::load(entry.unwrap().path()).unwrap();
        ExperimentConfig::from_config(&cfg).unwrap();
        count += 1;
    }
    assert!(count >= 10);
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse("seed = 2\ntrain.rounds = 2\nsweep.key = train.local_lr\nsweep.values = 0.1,0.2,0.3,0.4\n")
        .unwrap();
    let out = run_sweep(&cfg, dir.path()).unwrap();
    let mut ids: Vec<&str> = out.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    assert_eq!(ids, ["local_lr=0.1", "local_lr=0.2", "local_lr=0.3", "local_lr=0.4"]);
    for id in ids {
        assert!(dir.path().join(id).join("results.csv").exists());
    }
}
