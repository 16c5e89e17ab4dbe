use std::path::Path;
use std::process::Command;

use phyprobe_harness::cache::Cache;
use phyprobe_harness::report::render;
use phyprobe_harness::{run_pipeline, ExperimentConfig, Format, MetricsReport, RunOptions};

const SMALL: &str = r#"{
  "deterministic": true,
  "data": {"ssl_trajectories": 60, "probe_trajectories": 40, "ood": {"sets": 3, "trajectories_per_set": 4}, "ft_trajectories": 4},
  "model": {"width": 16, "n_blocks": 2},
  "train": {"epochs": 2},
  "finetune": {"train": {"epochs": 3}},
  "probe": {"mlp": {"epochs": 3, "max_samples": 200}},
  "analysis": {"cka_samples": 200, "erasure_samples": 200, "projection_samples": 50},
  "symreg": {"samples": 100, "gp": {"population": 64, "generations": 5}},
  "bound": {"ssl_trajectories": 30, "probe_trajectories": 20, "test_trajectories": 10,
            "model": {"width": 16, "n_blocks": 2, "obs_dim": 1},
            "train": {"epochs": 3, "checkpoint_epochs": [1, 2, 3]}}
}"#;

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(SMALL).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn run(cfg: &ExperimentConfig) -> MetricsReport {
    let (report, result) = run_pipeline(cfg, &RunOptions::for_config(cfg));
    result.unwrap();
    report
}

fn file<'a>(files: &'a [(String, Vec<u8>)], name: &str) -> &'a str {
    let (_, bytes) = files.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name} missing"));
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn empty_stage_list_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.stages.clear();
    let report = run(&cfg);
    assert!(report.stages.is_empty());
    assert!(report.probes.is_none() && report.bound.is_none());
    let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn small_run_is_complete_deterministic_and_round_trips() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(&small(a.path()));
    let second = run(&small(b.path()));
    assert!(first.succeeded(), "{:?}", first.stages);
    assert_eq!(first.stages.len(), 7);
    assert_eq!(first.canonical_bytes().unwrap(), second.canonical_bytes().unwrap());

    let json = first.to_json().unwrap();
    let back = MetricsReport::from_json(&json).unwrap();
    assert_eq!(back, first);
    assert_eq!(back.to_json().unwrap(), json);

    let integrity = first.integrity.as_ref().unwrap();
    assert!(integrity.unchanged);
    assert!(integrity.checks.windows(2).all(|w| w[0].params_checksum == w[1].params_checksum));
}

#[test]
fn cached_rerun_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = run(&cfg);
    assert!(first.timing.stages.values().all(|t| !t.cached));
    let second = run(&cfg);
    assert!(second.timing.stages.values().all(|t| t.cached), "{:?}", second.timing.stages);
    assert_eq!(first.canonical_bytes().unwrap(), second.canonical_bytes().unwrap());

    // without a cache there is no stored checkpoint to hash
    let (mut fresh, _) = run_pipeline(&cfg, &RunOptions { cache: Cache::disabled(), threads: 1 });
    let integrity = fresh.integrity.take().unwrap();
    assert!(integrity.unchanged && integrity.checks.iter().all(|c| c.file_sha256.is_none()));
    let mut cached = first.clone();
    cached.integrity = None;
    assert_eq!(fresh.canonical_bytes().unwrap(), cached.canonical_bytes().unwrap());
}

#[test]
fn csv_tables_have_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let report = run(&cfg);
    let files = render(&report, &[Format::Csv]).unwrap();
    assert!(files.iter().all(|(n, _)| n != "report.json"));

    let baseline = file(&files, "baseline.csv");
    let mut lines = baseline.lines();
    assert_eq!(lines.next(), Some("method,set,samples,rho,mape"));
    // six methods, each scored on every OOD set
    assert_eq!(lines.count(), 6 * cfg.data.ood.sets);

    let erasure = file(&files, "erasure.csv");
    let header = erasure.lines().next().unwrap();
    let want: Vec<&str> = std::iter::once("layer").chain(cfg.analysis.concepts.iter().map(String::as_str)).collect();
    assert_eq!(header, want.join(","));
    assert!(erasure.lines().last().unwrap().starts_with("mean,"));
    assert_eq!(erasure.lines().count(), 1 + cfg.model.n_blocks + 1);

    let sweep = file(&files, "bound_sweep.csv");
    let points = report.bound.as_ref().unwrap().report.points.len();
    assert_eq!(sweep.lines().count(), 1 + points);
}

#[test]
fn stage_subset_pulls_in_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.stages = vec!["symreg".parse().unwrap()];
    let report = run(&cfg);
    let names: Vec<&str> = report.stages.keys().map(String::as_str).collect();
    for s in ["gen-data", "train", "probe", "symreg"] {
        assert!(names.contains(&s), "{names:?}");
    }
    assert!(report.bound.is_none() && report.finetune.is_none());
}

#[test]
fn cli_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_phyprobe");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"probe": {"alpha": -1.0}}"#).unwrap();
    let out = Command::new(exe).args(["run", "--config"]).arg(&bad).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let malformed = dir.path().join("malformed.json");
    std::fs::write(&malformed, "{ not json").unwrap();
    let out = Command::new(exe).args(["train", "--config"]).arg(&malformed).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let good = dir.path().join("small.json");
    std::fs::write(&good, SMALL).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(exe)
        .args(["gen-data", "--format", "json", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = MetricsReport::from_json(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.data.is_some() && report.ssl.is_none());
    assert!(!out_dir.join("baseline.csv").exists());
}
