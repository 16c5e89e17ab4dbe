use std::sync::Arc;

use phyprobe_core::bound;
use phyprobe_core::dynamics::{sample_dataset, DatasetSplit, Interval, ParamRanges, SplitRequest, SplitRole, SystemSpec, Target};
use phyprobe_core::mechanics::{self, cka_per_block, erasure_shift, param_drift, scan_block};
use phyprobe_core::probes::{self, finetune, FrozenLinearProbe, FtHyper, FtMode};
use phyprobe_core::worldmodel::{self, init_model, ModelConfig, ModelParams, TrainHyper};

fn ssl_ranges() -> ParamRanges {
    ParamRanges::from([("m2".to_string(), Interval::new(0.5, 2.0)), ("r0".to_string(), Interval::new(0.8, 1.6))])
}

fn split(name: &str, role: SplitRole, ranges: ParamRanges, n: usize, seed: u64) -> DatasetSplit {
    let reference = ssl_ranges();
    let req = SplitRequest {
        name: name.into(),
        role,
        template: SystemSpec::two_body(1.0, 1.0, 1.0, 0.01, 30).with_substeps(10),
        ranges,
        n_trajectories: n,
        seed,
        ssl_reference: matches!(role, SplitRole::ProbeTrain | SplitRole::OodTest).then_some(&reference),
        targets: vec![Target::Force, Target::Speed, Target::Radius, Target::Mass],
    };
    sample_dataset(&req).unwrap()
}

fn ood() -> Vec<DatasetSplit> {
    let shifted = ParamRanges::from([("m2".to_string(), Interval::new(2.5, 3.0)), ("r0".to_string(), Interval::new(0.8, 1.6))]);
    vec![split("ood", SplitRole::OodTest, shifted, 6, 7)]
}

fn small_model(seed: u64) -> ModelParams {
    init_model(&ModelConfig { window: 4, width: 12, n_blocks: 2, obs_dim: 2, seed }).unwrap()
}

fn trained() -> ModelParams {
    let data = split("ssl", SplitRole::SslTrain, ssl_ranges(), 20, 1);
    let hyper = TrainHyper { epochs: 3, ..TrainHyper::default() };
    worldmodel::train_ssl(small_model(0), &data, &hyper).unwrap().params
}

#[test]
fn erasure_of_an_unchanged_model_is_null() {
    let model = trained();
    let data = split("probe", SplitRole::ProbeTrain, ssl_ranges(), 8, 2);
    let report = erasure_shift(&model, &model, &data, &["radius", "speed", "mass"], 500).unwrap();
    assert_eq!(report.layers.len(), 2);
    for layer in &report.layers {
        assert_eq!(layer.threshold, 0.0);
        for (concept, shift) in &layer.shift {
            if let Some(s) = shift {
                assert_eq!(*s, 0.0, "{} {concept}", layer.layer);
            }
            assert_eq!(layer.before[concept], layer.after[concept]);
        }
    }
}

#[test]
fn last_layer_finetune_leaves_the_backbone_untouched() {
    let model = trained();
    let task = split("ft", SplitRole::FtTask, ssl_ranges(), 6, 3);
    let hyper = FtHyper { target: "force".into(), train: TrainHyper { epochs: 2, ..TrainHyper::default() }, head_seed: 4 };
    let (adapted, _) = finetune(&model, &task, FtMode::LastLayer, &hyper).unwrap();
    let drift = param_drift(&model, &adapted).unwrap();
    for d in &drift.tensors {
        assert_eq!(d.change_norm, 0.0, "{} moved", d.name);
    }
    assert!(!drift.added.is_empty());

    let data = split("probe", SplitRole::ProbeTrain, ssl_ranges(), 6, 2);
    let cka = cka_per_block(&model, &adapted, &data, 300).unwrap();
    assert!(cka.blocks.iter().all(|e| (e.cka - 1.0).abs() < 1e-10), "{cka:?}");

    let (full, _) = finetune(&model, &task, FtMode::Full, &hyper).unwrap();
    let drift = param_drift(&model, &full).unwrap();
    assert!(drift.tensors.iter().any(|d| d.change_norm > 0.0));
}

#[test]
fn cka_of_a_model_with_itself_is_one_at_every_block() {
    let model = trained();
    let data = split("probe", SplitRole::ProbeTrain, ssl_ranges(), 6, 2);
    let cka = cka_per_block(&model, &model, &data, 300).unwrap();
    let names: Vec<&str> = cka.blocks.iter().map(|e| e.block.as_str()).collect();
    assert_eq!(names, model.config.block_names());
    for e in &cka.blocks {
        assert!((e.cka - 1.0).abs() < 1e-10, "{}: {}", e.block, e.cka);
    }
}

#[test]
fn scan_entry_matches_a_standalone_probe() {
    let model = Arc::new(trained());
    let data = split("probe", SplitRole::ProbeTrain, ssl_ranges(), 10, 2);
    let suite = ood();
    let block = model.config.block_names()[1].clone();
    let entry = scan_block(&model, &data, &suite, &block, "force", 1.0, None).unwrap();
    let direct = FrozenLinearProbe::fit(model.clone(), &data, &block, "force", 1.0).unwrap();
    let report = probes::evaluate_predictor(&direct, &suite, "force").unwrap();
    assert_eq!(entry.block, block);
    assert_eq!(entry.linear.rho_mean, report.rho_mean);
    assert_eq!(entry.linear.mape_mean, report.mape_mean);
    assert!(entry.mlp.is_none());
}

#[test]
fn scan_of_an_untrained_model_is_total() {
    let model = Arc::new(small_model(9));
    let data = split("probe", SplitRole::ProbeTrain, ssl_ranges(), 6, 2);
    let scan = mechanics::layer_probe_scan(&model, &data, &ood(), "speed", 1.0, None).unwrap();
    assert_eq!(scan.entries.len(), model.config.n_blocks + 1);
    assert!(scan.entries.iter().all(|e| e.linear.rho_mean.is_finite()));
    assert!(scan.entries.iter().any(|e| e.block == scan.best_block));
}

#[test]
fn residual_link_is_the_next_state_loss() {
    let data = split("ssl", SplitRole::SslTrain, ssl_ranges(), 10, 5);
    for model in [small_model(3), trained()] {
        let link = bound::residual_link(&model, &data).unwrap();
        let loss = worldmodel::evaluate_ssl(&model, &data).unwrap();
        assert!((link - loss).abs() <= 1e-12 * loss.max(1.0), "{link} vs {loss}");
    }
    let before = bound::residual_link(&small_model(0), &data).unwrap();
    let after = bound::residual_link(&trained(), &data).unwrap();
    assert!(after < before);
}
