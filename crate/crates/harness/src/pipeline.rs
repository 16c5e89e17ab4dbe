//! Stage execution with content-addressed caching.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use phyprobe_core::bound::{self, SweepConfig, SweepData};
use phyprobe_core::dynamics::{
    dataset_stats, sample_dataset, DatasetSplit, Interval, ParamRanges, SplitRequest, SplitRole, SystemSpec, Target,
};
use phyprobe_core::mechanics::{self, LayerScan};
use phyprobe_core::probes::{
    self, FineTunedModel, FrozenLinearProbe, FtMode, MlpProbe, Predictions, Predictor, RawInputProbe, TimeDependentProbe,
};
use phyprobe_core::stats;
use phyprobe_core::symreg::{self, eval_expr, law_features, Expr};
use phyprobe_core::worldmodel::{self, init_model, ModelParams, TargetMode, TrainLog, WindowSet};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::cache::{self, key, Cache};
use crate::config::{derive_seed, hash_json, ExperimentConfig, Stage, CODE_VERSION};
use crate::error::HarnessError;
use crate::report::*;
use crate::{par_map, thread_count};

/// Bins of the residual histograms.
const RESIDUAL_BINS: usize = 40;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub cache: Cache,
    pub threads: usize,
}

impl RunOptions {
    /// Cache under `<out_dir>/cache`, thread count from the environment.
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Self { cache: Cache::new(cfg.out_dir.join("cache")), threads: thread_count() }
    }
}

/// Seeds of every consumer of randomness, derived from the global seed and
/// the sub-config's own seed.
pub fn effective_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut e = cfg.clone();
    e.seed = seed;
    let d = |tag: &str, own: u64| derive_seed(seed, &format!("{tag}/{own}"));
    e.model.seed = d("model", cfg.model.seed);
    e.train.seed = d("train", cfg.train.seed);
    e.probe.mlp.seed = d("mlp", cfg.probe.mlp.seed);
    e.finetune.head_seed = d("head", cfg.finetune.head_seed);
    e.finetune.train.seed = d("finetune", cfg.finetune.train.seed);
    e.symreg.gp.seed = d("symreg", cfg.symreg.gp.seed);
    e.bound.model.seed = d("bound-model", cfg.bound.model.seed);
    e.bound.train.seed = d("bound-train", cfg.bound.train.seed);
    e
}

struct Splits {
    ssl: DatasetSplit,
    probe: DatasetSplit,
    ood: Vec<DatasetSplit>,
    ft: DatasetSplit,
}

struct Run<'a> {
    cfg: ExperimentConfig,
    opts: &'a RunOptions,
    report: MetricsReport,
    data_key: String,
    splits: Option<Splits>,
    model_key: String,
    model: Option<Arc<ModelParams>>,
    probe_key: String,
    phyip: Option<FrozenLinearProbe>,
    ft_key: String,
    ft: BTreeMap<String, Arc<ModelParams>>,
    /// Set by a stage whose expensive work came entirely from the cache.
    hit: bool,
}

fn missing(what: &str) -> HarnessError {
    HarnessError::Cache(format!("{what} unavailable"))
}

/// Loads `stage/key` or computes and stores it. Undecodable entries are
/// recomputed.
fn memo<T>(
    cache: &Cache,
    stage: &str,
    key: &str,
    hit: &mut bool,
    enc: impl Fn(&T) -> Result<Vec<u8>, HarnessError>,
    dec: impl Fn(&[u8]) -> Result<T, HarnessError>,
    compute: impl FnOnce() -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    if let Some(bytes) = cache.get(stage, key) {
        match dec(&bytes) {
            Ok(v) => {
                log::info!("{stage}: cache hit {}", &key[..12]);
                return Ok(v);
            }
            Err(e) => log::warn!("{stage}: undecodable cache entry ({e}); recomputing"),
        }
    }
    *hit = false;
    let v = compute()?;
    cache.put(stage, key, &enc(&v)?)?;
    Ok(v)
}

fn memo_json<T: Serialize + serde::de::DeserializeOwned>(
    cache: &Cache,
    stage: &str,
    key: &str,
    hit: &mut bool,
    compute: impl FnOnce() -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    memo(cache, stage, key, hit, |v| cache::encode_json(v), |b| cache::decode_json(b), compute)
}

/// A training log followed by the parameter blob(s).
/// The stored log drops its wall time so identical runs write identical
/// blobs; a cache hit then reports zero training seconds.
fn encode_trained(log: &TrainLog, params: &[(String, ModelParams)]) -> Result<Vec<u8>, HarnessError> {
    let head = serde_json::to_vec(&TrainLog { wall_time_secs: 0.0, ..log.clone() })?;
    let mut out = (head.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&head);
    out.extend_from_slice(&cache::encode_params_list(params)?);
    Ok(out)
}

fn decode_trained(bytes: &[u8]) -> Result<(TrainLog, Vec<(String, ModelParams)>), HarnessError> {
    let bad = || HarnessError::Cache("truncated training blob".into());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes")) as usize;
    let head = bytes.get(8..8 + len).ok_or_else(bad)?;
    Ok((serde_json::from_slice(head)?, cache::decode_params_list(&bytes[8 + len..])?))
}

fn strip_wall_time(mut log: TrainLog) -> (TrainLog, f64) {
    let secs = std::mem::take(&mut log.wall_time_secs);
    (log, secs)
}

fn orbital_targets() -> Vec<Target> {
    vec![Target::Force, Target::ForceMagnitude, Target::Speed, Target::Radius, Target::Mass]
}

/// The OOD suite's star-mass intervals: contiguous bins above the SSL range.
pub fn ood_ranges(cfg: &ExperimentConfig) -> Vec<ParamRanges> {
    let o = &cfg.data.ood;
    (0..o.sets)
        .map(|i| {
            let lo = o.m2_start + i as f64 * o.m2_width;
            let mut r = cfg.data.ssl_ranges.clone();
            r.insert("m2".into(), Interval::new(lo, lo + o.m2_width));
            r
        })
        .collect()
}

/// Concatenates splits, renumbering trajectory ids so they stay unique.
pub fn merge_splits(name: &str, splits: &[DatasetSplit]) -> Option<DatasetSplit> {
    let first = splits.first()?;
    let trajectories = splits
        .iter()
        .flat_map(|s| s.trajectories.iter().cloned())
        .enumerate()
        .map(|(i, mut t)| {
            t.id = i;
            t
        })
        .collect();
    Some(DatasetSplit {
        name: name.into(),
        role: first.role,
        template: first.template.clone(),
        generator_ranges: first.generator_ranges.clone(),
        trajectories,
    })
}

fn subsample(pred: &Predictions, max: usize) -> Predictions {
    let n = pred.provenance.len();
    let idx: Vec<usize> = if n <= max || max == 0 { (0..n).collect() } else { (0..max).map(|i| i * n / max).collect() };
    Predictions { values: pred.values.select_rows(&idx), provenance: idx.iter().map(|&i| pred.provenance[i]).collect() }
}

fn magnitudes(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histograms over shared edges spanning the pooled 0.5–99.5% range;
/// values outside fall into the edge bins.
pub fn residual_histograms(sources: Vec<(String, Vec<f64>)>, bins: usize) -> Vec<ResidualHistogram> {
    let mut pooled: Vec<f64> = sources.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    if pooled.is_empty() || bins == 0 {
        return Vec::new();
    }
    pooled.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (quantile(&pooled, 0.005), quantile(&pooled, 0.995));
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    sources
        .into_iter()
        .map(|(source, values)| {
            let mut counts = vec![0usize; bins];
            for v in values.iter().filter(|v| v.is_finite()) {
                let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
                counts[b] += 1;
            }
            ResidualHistogram { source, edges: edges.clone(), counts, mean: stats::mean(&values), std: stats::std_dev(&values) }
        })
        .collect()
}

/// Law values at every window's predicted step, with the matching truth.
fn law_residuals(expr: &Expr, suite: &[DatasetSplit], target: &str, window: usize) -> Result<Vec<f64>, HarnessError> {
    let vars = expr.variables();
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for split in suite {
        let ws = WindowSet::from_split(split, window, split.template.obs_dim())?;
        let pred = Predictions { values: DMatrix::zeros(ws.len(), 1), provenance: ws.provenance };
        let feats = law_features(split, &pred, &names)?;
        let law = eval_expr(expr, &feats)?;
        let truth = magnitudes(&worldmodel::targets_at(split, &pred.provenance, target, TargetMode::Next)?);
        out.extend(law.values.iter().zip(&truth).map(|(l, t)| l - t));
    }
    Ok(out)
}

fn predictor_residuals(p: &dyn Predictor, suite: &[DatasetSplit], target: &str) -> Result<Vec<f64>, HarnessError> {
    let mut out = Vec::new();
    for split in suite {
        let pred = p.predict(split)?;
        let truth = magnitudes(&worldmodel::targets_at(split, &pred.provenance, target, TargetMode::Next)?);
        out.extend(magnitudes(&pred.values).iter().zip(&truth).map(|(a, b)| a - b));
    }
    Ok(out)
}

fn ft_name(mode: FtMode) -> &'static str {
    match mode {
        FtMode::LastLayer => "last_layer_ft",
        FtMode::Full => "full_ft",
    }
}

impl Run<'_> {
    fn splits(&self) -> Result<&Splits, HarnessError> {
        self.splits.as_ref().ok_or_else(|| missing("datasets"))
    }

    fn model(&self) -> Result<Arc<ModelParams>, HarnessError> {
        self.model.clone().ok_or_else(|| missing("trained model"))
    }

    fn gen_data(&mut self) -> Result<(), HarnessError> {
        let cfg = &self.cfg;
        self.data_key = key(&["gen-data", &hash_json(&cfg.system), &hash_json(&cfg.data), &cfg.seed.to_string()]);
        let template = cfg.system.spec();
        let ssl_ranges = cfg.data.ssl_ranges.clone();
        let seed = cfg.seed;
        let threads = self.opts.threads;
        let ood = ood_ranges(cfg);
        let data = &cfg.data;
        let splits = memo(
            &self.opts.cache,
            "gen-data",
            &self.data_key,
            &mut self.hit,
            |v: &Vec<DatasetSplit>| cache::encode_splits(v),
            |b| cache::decode_splits(b),
            || {
                let req = |name: String, role, ranges: ParamRanges, n| SplitRequest {
                    seed: derive_seed(seed, &format!("data/{name}")),
                    name,
                    role,
                    template: template.clone(),
                    ranges,
                    n_trajectories: n,
                    ssl_reference: Some(&ssl_ranges),
                    targets: orbital_targets(),
                };
                let mut reqs = vec![
                    req("ssl".into(), SplitRole::SslTrain, ssl_ranges.clone(), data.ssl_trajectories),
                    req("probe".into(), SplitRole::ProbeTrain, ssl_ranges.clone(), data.probe_trajectories),
                    req("ft".into(), SplitRole::FtTask, data.ft_ranges.clone(), data.ft_trajectories),
                ];
                for (i, r) in ood.into_iter().enumerate() {
                    reqs.push(req(format!("ood_{i:02}"), SplitRole::OodTest, r, data.ood.trajectories_per_set));
                }
                par_map(threads, &reqs, sample_dataset).into_iter().map(|r| r.map_err(HarnessError::from)).collect()
            },
        )?;
        let mut it = splits.into_iter();
        let (ssl, probe, ft) = (it.next(), it.next(), it.next());
        let (Some(ssl), Some(probe), Some(ft)) = (ssl, probe, ft) else {
            return Err(HarnessError::Cache("dataset blob lacks the base splits".into()));
        };
        let ood: Vec<DatasetSplit> = it.collect();
        let summary = |s: &DatasetSplit| SplitSummary {
            name: s.name.clone(),
            role: s.role,
            trajectories: s.len(),
            ranges: s.generator_ranges.clone(),
        };
        self.report.data = Some(DataSection {
            splits: [&ssl, &probe, &ft].into_iter().chain(&ood).map(summary).collect(),
            ood_sets: ood.len(),
            ft_m2: dataset_stats(&ft, "m2", 10)?,
            ssl_m2: dataset_stats(&ssl, "m2", 10)?,
        });
        self.splits = Some(Splits { ssl, probe, ood, ft });
        Ok(())
    }

    fn train(&mut self) -> Result<(), HarnessError> {
        let cfg = &self.cfg;
        self.model_key = key(&["train", &self.data_key, &hash_json(&cfg.model), &hash_json(&cfg.train)]);
        let splits = self.splits.as_ref().ok_or_else(|| missing("datasets"))?;
        let (log, params) = memo(
            &self.opts.cache,
            "train",
            &self.model_key,
            &mut self.hit,
            |(log, p): &(TrainLog, ModelParams)| encode_trained(log, &[("final".into(), p.clone())]),
            |b| {
                let (log, mut list) = decode_trained(b)?;
                let p = list.pop().ok_or_else(|| HarnessError::Cache("no parameters".into()))?.1;
                Ok((log, p))
            },
            || {
                let out = worldmodel::train_ssl(init_model(&cfg.model)?, &splits.ssl, &cfg.train)?;
                Ok((out.log, out.params))
            },
        )?;
        let params = Arc::new(params);
        let (log, secs) = strip_wall_time(log);
        self.report.timing.training.insert("ssl".into(), secs);
        let epsilon_id = worldmodel::evaluate_ssl(&params, &splits.probe)?;
        let epsilon_ood: Vec<(String, f64)> = par_map(self.opts.threads, &splits.ood, |s| {
            worldmodel::evaluate_ssl(&params, s).map(|e| (s.name.clone(), e))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        let eps: Vec<f64> = epsilon_ood.iter().map(|(_, e)| *e).collect();
        self.report.ssl = Some(SslSection {
            log,
            param_count: params.param_count(),
            checksum: params.checksum(),
            epsilon_id,
            epsilon_ood_mean: stats::mean(&eps),
            epsilon_ood,
        });
        self.model = Some(params);
        Ok(())
    }

    fn integrity(&mut self, after_stage: &str) {
        let Some(model) = &self.model else { return };
        let file_sha256 = self.opts.cache.get("train", &self.model_key).map(|b| cache::sha256_hex(&b));
        let check = IntegrityCheck { after_stage: after_stage.into(), params_checksum: model.checksum(), file_sha256 };
        let sec = self.report.integrity.get_or_insert(IntegritySection { checks: Vec::new(), unchanged: true });
        sec.checks.push(check);
        let first = &sec.checks[0];
        sec.unchanged =
            sec.checks.iter().all(|c| c.params_checksum == first.params_checksum && c.file_sha256 == first.file_sha256);
    }

    fn probe(&mut self) -> Result<(), HarnessError> {
        self.integrity("train");
        let model = self.model()?;
        self.probe_key = key(&["probe", &self.model_key, &hash_json(&self.cfg.probe)]);
        let cfg = &self.cfg;
        let splits = self.splits.as_ref().ok_or_else(|| missing("datasets"))?;
        let threads = self.opts.threads;
        let mut hit = true;
        let section = memo_json(&self.opts.cache, "probe", &self.probe_key, &mut hit, || {
            let p = &cfg.probe;
            let mlp = p.scan_mlp.then_some(&p.mlp);
            let blocks = model.config.block_names();
            let entries = par_map(threads, &blocks, |b| {
                mechanics::scan_block(&model, &splits.probe, &splits.ood, b, &p.target, p.alpha, mlp)
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
            let scan = LayerScan::from_entries(&p.target, entries);
            let block = p.block.clone().unwrap_or_else(|| scan.best_block.clone());
            log::info!("probe block {block}");
            let rec = worldmodel::extract_activations(&model, &splits.probe, &block, &p.target)?;
            let phyip = FrozenLinearProbe::from_record(model.clone(), &rec, p.alpha)?;
            let td = TimeDependentProbe::from_record(model.clone(), &rec, p.alpha, p.td_shrink)?;
            log::info!("time-dependent shrinkage {}", td.shrink);
            let mlp = MlpProbe::from_record(model.clone(), &rec, &p.mlp)?;
            drop(rec);
            let raw = RawInputProbe::fit(&splits.probe, model.config.window, model.config.obs_dim, &p.target, p.alpha)?;
            let predictors: [&dyn Predictor; 4] = [&phyip, &raw, &td, &mlp];
            let mut reports = Vec::new();
            let mut id_reports = Vec::new();
            for pr in predictors {
                reports.push(probes::evaluate_predictor(pr, &splits.ood, &p.target)?);
                id_reports.push(probes::evaluate_predictor(pr, std::slice::from_ref(&splits.probe), &p.target)?);
            }
            Ok(ProbeSection { target: p.target.clone(), block, scan, reports, id_reports, td_shrink: td.shrink, phyip: phyip.probe })
        })?;
        self.hit &= hit;
        self.phyip = Some(FrozenLinearProbe::new(model, section.phyip.clone())?);
        self.report.probes = Some(section);
        self.integrity("probe");
        Ok(())
    }

    fn finetune(&mut self) -> Result<(), HarnessError> {
        let model = self.model()?;
        self.ft_key = key(&["finetune", &self.model_key, &hash_json(&self.cfg.finetune)]);
        let cfg = &self.cfg;
        let splits = self.splits.as_ref().ok_or_else(|| missing("datasets"))?;
        let modes = [FtMode::LastLayer, FtMode::Full];
        let cache = &self.opts.cache;
        let ft_key = &self.ft_key;
        let results = par_map(self.opts.threads, &modes, |&mode| {
            let mut hit = true;
            let k = key(&[ft_key, ft_name(mode)]);
            let r = memo(
                cache,
                "finetune",
                &k,
                &mut hit,
                |(log, p): &(TrainLog, ModelParams)| encode_trained(log, &[(ft_name(mode).into(), p.clone())]),
                |b| {
                    let (log, mut list) = decode_trained(b)?;
                    Ok((log, list.pop().ok_or_else(|| HarnessError::Cache("no parameters".into()))?.1))
                },
                || probes::finetune(&model, &splits.ft, mode, &cfg.finetune).map(|(p, l)| (l, p)).map_err(HarnessError::from),
            );
            (mode, r, hit)
        });
        let mut logs = BTreeMap::new();
        let mut reports = Vec::new();
        for (mode, r, hit) in results {
            self.hit &= hit;
            let (log, params) = r?;
            let (log, secs) = strip_wall_time(log);
            self.report.timing.training.insert(ft_name(mode).into(), secs);
            logs.insert(ft_name(mode).to_string(), log);
            let params = Arc::new(params);
            let predictor = FineTunedModel { model: params.clone(), mode };
            reports.push(probes::evaluate_predictor(&predictor, &splits.ood, &cfg.probe.target)?);
            self.ft.insert(ft_name(mode).to_string(), params);
        }
        self.report.finetune = Some(FinetuneSection { target: cfg.finetune.target.clone(), logs, reports });
        Ok(())
    }

    fn analyze(&mut self) -> Result<(), HarnessError> {
        let model = self.model()?;
        let full = self.ft.get("full_ft").cloned().ok_or_else(|| missing("fine-tuned model"))?;
        let last = self.ft.get("last_layer_ft").cloned().ok_or_else(|| missing("fine-tuned model"))?;
        let splits = self.splits()?;
        let a = &self.cfg.analysis;
        let block = self.report.probes.as_ref().map_or_else(|| "final".to_string(), |p| p.block.clone());
        let k = key(&["analyze", &self.ft_key, &hash_json(a), &block]);
        let mut hit = true;
        let section = memo_json(&self.opts.cache, "analyze", &k, &mut hit, || {
            let cka = mechanics::cka_per_block(&model, &full, &splits.probe, a.cka_samples)?;
            let drift = BTreeMap::from([
                ("full_ft".to_string(), mechanics::param_drift(&model, &full)?),
                ("last_layer_ft".to_string(), mechanics::param_drift(&model, &last)?),
            ]);
            let merged = merge_splits("ood_all", &splits.ood).ok_or_else(|| missing("OOD suite"))?;
            let concepts: Vec<&str> = a.concepts.iter().map(String::as_str).collect();
            let erasure = mechanics::erasure_shift(&model, &full, &merged, &concepts, a.erasure_samples)?;
            let ws = WindowSet::from_split(&merged, model.config.window, model.config.obs_dim)?;
            let n = ws.len();
            let cols: Vec<usize> = if n <= a.projection_samples {
                (0..n).collect()
            } else {
                (0..a.projection_samples).map(|i| i * n / a.projection_samples).collect()
            };
            let x = ws.x.select_columns(&cols);
            let prov: Vec<_> = cols.iter().map(|&c| ws.provenance[c]).collect();
            let color = magnitudes(&worldmodel::targets_at(&merged, &prov, "force_magnitude", TargetMode::Next)?);
            let idx = model.config.block_index(&block)?;
            let mut projections = Vec::new();
            for (name, m) in [("ssl", &model), ("full_ft", &full)] {
                let p = mechanics::pca_2d(&worldmodel::latents(m, &x, idx)?)?;
                projections.push(ProjectionSection {
                    model: name.into(),
                    block: block.clone(),
                    coords: p.coords.row_iter().map(|r| [r[0], r[1]]).collect(),
                    explained: p.explained,
                    degenerate: p.degenerate,
                    color: color.clone(),
                });
            }
            Ok(MechanicsSection { cka, drift, erasure, projections })
        })?;
        self.hit &= hit;
        self.report.mechanics = Some(section);
        Ok(())
    }

    fn symreg(&mut self) -> Result<(), HarnessError> {
        let phyip = self.phyip.as_ref().ok_or_else(|| missing("PhyIP probe"))?;
        let splits = self.splits()?;
        let s = &self.cfg.symreg;
        let target = &self.cfg.probe.target;
        let window = self.cfg.model.window;
        let full = self.ft.get("full_ft").cloned();
        let k = key(&["symreg", &self.probe_key, &hash_json(s), if full.is_some() { &self.ft_key } else { "" }]);
        let mut hit = true;
        let section = memo_json(&self.opts.cache, "symreg", &k, &mut hit, || {
            let pred = subsample(&phyip.predict(&splits.probe)?, s.samples);
            let names: Vec<&str> = s.inputs.iter().map(String::as_str).collect();
            let features = law_features(&splits.probe, &pred, &names)?;
            let y = magnitudes(&pred.values);
            let front = symreg::symbolic_fit(&features, &y, target, &s.gp)?;
            let selected = symreg::select_best(&front)?.clone();
            let r_slope = if selected.expr.variables().iter().any(|v| v == "r") {
                symreg::power_law_slope(&selected.expr, "r", s.slope_range, 50, &s.slope_fixed)?
            } else {
                None
            };
            let validation = symreg::validate_law(&selected.expr, &splits.ood, target, window)?;
            let mut sources = vec![
                ("phyip_law".to_string(), law_residuals(&selected.expr, &splits.ood, target, window)?),
                ("phyip_probe".to_string(), predictor_residuals(phyip, &splits.ood, target)?),
            ];
            if let Some(full) = full {
                let p = FineTunedModel { model: full, mode: FtMode::Full };
                sources.push(("full_ft".to_string(), predictor_residuals(&p, &splits.ood, target)?));
            }
            let residuals = residual_histograms(sources, RESIDUAL_BINS);
            Ok(SymregSection { front, selected, r_slope, validation, residuals })
        })?;
        self.hit &= hit;
        self.report.symreg = Some(section);
        self.integrity("symreg");
        Ok(())
    }

    fn bound(&mut self) -> Result<(), HarnessError> {
        let b = &self.cfg.bound;
        let seed = self.cfg.seed;
        let spec = |dt: f64| SystemSpec::oscillator(b.k, b.m1, dt / b.substeps as f64, b.steps).with_substeps(b.substeps);
        let ranges = ParamRanges::from([("amplitude".to_string(), Interval::new(b.amplitude.0, b.amplitude.1))]);
        let targets: Vec<Target> = b.targets.iter().map(|t| t.parse()).collect::<Result<_, _>>()?;
        let split = |name: String, role, dt: f64, n| {
            sample_dataset(&SplitRequest {
                seed: derive_seed(seed, &format!("bound/{name}")),
                name,
                role,
                template: spec(dt),
                ranges: ranges.clone(),
                n_trajectories: n,
                ssl_reference: Some(&ranges),
                targets: targets.clone(),
            })
        };
        let data_key = key(&["bound-data", &hash_json(b), &seed.to_string()]);
        let mut hit = true;
        let cache = &self.opts.cache;
        let all = memo(cache, "bound-data", &data_key, &mut hit, |v: &Vec<DatasetSplit>| cache::encode_splits(v), |x| cache::decode_splits(x), || {
            let mut out = Vec::new();
            for &dt in &b.dt_values {
                out.push(split(format!("ssl_dt{dt}"), SplitRole::SslTrain, dt, b.ssl_trajectories)?);
                out.push(split(format!("probe_dt{dt}"), SplitRole::ProbeTrain, dt, b.probe_trajectories)?);
                out.push(split(format!("test_dt{dt}"), SplitRole::ProbeTrain, dt, b.test_trajectories)?);
            }
            Ok(out)
        })?;
        let mut sweep = Vec::new();
        let mut streams = Vec::new();
        let mut logs = BTreeMap::new();
        for (&dt, c) in b.dt_values.iter().zip(all.chunks(3)) {
            let model_key = key(&["bound-train", &data_key, &dt.to_string()]);
            let (log, checkpoints) = memo(
                cache,
                "bound-train",
                &model_key,
                &mut hit,
                |(log, list): &(TrainLog, Vec<(String, ModelParams)>)| encode_trained(log, list),
                |x| decode_trained(x),
                || {
                    let out = worldmodel::train_ssl(init_model(&b.model)?, &c[0], &b.train)?;
                    let mut list: Vec<(String, ModelParams)> =
                        out.checkpoints.into_iter().map(|(e, p)| (format!("epoch{e}"), p)).collect();
                    if !b.train.checkpoint_epochs.contains(&b.train.epochs) {
                        list.push((format!("epoch{}", b.train.epochs), out.params));
                    }
                    Ok((out.log, list))
                },
            )?;
            let (log, secs) = strip_wall_time(log);
            *self.report.timing.training.entry("bound".into()).or_insert(0.0) += secs;
            logs.insert(format!("dt{dt}"), log);
            sweep.push(SweepData { dt, probe: c[1].clone(), test: c[2].clone() });
            streams.push(checkpoints);
        }
        let names = streams[0].iter().map(|(n, _)| n.clone()).collect();
        let section_key = key(&["bound", &data_key, &hash_json(&b.train), &hash_json(&b.model)]);
        let sweep_cfg = SweepConfig { targets: b.targets.clone(), block: b.block.clone(), alpha: b.alpha };
        let report = memo_json(cache, "bound", &section_key, &mut hit, || {
            let refs: Vec<&[(String, ModelParams)]> = streams.iter().map(|s| s.as_slice()).collect();
            Ok(bound::validate_bound_streams(&refs, &sweep, &sweep_cfg)?)
        })?;
        self.hit &= hit;
        self.report.bound = Some(BoundSection { logs, checkpoints: names, report });
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<(), HarnessError> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::Train => self.train(),
            Stage::Probe => self.probe(),
            Stage::Finetune => self.finetune(),
            Stage::Analyze => self.analyze(),
            Stage::Symreg => self.symreg(),
            Stage::Bound => self.bound(),
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs every requested stage and its prerequisites in dependency order.
/// The report is returned even when a stage fails; the error is the first
/// failure (or a configuration error, in which case nothing ran).
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> (MetricsReport, Result<(), HarnessError>) {
    let seed = if cfg.deterministic {
        cfg.seed
    } else {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
        derive_seed(cfg.seed, &format!("clock/{nanos}"))
    };
    let portable = cfg.portable();
    let provenance = ProvenanceInfo {
        config_hash: portable.hash(),
        code_version: CODE_VERSION.to_string(),
        seed,
        deterministic: cfg.deterministic,
        config: portable,
    };
    let mut report = MetricsReport::new(provenance);
    report.timing.started_unix = unix_now();
    if let Err(e) = cfg.validate() {
        report.timing.finished_unix = unix_now();
        return (report, Err(e));
    }
    let mut run = Run {
        cfg: effective_config(cfg, seed),
        opts,
        report,
        data_key: String::new(),
        splits: None,
        model_key: String::new(),
        model: None,
        probe_key: String::new(),
        phyip: None,
        ft_key: String::new(),
        ft: BTreeMap::new(),
        hit: true,
    };
    let mut first_error = None;
    for stage in cfg.closure() {
        let name = stage.name();
        let blocked: Vec<&str> = stage
            .deps()
            .iter()
            .filter(|d| run.report.stages.get(d.name()) != Some(&StageStatus::Completed))
            .map(|d| d.name())
            .collect();
        if !blocked.is_empty() {
            let reason = format!("prerequisite {} did not complete", blocked.join(", "));
            run.report.stages.insert(name.into(), StageStatus::Skipped { reason });
            continue;
        }
        log::info!("stage {name}");
        let started = Instant::now();
        run.hit = true;
        let result = run.run_stage(stage);
        let secs = started.elapsed().as_secs_f64();
        run.report.timing.stages.insert(name.into(), StageTiming { secs, cached: run.hit && result.is_ok() });
        match result {
            Ok(()) => {
                run.report.stages.insert(name.into(), StageStatus::Completed);
            }
            Err(e) => {
                let e = match e {
                    HarnessError::Core(source) => HarnessError::Stage { stage: name.into(), source },
                    other => other,
                };
                log::error!("stage {name} failed: {e}");
                run.report.stages.insert(name.into(), StageStatus::Failed { error: e.to_string() });
                first_error.get_or_insert(e);
            }
        }
    }
    let mut report = run.report;
    report.timing.finished_unix = unix_now();
    (report, first_error.map_or(Ok(()), Err))
}
