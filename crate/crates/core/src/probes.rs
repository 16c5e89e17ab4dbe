//! Linear probes on frozen latents, control baselines, invasive
//! fine-tuning, and the shared OOD evaluation.
//!
//! Every predictor is evaluated through `&self`, so evaluation cannot modify
//! a probe or the backbone it reads from.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DatasetSplit, SplitRole};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamW, Mlp};
use crate::stats;
use crate::worldmodel::{self, ActivationRecord, ModelParams, Objective, Scope, TargetMode, TrainHyper, TrainLog, WindowSet};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const MAPE_FLOOR: f64 = 1e-8;
pub const MLP_HIDDEN: [usize; 2] = [254, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Phyip,
    RawInput,
    TimeDependent,
    Mlp,
    LastLayerFt,
    FullFt,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Phyip, Method::RawInput, Method::TimeDependent, Method::Mlp, Method::LastLayerFt, Method::FullFt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Phyip => "phyip",
            Method::RawInput => "raw_input",
            Method::TimeDependent => "time_dependent",
            Method::Mlp => "mlp",
            Method::LastLayerFt => "last_layer_ft",
            Method::FullFt => "full_ft",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine readout `s = W h + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// k × d.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub alpha: f64,
    pub block_name: String,
    pub target_name: String,
}

impl LinearProbe {
    /// Predictions for the rows of `h` (N × d), as N × k.
    pub fn predict(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = h * self.w.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        out
    }

    /// Mean squared residual norm plus `alpha·‖W‖²_F` divided by N.
    pub fn objective(&self, h: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
        let n = h.nrows() as f64;
        ((self.predict(h) - s).norm_squared() + self.alpha * self.w.norm_squared()) / n
    }
}

/// Closed-form ridge regression on centred data. `h` is N × d, `s` is N × k.
/// The intercept is not penalised.
pub fn ridge(h: &DMatrix<f64>, s: &DMatrix<f64>, alpha: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    ridge_toward(h, s, alpha, 0.0, None)
}

/// Ridge with an extra pull `lambda·‖W − prior‖²` toward a reference weight
/// matrix (k × d). `lambda = 0` or no prior is plain ridge.
pub fn ridge_toward(
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    alpha: f64,
    lambda: f64,
    prior: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("shrinkage must be >= 0, got {lambda}")));
    }
    let lambda = if prior.is_some() { lambda } else { 0.0 };
    if let Some(p) = prior {
        if p.shape() != (s.ncols(), h.ncols()) {
            return Err(Error::Shape(format!("prior is {:?}, expected ({}, {})", p.shape(), s.ncols(), h.ncols())));
        }
    }
    if h.nrows() != s.nrows() {
        return Err(Error::Shape(format!("{} latent rows vs {} target rows", h.nrows(), s.nrows())));
    }
    if h.nrows() == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let (n, d) = h.shape();
    if n <= d {
        log::warn!("ridge fit with {n} samples for {d} features");
    }
    let hm = h.row_mean();
    let sm = s.row_mean();
    let mut hc = h.clone();
    for mut row in hc.row_iter_mut() {
        row -= &hm;
    }
    let mut sc = s.clone();
    for mut row in sc.row_iter_mut() {
        row -= &sm;
    }
    let mut gram = hc.transpose() * &hc;
    for i in 0..d {
        gram[(i, i)] += alpha + lambda;
    }
    let mut rhs = hc.transpose() * &sc;
    if let (Some(p), true) = (prior, lambda > 0.0) {
        rhs += p.transpose() * lambda;
    }
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram.clone().cholesky().filter(|ch| {
        // a pivot at round-off level means the design is rank deficient
        alpha + lambda > 0.0 || ch.l_dirty().diagonal().iter().all(|p| p * p > 1e-12 * scale)
    });
    let sol = match chol {
        Some(ch) => ch.solve(&rhs),
        None if alpha + lambda > 0.0 => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateDesign("ridge system is singular".into()))?,
        None => {
            return Err(Error::DegenerateDesign(
                "normal equations are singular at alpha = 0; use alpha > 0".into(),
            ))
        }
    };
    let w = sol.transpose();
    let b = (sm - &hm * w.transpose()).transpose();
    Ok((w, b))
}

pub fn fit_linear_probe(record: &ActivationRecord, alpha: f64) -> Result<LinearProbe> {
    let (w, b) = ridge(&record.h, &record.s, alpha)?;
    Ok(LinearProbe { w, b, alpha, block_name: record.block_name.clone(), target_name: record.target_name.clone() })
}

/// Predictions aligned with the window set of a split.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// N × k.
    pub values: DMatrix<f64>,
    pub provenance: Vec<worldmodel::Provenance>,
}

pub trait Predictor: Send + Sync {
    fn method(&self) -> Method;

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions>;
}

fn windows(model: &ModelParams, data: &DatasetSplit) -> Result<WindowSet> {
    WindowSet::from_split(data, model.config.window, model.config.obs_dim)
}

/// PhyIP: a time-invariant linear probe on a frozen block.
pub struct FrozenLinearProbe {
    pub model: Arc<ModelParams>,
    pub probe: LinearProbe,
    block_index: usize,
}

impl FrozenLinearProbe {
    pub fn fit(model: Arc<ModelParams>, data: &DatasetSplit, block: &str, target: &str, alpha: f64) -> Result<Self> {
        check_probe_split(data)?;
        let rec = worldmodel::extract_activations(&model, data, block, target)?;
        Self::from_record(model, &rec, alpha)
    }

    pub fn from_record(model: Arc<ModelParams>, record: &ActivationRecord, alpha: f64) -> Result<Self> {
        let block_index = model.config.block_index(&record.block_name)?;
        Ok(Self { probe: fit_linear_probe(record, alpha)?, model, block_index })
    }

    /// Wraps an already fitted readout.
    pub fn new(model: Arc<ModelParams>, probe: LinearProbe) -> Result<Self> {
        let block_index = model.config.block_index(&probe.block_name)?;
        if probe.w.ncols() != model.config.width {
            return Err(Error::Shape(format!("probe expects width {}, model has {}", probe.w.ncols(), model.config.width)));
        }
        Ok(Self { model, probe, block_index })
    }
}

impl Predictor for FrozenLinearProbe {
    fn method(&self) -> Method {
        Method::Phyip
    }

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions> {
        let ws = windows(&self.model, data)?;
        let h = worldmodel::latents(&self.model, &ws.x, self.block_index)?;
        Ok(Predictions { values: self.probe.predict(&h), provenance: ws.provenance })
    }
}

fn check_probe_split(data: &DatasetSplit) -> Result<()> {
    match data.role {
        SplitRole::ProbeTrain | SplitRole::SslTrain => Ok(()),
        r => Err(Error::InvalidSplit(format!("probes are fitted on probe_train or ssl_train data, not {r:?}"))),
    }
}

/// Ridge regression on the flattened raw observation window.
pub struct RawInputProbe {
    pub window: usize,
    pub obs_dim: usize,
    pub probe: LinearProbe,
}

impl RawInputProbe {
    pub fn fit(data: &DatasetSplit, window: usize, obs_dim: usize, target: &str, alpha: f64) -> Result<Self> {
        check_probe_split(data)?;
        let ws = WindowSet::from_split(data, window, obs_dim)?;
        let s = worldmodel::target_matrix(data, &ws, target, TargetMode::Next)?;
        let (w, b) = ridge(&ws.x.transpose(), &s, alpha)?;
        let probe = LinearProbe { w, b, alpha, block_name: "input".into(), target_name: target.into() };
        Ok(Self { window, obs_dim, probe })
    }
}

impl Predictor for RawInputProbe {
    fn method(&self) -> Method {
        Method::RawInput
    }

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions> {
        let ws = WindowSet::from_split(data, self.window, self.obs_dim)?;
        Ok(Predictions { values: self.probe.predict(&ws.x.transpose()), provenance: ws.provenance })
    }
}

/// One linear probe per time-step index.
pub struct TimeDependentProbe {
    pub model: Arc<ModelParams>,
    pub probes: BTreeMap<usize, LinearProbe>,
    /// Pull toward the pooled probe used for the fit.
    pub shrink: f64,
    block_index: usize,
}

/// Candidate shrinkage strengths, from independent per-step fits upward.
pub const TD_SHRINK_GRID: [f64; 8] = [0.0, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6];
/// Every `TD_FOLD`-th trajectory is held out when selecting the strength.
pub const TD_FOLD: usize = 5;

/// Fits a separate probe on the rows of each step index. With `shrink > 0`
/// each step's weights are pulled toward the pooled probe, which keeps the
/// per-step fits stable when a step has few rows relative to the width.
/// A single step reproduces the pooled fit for any `shrink`.
pub fn fit_time_dependent(record: &ActivationRecord, alpha: f64, shrink: f64) -> Result<BTreeMap<usize, LinearProbe>> {
    let groups = step_groups(record);
    let pooled = if shrink > 0.0 { Some(ridge(&record.h, &record.s, alpha)?.0) } else { None };
    let mut out = BTreeMap::new();
    for (step, rows) in groups {
        if rows.len() < 2 {
            return Err(Error::UnderdeterminedStep { step, count: rows.len() });
        }
        let h = record.h.select_rows(&rows);
        let s = record.s.select_rows(&rows);
        let (w, b) = ridge_toward(&h, &s, alpha, shrink, pooled.as_ref())?;
        out.insert(
            step,
            LinearProbe { w, b, alpha, block_name: record.block_name.clone(), target_name: record.target_name.clone() },
        );
    }
    Ok(out)
}

fn step_groups(record: &ActivationRecord) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in record.provenance.iter().enumerate() {
        groups.entry(p.step).or_default().push(i);
    }
    groups
}

/// Picks the shrinkage strength from `grid` by squared error on held-out
/// trajectories (every `fold`-th trajectory id), so the choice never sees
/// evaluation data. Ties go to the earlier grid entry.
pub fn select_td_shrink(record: &ActivationRecord, alpha: f64, grid: &[f64], fold: usize) -> Result<f64> {
    if grid.is_empty() || fold < 2 {
        return Err(Error::InvalidArgument("shrinkage grid must be non-empty and fold >= 2".into()));
    }
    let (mut fit_rows, mut val_rows) = (Vec::new(), Vec::new());
    for (i, p) in record.provenance.iter().enumerate() {
        if p.trajectory % fold == 0 { val_rows.push(i) } else { fit_rows.push(i) }
    }
    if val_rows.is_empty() || fit_rows.is_empty() {
        return Ok(grid[0]);
    }
    let sub = |rows: &[usize]| ActivationRecord {
        h: record.h.select_rows(rows),
        s: record.s.select_rows(rows),
        provenance: rows.iter().map(|&i| record.provenance[i].clone()).collect(),
        block_name: record.block_name.clone(),
        target_name: record.target_name.clone(),
        mode: record.mode,
    };
    let (fit, val) = (sub(&fit_rows), sub(&val_rows));
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let probes = fit_time_dependent(&fit, alpha, lambda)?;
        let mut sse = 0.0;
        for (step, rows) in step_groups(&val) {
            let Some(p) = probes.get(&step) else { continue };
            sse += (p.predict(&val.h.select_rows(&rows)) - val.s.select_rows(&rows)).norm_squared();
        }
        if sse < best.0 {
            best = (sse, lambda);
        }
    }
    Ok(best.1)
}

impl TimeDependentProbe {
    /// `shrink = None` selects the strength from [`TD_SHRINK_GRID`] on
    /// held-out probe trajectories.
    pub fn fit(model: Arc<ModelParams>, data: &DatasetSplit, block: &str, target: &str, alpha: f64, shrink: Option<f64>) -> Result<Self> {
        check_probe_split(data)?;
        let rec = worldmodel::extract_activations(&model, data, block, target)?;
        Self::from_record(model, &rec, alpha, shrink)
    }

    pub fn from_record(model: Arc<ModelParams>, record: &ActivationRecord, alpha: f64, shrink: Option<f64>) -> Result<Self> {
        let block_index = model.config.block_index(&record.block_name)?;
        let shrink = match shrink {
            Some(l) => l,
            None => select_td_shrink(record, alpha, &TD_SHRINK_GRID, TD_FOLD)?,
        };
        Ok(Self { probes: fit_time_dependent(record, alpha, shrink)?, model, block_index, shrink })
    }
}

impl Predictor for TimeDependentProbe {
    fn method(&self) -> Method {
        Method::TimeDependent
    }

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions> {
        let ws = windows(&self.model, data)?;
        let h = worldmodel::latents(&self.model, &ws.x, self.block_index)?;
        let k = self.probes.values().next().map_or(0, |p| p.w.nrows());
        let mut values = DMatrix::zeros(h.nrows(), k);
        for (i, p) in ws.provenance.iter().enumerate() {
            let probe = self
                .probes
                .get(&p.step)
                .ok_or_else(|| Error::InvalidInput(format!("no probe was fitted for step {}", p.step)))?;
            let row = probe.predict(&h.rows(i, 1).into_owned());
            values.row_mut(i).copy_from(&row);
        }
        Ok(Predictions { values, provenance: ws.provenance })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpHyper {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Training rows are subsampled to at most this many.
    pub max_samples: Option<usize>,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self { hidden: MLP_HIDDEN.to_vec(), epochs: 200, lr: 1e-3, batch: 64, seed: 0, max_samples: Some(2000) }
    }
}

/// Affine standardisation fitted on training columns.
#[derive(Clone, Debug, PartialEq)]
struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    /// `x` has one sample per column.
    fn fit(x: &DMatrix<f64>) -> Self {
        let mean = x.column_mean();
        let var = x.column_variance();
        let scale = var.map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            col -= &self.mean;
            col.component_div_assign(&self.scale);
        }
        out
    }

    fn invert(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for mut col in out.column_iter_mut() {
            col.component_mul_assign(&self.scale);
            col += &self.mean;
        }
        out
    }
}

/// Nonlinear probe `d → 254 → 32 → k` (ReLU) trained on frozen latents.
pub struct MlpProbe {
    pub model: Arc<ModelParams>,
    pub mlp: Mlp,
    pub train_loss: Vec<f64>,
    block_index: usize,
    x_norm: Standardizer,
    y_norm: Standardizer,
}

impl MlpProbe {
    pub fn fit(model: Arc<ModelParams>, data: &DatasetSplit, block: &str, target: &str, hyper: &MlpHyper) -> Result<Self> {
        check_probe_split(data)?;
        let rec = worldmodel::extract_activations(&model, data, block, target)?;
        Self::from_record(model, &rec, hyper)
    }

    pub fn from_record(model: Arc<ModelParams>, record: &ActivationRecord, hyper: &MlpHyper) -> Result<Self> {
        let block_index = model.config.block_index(&record.block_name)?;
        if record.is_empty() {
            return Err(Error::InvalidInput("no samples".into()));
        }
        if hyper.hidden.contains(&0) || hyper.batch == 0 {
            return Err(Error::InvalidConfig("mlp hidden width and batch must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut rows: Vec<usize> = (0..record.len()).collect();
        if let Some(cap) = hyper.max_samples {
            if rows.len() > cap {
                rows.shuffle(&mut rng);
                rows.truncate(cap);
                rows.sort_unstable();
            }
        }
        let x = record.h.select_rows(&rows).transpose();
        let y = record.s.select_rows(&rows).transpose();
        let x_norm = Standardizer::fit(&x);
        let y_norm = Standardizer::fit(&y);
        let x = x_norm.apply(&x);
        let y = y_norm.apply(&y);
        let mut sizes = vec![x.nrows()];
        sizes.extend(&hyper.hidden);
        sizes.push(y.nrows());
        let mut mlp = Mlp::new(&mut rng, &sizes);
        let cfg = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
        let mut opt = AdamW::new(cfg, &mlp.shapes());
        let mut order: Vec<usize> = (0..x.ncols()).collect();
        let mut train_loss = Vec::with_capacity(hyper.epochs);
        for _ in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let mut acc = 0.0;
            for chunk in order.chunks(hyper.batch) {
                let (loss, g) = mlp.loss_and_grad(&x.select_columns(chunk), &y.select_columns(chunk));
                acc += loss * chunk.len() as f64;
                mlp.apply_step(&mut opt, &g, hyper.lr);
            }
            train_loss.push(acc / x.ncols() as f64);
        }
        Ok(Self { model, mlp, train_loss, block_index, x_norm, y_norm })
    }
}

impl Predictor for MlpProbe {
    fn method(&self) -> Method {
        Method::Mlp
    }

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions> {
        let ws = windows(&self.model, data)?;
        let h = worldmodel::latents(&self.model, &ws.x, self.block_index)?;
        let y = self.y_norm.invert(&self.mlp.forward(&self.x_norm.apply(&h.transpose())));
        Ok(Predictions { values: y.transpose(), provenance: ws.provenance })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RawInput,
    TimeDependent,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineHyper {
    pub alpha: f64,
    /// Time-dependent shrinkage; `None` selects it on held-out trajectories.
    pub td_shrink: Option<f64>,
    pub mlp: MlpHyper,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, td_shrink: None, mlp: MlpHyper::default() }
    }
}

pub fn fit_baseline_probe(
    kind: BaselineKind,
    model: Arc<ModelParams>,
    data: &DatasetSplit,
    block: &str,
    target: &str,
    hyper: &BaselineHyper,
) -> Result<Box<dyn Predictor>> {
    Ok(match kind {
        BaselineKind::RawInput => {
            Box::new(RawInputProbe::fit(data, model.config.window, model.config.obs_dim, target, hyper.alpha)?)
        }
        BaselineKind::TimeDependent => Box::new(TimeDependentProbe::fit(model, data, block, target, hyper.alpha, hyper.td_shrink)?),
        BaselineKind::Mlp => Box::new(MlpProbe::fit(model, data, block, target, &hyper.mlp)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    LastLayer,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtHyper {
    pub target: String,
    pub train: TrainHyper,
    pub head_seed: u64,
}

impl Default for FtHyper {
    fn default() -> Self {
        Self { target: "force".into(), train: TrainHyper { epochs: 20, ..TrainHyper::default() }, head_seed: 0 }
    }
}

/// Attaches a fresh task head on `final` and trains on `task_data`.
pub fn finetune(params: &ModelParams, task_data: &DatasetSplit, mode: FtMode, hyper: &FtHyper) -> Result<(ModelParams, TrainLog)> {
    if task_data.role != SplitRole::FtTask {
        return Err(Error::InvalidSplit(format!("fine-tuning needs an ft_task split, got {:?}", task_data.role)));
    }
    let ws = WindowSet::from_split(task_data, params.config.window, params.config.obs_dim)?;
    let y = worldmodel::target_matrix(task_data, &ws, &hyper.target, TargetMode::Next)?.transpose();
    let model = params.clone().with_task_head(y.nrows(), hyper.head_seed);
    let scope = match mode {
        FtMode::LastLayer => Scope::TaskHeadOnly,
        FtMode::Full => Scope::All,
    };
    let out = worldmodel::fit(model, &ws.x, &y, Objective::Task, scope, &hyper.train)?;
    Ok((out.params, out.log))
}

/// A fine-tuned model read through its task head.
pub struct FineTunedModel {
    pub model: Arc<ModelParams>,
    pub mode: FtMode,
}

impl Predictor for FineTunedModel {
    fn method(&self) -> Method {
        match self.mode {
            FtMode::LastLayer => Method::LastLayerFt,
            FtMode::Full => Method::FullFt,
        }
    }

    fn predict(&self, data: &DatasetSplit) -> Result<Predictions> {
        let ws = windows(&self.model, data)?;
        Ok(Predictions { values: self.model.predict_task(&ws.x)?.transpose(), provenance: ws.provenance })
    }
}

/// Mean of `|ŝ − s| / |s|` in percent over rows with `|s| > floor`.
pub fn mape(pred: &[f64], truth: &[f64], floor: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() > floor {
            acc += (p - t).abs() / t.abs();
            n += 1;
        }
    }
    (n > 0).then(|| 100.0 * acc / n as f64)
}

fn row_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub set: String,
    pub samples: usize,
    /// Percent; `None` when every target is below the floor.
    pub mape: Option<f64>,
    /// Pearson on pooled magnitudes; 0 when undefined.
    pub rho: f64,
    pub rho_undefined: bool,
    /// Pearson per component (vector predictions against vector targets).
    pub component_rho: Vec<Option<f64>>,
    /// Mean of within-trajectory magnitude correlations.
    pub per_trajectory_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub method: Method,
    pub target: String,
    pub sets: Vec<SetMetrics>,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub mape_mean: Option<f64>,
    pub mape_std: Option<f64>,
}

/// Scores one set of predictions. Vector outputs are reduced to magnitudes
/// when the target is scalar.
pub fn score(set: &str, pred: &Predictions, truth: &DMatrix<f64>) -> Result<SetMetrics> {
    if pred.values.nrows() != truth.nrows() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.values.nrows(), truth.nrows())));
    }
    let (pk, tk) = (pred.values.ncols(), truth.ncols());
    let p_mag = if pk == 1 { pred.values.column(0).iter().copied().collect() } else { row_norms(&pred.values) };
    let t_mag = if tk == 1 { truth.column(0).iter().copied().collect() } else { row_norms(truth) };
    let mape_val = if pk == tk {
        let err: Vec<f64> = row_norms(&(&pred.values - truth));
        let (acc, n) = err
            .iter()
            .zip(&t_mag)
            .filter(|(_, t)| t.abs() > MAPE_FLOOR)
            .fold((0.0, 0usize), |(a, n), (e, t)| (a + e / t.abs(), n + 1));
        (n > 0).then(|| 100.0 * acc / n as f64)
    } else if tk == 1 {
        mape(&p_mag, &t_mag, MAPE_FLOOR)
    } else {
        return Err(Error::Shape(format!("cannot compare {pk}-dim predictions with {tk}-dim targets")));
    };
    let rho = stats::pearson(&p_mag, &t_mag);
    let component_rho = if pk == tk && tk > 1 {
        (0..tk)
            .map(|c| {
                let a: Vec<f64> = pred.values.column(c).iter().copied().collect();
                let b: Vec<f64> = truth.column(c).iter().copied().collect();
                stats::pearson(&a, &b)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut by_traj: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, p) in pred.provenance.iter().enumerate() {
        let e = by_traj.entry(p.trajectory).or_default();
        e.0.push(p_mag[i]);
        e.1.push(t_mag[i]);
    }
    let per: Vec<f64> = by_traj.values().filter_map(|(a, b)| stats::pearson(a, b)).collect();
    Ok(SetMetrics {
        set: set.to_string(),
        samples: truth.nrows(),
        mape: mape_val,
        rho: rho.unwrap_or(0.0),
        rho_undefined: rho.is_none(),
        component_rho,
        per_trajectory_rho: (!per.is_empty()).then(|| stats::mean(&per)),
    })
}

/// Zero-shot evaluation on every OOD set.
pub fn evaluate_predictor(predictor: &dyn Predictor, suite: &[DatasetSplit], target: &str) -> Result<ProbeReport> {
    if suite.is_empty() {
        return Err(Error::InvalidInput("empty OOD suite".into()));
    }
    let sets = suite
        .iter()
        .map(|split| {
            let pred = predictor.predict(split)?;
            let truth = worldmodel::targets_at(split, &pred.provenance, target, TargetMode::Next)?;
            score(&split.name, &pred, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(predictor.method(), target, sets))
}

pub fn aggregate(method: Method, target: &str, sets: Vec<SetMetrics>) -> ProbeReport {
    let rhos: Vec<f64> = sets.iter().map(|s| s.rho).collect();
    let mapes: Vec<f64> = sets.iter().filter_map(|s| s.mape).collect();
    ProbeReport {
        method,
        target: target.to_string(),
        rho_mean: stats::mean(&rhos),
        rho_std: stats::std_dev(&rhos),
        mape_mean: (!mapes.is_empty()).then(|| stats::mean(&mapes)),
        mape_std: (!mapes.is_empty()).then(|| stats::std_dev(&mapes)),
        sets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_dataset, Interval, ParamRanges, SplitRequest, SystemSpec, Target};
    use crate::worldmodel::{init_model, ModelConfig, Provenance};
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn record(h: DMatrix<f64>, s: DMatrix<f64>, steps: Vec<usize>) -> ActivationRecord {
        let provenance = steps.into_iter().enumerate().map(|(i, step)| Provenance { trajectory: i, step }).collect();
        ActivationRecord { block_name: "blocks.0".into(), target_name: "force".into(), mode: TargetMode::Next, h, s, provenance }
    }

    #[test]
    fn exact_linear_model_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random_matrix(&mut rng, 50, 4);
        let w_true = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0]);
        let s = &h * w_true.transpose();
        let p = fit_linear_probe(&record(h, s, vec![0; 50]), 1e-12).unwrap();
        assert!((&p.w - &w_true).abs().max() < 1e-6);
        assert!(p.b.abs().max() < 1e-6);
    }

    #[test]
    fn three_sample_normal_equations() {
        // H = [[1,2],[3,1],[0,4]], s = [1,2,3], alpha = 0.5
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 1.0, 0.0, 4.0]);
        let s = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        // means (4/3, 7/3) and 2; centred gram [[14/3,-13/3],[-13/3,14/3]] + 0.5 I,
        // rhs [-1, 2]. Solving by hand: det = (31/6)^2 - (13/3)^2 = 285/36,
        // w1 = (-31/6 + 26/3)/(285/36) = 126/285, w2 = (31/3 - 13/3)/(285/36) = 216/285.
        let w1 = 126.0 / 285.0;
        let w2 = 216.0 / 285.0;
        let b = 2.0 - w1 * 4.0 / 3.0 - w2 * 7.0 / 3.0;
        let (w, bb) = ridge(&h, &s, 0.5).unwrap();
        assert!((w[(0, 0)] - w1).abs() < 1e-10);
        assert!((w[(0, 1)] - w2).abs() < 1e-10);
        assert!((bb[0] - b).abs() < 1e-10);
    }

    #[test]
    fn singular_design_at_zero_alpha() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let s = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(ridge(&h, &s, 0.0), Err(Error::DegenerateDesign(_))));
        assert!(ridge(&h, &s, 1.0).is_ok());
    }

    #[test]
    fn ridge_is_a_minimiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 40, 5);
        let s = random_matrix(&mut rng, 40, 2);
        let p = fit_linear_probe(&record(h.clone(), s.clone(), vec![0; 40]), 1.0).unwrap();
        let base = p.objective(&h, &s);
        for _ in 0..100 {
            let mut q = p.clone();
            q.w += random_matrix(&mut rng, 2, 5) * 1e-3;
            q.b += DVector::from_fn(2, |_, _| rng.random_range(-1e-3..1e-3));
            assert!(q.objective(&h, &s) >= base);
        }
    }

    #[test]
    fn gradient_descent_converges_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 60, 3);
        let s = random_matrix(&mut rng, 60, 1);
        let p = fit_linear_probe(&record(h.clone(), s.clone(), vec![0; 60]), 1.0).unwrap();
        let n = 60.0;
        let mut w = DMatrix::<f64>::zeros(1, 3);
        let mut b = DVector::<f64>::zeros(1);
        for _ in 0..20_000 {
            let mut pred = &h * w.transpose();
            for mut row in pred.row_iter_mut() {
                row += b.transpose();
            }
            let r = pred - &s;
            let gw = (r.transpose() * &h * 2.0 + &w * 2.0) / n;
            let gb = r.row_sum().transpose() * (2.0 / n);
            w -= gw * 0.2;
            b -= gb * 0.2;
        }
        let dist = ((&w - &p.w).norm_squared() + (&b - &p.b).norm_squared()).sqrt();
        assert!(dist < 1e-4, "{dist}");
    }

    #[test]
    fn single_step_time_dependent_equals_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = record(random_matrix(&mut rng, 20, 3), random_matrix(&mut rng, 20, 1), vec![7; 20]);
        let td = fit_time_dependent(&rec, 1.0, 0.0).unwrap();
        assert_eq!(td.len(), 1);
        assert_eq!(td[&7], fit_linear_probe(&rec, 1.0).unwrap());
    }

    #[test]
    fn single_step_shrinkage_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rec = record(random_matrix(&mut rng, 30, 3), random_matrix(&mut rng, 30, 2), vec![2; 30]);
        let pooled = fit_linear_probe(&rec, 0.5).unwrap();
        for lambda in [1.0, 1e3] {
            let td = fit_time_dependent(&rec, 0.5, lambda).unwrap();
            assert!((&td[&2].w - &pooled.w).abs().max() < 1e-10);
            assert!((&td[&2].b - &pooled.b).abs().max() < 1e-10);
        }
    }

    #[test]
    fn strong_shrinkage_recovers_pooled_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_matrix(&mut rng, 60, 3);
        let steps: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let s = DMatrix::from_fn(60, 1, |i, _| h[(i, 0)] * (1.0 + steps[i] as f64));
        let rec = record(h, s, steps);
        let pooled = fit_linear_probe(&rec, 1e-3).unwrap();
        let loose = fit_time_dependent(&rec, 1e-3, 0.0).unwrap();
        let tight = fit_time_dependent(&rec, 1e-3, 1e9).unwrap();
        assert!((&loose[&1].w - &pooled.w).abs().max() > 0.1);
        for p in tight.values() {
            assert!((&p.w - &pooled.w).abs().max() < 1e-6);
        }
    }

    #[test]
    fn shrinkage_selection_prefers_independent_fits_for_distinct_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = random_matrix(&mut rng, 400, 3);
        let steps: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let s = DMatrix::from_fn(400, 1, |i, _| if steps[i] == 0 { h[(i, 0)] } else { -h[(i, 0)] });
        let rec = record(h, s, steps);
        assert_eq!(select_td_shrink(&rec, 1e-6, &TD_SHRINK_GRID, TD_FOLD).unwrap(), 0.0);
        assert!(select_td_shrink(&rec, 1e-6, &[], TD_FOLD).is_err());
    }

    #[test]
    fn time_dependent_needs_two_samples_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = record(random_matrix(&mut rng, 3, 2), random_matrix(&mut rng, 3, 1), vec![0, 0, 1]);
        assert!(matches!(fit_time_dependent(&rec, 1.0, 0.0), Err(Error::UnderdeterminedStep { step: 1, count: 1 })));
    }

    #[test]
    fn time_dependent_training_error_not_larger() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 90, 4);
        let steps: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let s = DMatrix::from_fn(90, 1, |i, _| h[(i, 0)] * (1.0 + steps[i] as f64) + 0.1 * h[(i, 1)].powi(2));
        let rec = record(h.clone(), s.clone(), steps.clone());
        let inv = fit_linear_probe(&rec, 1e-8).unwrap();
        let td = fit_time_dependent(&rec, 1e-8, 0.0).unwrap();
        let inv_err = (inv.predict(&h) - &s).norm_squared();
        let td_err: f64 = (0..90).map(|i| (td[&steps[i]].predict(&h.rows(i, 1).into_owned())[0] - s[i]).powi(2)).sum();
        assert!(td_err <= inv_err);
    }

    #[test]
    fn mape_and_score_policies() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0], MAPE_FLOOR), Some(0.0));
        assert_eq!(mape(&[1.0], &[0.0], MAPE_FLOOR), None);
        assert!((mape(&[1.1, 1.8], &[1.0, 2.0], MAPE_FLOOR).unwrap() - 10.0).abs() < 1e-12);
        let prov: Vec<Provenance> = (0..4).map(|i| Provenance { trajectory: i / 2, step: i }).collect();
        let truth = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let perfect = score("a", &Predictions { values: truth.clone(), provenance: prov.clone() }, &truth).unwrap();
        assert_eq!(perfect.mape, Some(0.0));
        assert!((perfect.rho - 1.0).abs() < 1e-12);
        let flat = score("b", &Predictions { values: DMatrix::from_element(4, 1, 2.0), provenance: prov }, &truth).unwrap();
        assert_eq!(flat.rho, 0.0);
        assert!(flat.rho_undefined);
    }

    fn two_body_split(name: &str, role: SplitRole, m2: Interval, n: usize, seed: u64) -> DatasetSplit {
        let ssl = ParamRanges::from([
            ("m2".to_string(), Interval::new(0.5, 2.0)),
            ("r0".to_string(), Interval::new(0.8, 1.6)),
        ]);
        let req = SplitRequest {
            name: name.into(),
            role,
            template: SystemSpec::two_body(1.0, 1.0, 1.0, 0.01, 16).with_substeps(10),
            ranges: ParamRanges::from([("m2".to_string(), m2), ("r0".to_string(), Interval::new(0.8, 1.6))]),
            n_trajectories: n,
            seed,
            ssl_reference: (role != SplitRole::SslTrain && role != SplitRole::FtTask).then_some(&ssl),
            targets: vec![Target::Force, Target::ForceMagnitude],
        };
        sample_dataset(&req).unwrap()
    }

    #[test]
    fn raw_input_recovers_linear_window_map() {
        let mut data = two_body_split("p", SplitRole::ProbeTrain, Interval::new(0.5, 2.0), 30, 1);
        // overwrite the target with a fixed linear map of the previous window
        for t in data.trajectories.iter_mut() {
            let mut s = crate::dynamics::Series::new(1);
            s.push(&[0.0]);
            for step in 1..t.len() {
                let prev = step - 1;
                let v = if prev >= 2 {
                    let o = &t.observations;
                    0.3 * o.row(prev)[0] - 1.2 * o.row(prev - 1)[1] + 2.0 * o.row(prev - 2)[0] + 0.7
                } else {
                    0.0
                };
                s.push(&[v]);
            }
            t.targets.insert("force_magnitude".into(), s);
        }
        let probe = RawInputProbe::fit(&data, 3, 2, "force_magnitude", 1e-10).unwrap();
        let rep = evaluate_predictor(&probe, std::slice::from_ref(&data), "force_magnitude").unwrap();
        assert!(rep.sets[0].rho > 0.999, "{}", rep.sets[0].rho);
    }

    #[test]
    fn probing_and_evaluation_leave_backbone_untouched() {
        let cfg = ModelConfig { window: 3, width: 8, n_blocks: 2, obs_dim: 2, seed: 1 };
        let model = Arc::new(init_model(&cfg).unwrap());
        let before = model.checksum();
        let probe_data = two_body_split("p", SplitRole::ProbeTrain, Interval::new(0.5, 2.0), 10, 2);
        let ood = two_body_split("o", SplitRole::OodTest, Interval::new(2.5, 3.0), 4, 3);
        let phyip = FrozenLinearProbe::fit(model.clone(), &probe_data, "blocks.1", "force_magnitude", 1.0).unwrap();
        let hyper = BaselineHyper { mlp: MlpHyper { epochs: 2, ..MlpHyper::default() }, ..BaselineHyper::default() };
        let mut preds: Vec<Box<dyn Predictor>> = vec![Box::new(phyip)];
        for kind in [BaselineKind::RawInput, BaselineKind::TimeDependent, BaselineKind::Mlp] {
            preds.push(fit_baseline_probe(kind, model.clone(), &probe_data, "blocks.1", "force_magnitude", &hyper).unwrap());
        }
        for p in &preds {
            let rep = evaluate_predictor(p.as_ref(), std::slice::from_ref(&ood), "force_magnitude").unwrap();
            assert_eq!(rep.sets.len(), 1);
            assert!(rep.sets[0].rho.abs() <= 1.0);
            assert!(rep.sets[0].mape.unwrap() >= 0.0);
        }
        assert_eq!(model.checksum(), before);
        assert!(FrozenLinearProbe::fit(model.clone(), &ood, "blocks.1", "force_magnitude", 1.0).is_err());
    }

    #[test]
    fn mlp_hidden_layers_are_254_then_32() {
        let cfg = ModelConfig { window: 3, width: 8, n_blocks: 2, obs_dim: 2, seed: 1 };
        let model = Arc::new(init_model(&cfg).unwrap());
        let data = two_body_split("p", SplitRole::ProbeTrain, Interval::new(0.5, 2.0), 4, 2);
        let hyper = MlpHyper { epochs: 1, ..MlpHyper::default() };
        let p = MlpProbe::fit(model, &data, "final", "force_magnitude", &hyper).unwrap();
        assert_eq!(p.mlp.hidden_sizes(), vec![254, 32]);
    }

    #[test]
    fn finetune_modes() {
        let cfg = ModelConfig { window: 3, width: 8, n_blocks: 2, obs_dim: 2, seed: 1 };
        let base = init_model(&cfg).unwrap();
        let task = two_body_split("ft", SplitRole::FtTask, Interval::point(1.0), 6, 4);
        let zero = FtHyper { train: TrainHyper { epochs: 0, ..TrainHyper::default() }, ..FtHyper::default() };
        let (same, _) = finetune(&base, &task, FtMode::Full, &zero).unwrap();
        for ((_, a), (_, b)) in base.tensors().into_iter().zip(same.tensors()) {
            assert_eq!(a, b);
        }
        let hyper = FtHyper { train: TrainHyper { epochs: 2, ..TrainHyper::default() }, ..FtHyper::default() };
        let (ll, _) = finetune(&base, &task, FtMode::LastLayer, &hyper).unwrap();
        for ((n, a), (_, b)) in base.tensors().into_iter().zip(ll.tensors()) {
            assert_eq!(a, b, "{n}");
        }
        let (full, _) = finetune(&base, &task, FtMode::Full, &hyper).unwrap();
        assert_ne!(full.blocks[0].fc1_w, base.blocks[0].fc1_w);
        let probe_split = two_body_split("p", SplitRole::ProbeTrain, Interval::new(0.5, 2.0), 2, 2);
        assert!(finetune(&base, &probe_split, FtMode::Full, &hyper).is_err());
    }
}
