//! Residual next-state predictor.
//!
//! A flattened observation window is embedded by a linear encoder, passed
//! through `n_blocks` pre-norm residual MLP blocks, and read out by a linear
//! head without bias. The prediction is `x_t + head · h_final`; the head is
//! zero at initialisation so a fresh model predicts "no change".
//!
//! Latents are named `blocks.{l}` (the residual stream entering block `l`)
//! and `final` (the stream entering the head).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{DatasetSplit, Target};
use crate::error::{Error, Result};
use crate::nn::{self, AdamConfig, AdamW};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHYM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Columns processed at once by inference helpers.
const CHUNK: usize = 1024;

/// nalgebra multiplies matrices with at most this many columns through a
/// different kernel; narrower inputs are padded so every sample is computed
/// the same way regardless of batch size.
const MIN_GEMM_COLS: usize = 6;

fn pad_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    if x.ncols() >= MIN_GEMM_COLS {
        return x.clone();
    }
    let mut p = DMatrix::zeros(x.nrows(), MIN_GEMM_COLS);
    p.columns_mut(0, x.ncols()).copy_from(x);
    p
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub obs_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { window: 8, width: 128, n_blocks: 6, obs_dim: 2, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidConfig(format!("window must be >= 2, got {}", self.window)));
        }
        if self.width < 8 {
            return Err(Error::InvalidConfig(format!("width must be >= 8, got {}", self.width)));
        }
        if self.n_blocks < 2 {
            return Err(Error::InvalidConfig(format!("n_blocks must be >= 2, got {}", self.n_blocks)));
        }
        if self.obs_dim == 0 {
            return Err(Error::InvalidConfig("obs_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.window * self.obs_dim
    }

    /// Closed-form parameter count of the backbone and head.
    pub fn param_count(&self) -> usize {
        let (w, i, o) = (self.width, self.input_dim(), self.obs_dim);
        i * w + w + self.n_blocks * (2 * w * w + 2 * w) + o * w
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n_blocks).map(|l| format!("blocks.{l}")).collect();
        names.push("final".into());
        names
    }

    /// Position of a latent in the residual stream (0 = encoder output).
    pub fn block_index(&self, name: &str) -> Result<usize> {
        let unknown = || Error::UnknownBlock { name: name.to_string(), available: self.block_names() };
        if name == "final" {
            return Ok(self.n_blocks);
        }
        let idx: usize = name.strip_prefix("blocks.").and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
        if idx < self.n_blocks {
            Ok(idx)
        } else {
            Err(unknown())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub fc1_w: DMatrix<f64>,
    pub fc1_b: DMatrix<f64>,
    pub fc2_w: DMatrix<f64>,
    pub fc2_b: DMatrix<f64>,
}

/// Fresh linear readout attached to `final` for fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder_w: DMatrix<f64>,
    pub encoder_b: DMatrix<f64>,
    pub blocks: Vec<Block>,
    /// Decoder head g (obs_dim × width), no bias.
    pub head_w: DMatrix<f64>,
    pub task_head: Option<TaskHead>,
}

pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, i) = (config.width, config.input_dim());
    let encoder_w = nn::uniform_init(&mut rng, w, i, i);
    let encoder_b = nn::uniform_init(&mut rng, w, 1, i);
    let blocks = (0..config.n_blocks)
        .map(|_| Block {
            fc1_w: nn::uniform_init(&mut rng, w, w, w),
            fc1_b: nn::uniform_init(&mut rng, w, 1, w),
            fc2_w: nn::uniform_init(&mut rng, w, w, w),
            fc2_b: nn::uniform_init(&mut rng, w, 1, w),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        encoder_w,
        encoder_b,
        blocks,
        head_w: DMatrix::zeros(config.obs_dim, w),
        task_head: None,
    })
}

/// Intermediate values of a batched forward pass.
pub struct ForwardCache {
    pub x: DMatrix<f64>,
    /// Residual stream, `n_blocks + 1` entries; the last is `final`.
    pub h: Vec<DMatrix<f64>>,
    u: Vec<DMatrix<f64>>,
    inv_std: Vec<Vec<f64>>,
    a: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
}

/// Latents and prediction for a single window.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub latents: Vec<(String, Vec<f64>)>,
    pub prediction: Vec<f64>,
}

/// What the network is trained to output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Next observation through the residual decoder head.
    NextState,
    /// Arbitrary targets through the task head.
    Task,
}

/// Which tensors an optimiser may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    TaskHeadOnly,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Self {
            config: self.config.clone(),
            encoder_w: z(&self.encoder_w),
            encoder_b: z(&self.encoder_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block { fc1_w: z(&b.fc1_w), fc1_b: z(&b.fc1_b), fc2_w: z(&b.fc2_w), fc2_b: z(&b.fc2_b) })
                .collect(),
            head_w: z(&self.head_w),
            task_head: self.task_head.as_ref().map(|t| TaskHead { weight: z(&t.weight), bias: z(&t.bias) }),
        }
    }

    /// Named tensors ordered by depth. Biases are `n × 1` matrices.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![("encoder.weight".to_string(), &self.encoder_w), ("encoder.bias".to_string(), &self.encoder_b)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.fc1.weight"), &b.fc1_w));
            out.push((format!("blocks.{l}.fc1.bias"), &b.fc1_b));
            out.push((format!("blocks.{l}.fc2.weight"), &b.fc2_w));
            out.push((format!("blocks.{l}.fc2.bias"), &b.fc2_b));
        }
        out.push(("head.weight".into(), &self.head_w));
        if let Some(t) = &self.task_head {
            out.push(("task_head.weight".into(), &t.weight));
            out.push(("task_head.bias".into(), &t.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = vec![
            ("encoder.weight".to_string(), &mut self.encoder_w),
            ("encoder.bias".to_string(), &mut self.encoder_b),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.fc1.weight"), &mut b.fc1_w));
            out.push((format!("blocks.{l}.fc1.bias"), &mut b.fc1_b));
            out.push((format!("blocks.{l}.fc2.weight"), &mut b.fc2_w));
            out.push((format!("blocks.{l}.fc2.bias"), &mut b.fc2_b));
        }
        out.push(("head.weight".into(), &mut self.head_w));
        if let Some(t) = &mut self.task_head {
            out.push(("task_head.weight".into(), &mut t.weight));
            out.push(("task_head.bias".into(), &mut t.bias));
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over config, tensor names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Attach a fresh uniformly initialised task head of output size `k`.
    pub fn with_task_head(mut self, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.config.width;
        self.task_head = Some(TaskHead {
            weight: nn::uniform_init(&mut rng, k, w, w),
            bias: nn::uniform_init(&mut rng, k, 1, w),
        });
        self
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} rows, model expects window {} x obs_dim {}",
                x.nrows(),
                self.config.window,
                self.config.obs_dim
            )));
        }
        Ok(())
    }

    /// Batched forward pass keeping everything needed for backward.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n = self.config.n_blocks;
        let mut h0 = &self.encoder_w * x;
        nn::add_bias(&mut h0, &self.encoder_b);
        let mut cache = ForwardCache {
            x: x.clone(),
            h: Vec::with_capacity(n + 1),
            u: Vec::with_capacity(n),
            inv_std: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
        };
        cache.h.push(h0);
        for b in &self.blocks {
            let h = cache.h.last().expect("stream non-empty");
            let (u, inv) = nn::layer_norm(h);
            let mut a = &b.fc1_w * &u;
            nn::add_bias(&mut a, &b.fc1_b);
            let z = a.map(nn::gelu);
            let mut next = &b.fc2_w * &z;
            nn::add_bias(&mut next, &b.fc2_b);
            next += h;
            cache.u.push(u);
            cache.inv_std.push(inv);
            cache.a.push(a);
            cache.z.push(z);
            cache.h.push(next);
        }
        Ok(cache)
    }

    /// Residual stream up to and including position `upto`, without caching.
    pub fn stream_at(&self, x: &DMatrix<f64>, upto: usize) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let n = x.ncols();
        let mut h = &self.encoder_w * pad_columns(x);
        nn::add_bias(&mut h, &self.encoder_b);
        for b in self.blocks.iter().take(upto) {
            h += self.block_update(b, &h);
        }
        Ok(h.columns(0, n).into_owned())
    }

    fn block_update(&self, b: &Block, h: &DMatrix<f64>) -> DMatrix<f64> {
        let (u, _) = nn::layer_norm(h);
        let mut a = &b.fc1_w * u;
        nn::add_bias(&mut a, &b.fc1_b);
        a.apply(|v| *v = nn::gelu(*v));
        let mut out = &b.fc2_w * a;
        nn::add_bias(&mut out, &b.fc2_b);
        out
    }

    /// Outputs of block `l`'s projection layer (`fc2`, the residual update)
    /// for every column of `x`.
    pub fn projection_units(&self, x: &DMatrix<f64>, l: usize) -> Result<DMatrix<f64>> {
        let b = self
            .blocks
            .get(l)
            .ok_or_else(|| Error::UnknownBlock { name: format!("blocks.{l}"), available: self.config.block_names() })?;
        let h = self.stream_at(x, l)?;
        Ok(self.block_update(b, &h))
    }

    fn last_obs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let o = self.config.obs_dim;
        x.rows(x.nrows() - o, o).into_owned()
    }

    /// Residual prediction of the next observation for every column.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.config.obs_dim, x.ncols());
        for start in (0..x.ncols()).step_by(CHUNK) {
            let n = CHUNK.min(x.ncols() - start);
            let xc = x.columns(start, n).into_owned();
            let h = self.stream_at(&xc, self.config.n_blocks)?;
            let pred = self.last_obs(&xc) + &self.head_w * h;
            out.columns_mut(start, n).copy_from(&pred);
        }
        Ok(out)
    }

    /// Task-head outputs for every column.
    pub fn predict_task(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = self.task_head.as_ref().ok_or_else(|| Error::Architecture("model has no task head".into()))?;
        let mut out = DMatrix::zeros(t.weight.nrows(), x.ncols());
        for start in (0..x.ncols()).step_by(CHUNK) {
            let n = CHUNK.min(x.ncols() - start);
            let xc = x.columns(start, n).into_owned();
            let h = self.stream_at(&xc, self.config.n_blocks)?;
            let mut y = &t.weight * h;
            nn::add_bias(&mut y, &t.bias);
            out.columns_mut(start, n).copy_from(&y);
        }
        Ok(out)
    }

    /// Single-window forward pass. `window` is the flattened window, oldest
    /// observation first.
    pub fn forward(&self, window: &[f64]) -> Result<ForwardOutput> {
        let x = DMatrix::from_column_slice(window.len(), 1, window);
        let cache = self.forward_batch(&pad_columns(&x))?;
        let names = self.config.block_names();
        let latents = names.into_iter().zip(cache.h.iter()).map(|(n, h)| (n, h.column(0).iter().copied().collect())).collect();
        let pred = self.last_obs(&x) + &self.head_w * cache.h.last().expect("final latent").column(0);
        Ok(ForwardOutput { latents, prediction: pred.iter().copied().collect() })
    }

    /// Backpropagates `d_final` (gradient w.r.t. the final stream) into
    /// `grads` for the encoder and every block.
    fn backward(&self, cache: &ForwardCache, mut dh: DMatrix<f64>, grads: &mut ModelParams) {
        for l in (0..self.config.n_blocks).rev() {
            let b = &self.blocks[l];
            let g = &mut grads.blocks[l];
            g.fc2_w = &dh * cache.z[l].transpose();
            g.fc2_b = nn::row_sums(&dh);
            let mut da = b.fc2_w.transpose() * &dh;
            da.zip_apply(&cache.a[l], |d, a| *d *= nn::gelu_grad(a));
            g.fc1_w = &da * cache.u[l].transpose();
            g.fc1_b = nn::row_sums(&da);
            let du = b.fc1_w.transpose() * da;
            dh += nn::layer_norm_backward(&cache.u[l], &cache.inv_std[l], &du);
        }
        grads.encoder_w = &dh * cache.x.transpose();
        grads.encoder_b = nn::row_sums(&dh);
    }

    /// Mean over columns of the squared error norm, and its gradient.
    ///
    /// With `Scope::TaskHeadOnly` only the task-head gradient is filled.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, objective: Objective, scope: Scope) -> Result<(f64, ModelParams)> {
        let bsz = x.ncols() as f64;
        let mut grads = self.zeros_like();
        let (cache, h_final) = match scope {
            Scope::All => {
                let c = self.forward_batch(x)?;
                let hf = c.h.last().expect("final").clone();
                (Some(c), hf)
            }
            Scope::TaskHeadOnly => (None, self.stream_at(x, self.config.n_blocks)?),
        };
        let (loss, d_final) = match objective {
            Objective::NextState => {
                if scope == Scope::TaskHeadOnly {
                    return Err(Error::InvalidArgument("next-state objective needs the decoder head".into()));
                }
                let diff = self.last_obs(x) + &self.head_w * &h_final - y;
                let loss = diff.norm_squared() / bsz;
                let dpred = diff * (2.0 / bsz);
                grads.head_w = &dpred * h_final.transpose();
                (loss, self.head_w.transpose() * dpred)
            }
            Objective::Task => {
                let t = self.task_head.as_ref().ok_or_else(|| Error::Architecture("model has no task head".into()))?;
                let mut pred = &t.weight * &h_final;
                nn::add_bias(&mut pred, &t.bias);
                let diff = pred - y;
                let loss = diff.norm_squared() / bsz;
                let dpred = diff * (2.0 / bsz);
                let gt = grads.task_head.as_mut().expect("grad mirrors params");
                gt.weight = &dpred * h_final.transpose();
                gt.bias = nn::row_sums(&dpred);
                (loss, t.weight.transpose() * dpred)
            }
        };
        if let Some(cache) = cache {
            self.backward(&cache, d_final, &mut grads);
        }
        Ok((loss, grads))
    }
}

/// Flattened observation windows and the observation that follows each.
#[derive(Clone, Debug)]
pub struct WindowSet {
    /// `window·obs_dim × N`, oldest observation first.
    pub x: DMatrix<f64>,
    /// `obs_dim × N`.
    pub next: DMatrix<f64>,
    pub provenance: Vec<Provenance>,
}

/// Source of one sample: the window ends at `step` of trajectory `trajectory`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trajectory: usize,
    pub step: usize,
}

impl WindowSet {
    /// Every window that fits inside a trajectory and still has a successor.
    pub fn from_split(split: &DatasetSplit, window: usize, obs_dim: usize) -> Result<Self> {
        let mut prov = Vec::new();
        for (ti, t) in split.trajectories.iter().enumerate() {
            if t.observations.dim != obs_dim {
                return Err(Error::Shape(format!(
                    "trajectory {} has observation dim {}, model expects {obs_dim}",
                    t.id, t.observations.dim
                )));
            }
            for step in window.saturating_sub(1)..t.len().saturating_sub(1) {
                prov.push(Provenance { trajectory: ti, step });
            }
        }
        let n = prov.len();
        let mut x = DMatrix::zeros(window * obs_dim, n);
        let mut next = DMatrix::zeros(obs_dim, n);
        for (j, p) in prov.iter().enumerate() {
            let obs = &split.trajectories[p.trajectory].observations;
            let start = (p.step + 1 - window) * obs_dim;
            let end = (p.step + 1) * obs_dim;
            x.column_mut(j).copy_from_slice(&obs.data[start..end]);
            next.column_mut(j).copy_from_slice(obs.row(p.step + 1));
        }
        for p in prov.iter_mut() {
            p.trajectory = split.trajectories[p.trajectory].id;
        }
        Ok(Self { x, next, provenance: prov })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Half-cosine learning-rate decay over the run.
    #[serde(default)]
    pub cosine: bool,
    /// Epochs after which a copy of the parameters is kept (0 = initial).
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 64, epochs: 10, seed: 0, adam: AdamConfig::default(), cosine: false, checkpoint_epochs: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss over the data before any update.
    pub initial_loss: Option<f64>,
    /// Sample-weighted mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub hyper: TrainHyper,
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    pub checkpoints: Vec<(usize, ModelParams)>,
}

/// Mean loss over all columns, evaluated in chunks.
pub fn dataset_loss(params: &ModelParams, x: &DMatrix<f64>, y: &DMatrix<f64>, objective: Objective) -> Result<f64> {
    if x.ncols() == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let pred = match objective {
        Objective::NextState => params.predict_batch(x)?,
        Objective::Task => params.predict_task(x)?,
    };
    Ok((pred - y).norm_squared() / x.ncols() as f64)
}

/// Minibatch AdamW on `(x, y)` for the given objective.
pub fn fit(
    mut params: ModelParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    objective: Objective,
    scope: Scope,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(Error::InvalidConfig("batch and lr must be positive".into()));
    }
    let started = Instant::now();
    let mut checkpoints = Vec::new();
    if hyper.checkpoint_epochs.contains(&0) {
        checkpoints.push((0, params.clone()));
    }
    if hyper.epochs == 0 {
        let log = TrainLog { initial_loss: None, epoch_losses: Vec::new(), hyper: hyper.clone(), wall_time_secs: 0.0 };
        return Ok(TrainOutcome { params, log, checkpoints });
    }
    let n = x.ncols();
    if n == 0 {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let initial_loss = dataset_loss(&params, x, y, objective)?;
    let trainable = |name: &str| scope == Scope::All || name.starts_with("task_head.");
    let shapes: Vec<(usize, usize)> =
        params.tensors().into_iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t.shape()).collect();
    let decay: Vec<bool> =
        params.tensors().into_iter().filter(|(n, _)| trainable(n)).map(|(n, _)| n.ends_with(".weight")).collect();
    let mut opt = AdamW::new(hyper.adam.clone(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let steps_per_epoch = n.div_ceil(hyper.batch);
    let total_steps = steps_per_epoch * hyper.epochs;
    let mut step = 0;
    let mut losses = Vec::with_capacity(hyper.epochs);
    let mut last_good = params.clone();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let xb = x.select_columns(chunk);
            let yb = y.select_columns(chunk);
            let (loss, grads) = params.loss_and_grad(&xb, &yb, objective, scope)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss, last_good: Box::new(last_good) });
            }
            acc += loss * chunk.len() as f64;
            let lr = if hyper.cosine { nn::cosine_lr(hyper.lr, step, total_steps) } else { hyper.lr };
            let g: Vec<&DMatrix<f64>> =
                grads.tensors().into_iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t).collect();
            let mut p: Vec<&mut DMatrix<f64>> =
                params.tensors_mut().into_iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t).collect();
            opt.step(&mut p, &g, &decay, lr);
            step += 1;
        }
        let epoch_loss = acc / n as f64;
        if !epoch_loss.is_finite() || params.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch, loss: epoch_loss, last_good: Box::new(last_good) });
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.6e}");
        losses.push(epoch_loss);
        last_good = params.clone();
        if hyper.checkpoint_epochs.contains(&epoch) {
            checkpoints.push((epoch, params.clone()));
        }
    }
    let log = TrainLog {
        initial_loss: Some(initial_loss),
        epoch_losses: losses,
        hyper: hyper.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { params, log, checkpoints })
}

/// Self-supervised next-observation training on an `ssl_train` split.
pub fn train_ssl(params: ModelParams, data: &DatasetSplit, hyper: &TrainHyper) -> Result<TrainOutcome> {
    if data.role != crate::dynamics::SplitRole::SslTrain {
        return Err(Error::InvalidSplit(format!("train_ssl needs an ssl_train split, got {:?}", data.role)));
    }
    let ws = WindowSet::from_split(data, params.config.window, params.config.obs_dim)?;
    fit(params, &ws.x, &ws.next, Objective::NextState, Scope::All, hyper)
}

/// Mean squared next-observation error over every valid window.
pub fn evaluate_ssl(params: &ModelParams, data: &DatasetSplit) -> Result<f64> {
    let ws = WindowSet::from_split(data, params.config.window, params.config.obs_dim)?;
    dataset_loss(params, &ws.x, &ws.next, Objective::NextState)
}

/// How the probe target is aligned with the latent at step t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// s(t+1).
    #[default]
    Next,
    /// s(t+1) − s(t).
    Increment,
}

/// Frozen latents `h` (N × width) paired with targets `s` (N × k).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub block_name: String,
    pub target_name: String,
    pub mode: TargetMode,
    pub h: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub provenance: Vec<Provenance>,
}

impl ActivationRecord {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }
}

/// Target rows aligned with a window set.
pub fn target_matrix(data: &DatasetSplit, ws: &WindowSet, target: &str, mode: TargetMode) -> Result<DMatrix<f64>> {
    targets_at(data, &ws.provenance, target, mode)
}

/// Target rows for explicit sample positions.
pub fn targets_at(data: &DatasetSplit, provenance: &[Provenance], target: &str, mode: TargetMode) -> Result<DMatrix<f64>> {
    let by_id: std::collections::HashMap<usize, &crate::dynamics::Trajectory> =
        data.trajectories.iter().map(|t| (t.id, t)).collect();
    let first = data.trajectories.first().ok_or_else(|| Error::InvalidInput("empty split".into()))?;
    let k = first.target(target)?.dim;
    let mut s = DMatrix::zeros(provenance.len(), k);
    for (i, p) in provenance.iter().enumerate() {
        let traj = by_id.get(&p.trajectory).ok_or_else(|| Error::InvalidInput(format!("unknown trajectory {}", p.trajectory)))?;
        let series = traj.target(target)?;
        let next = series.row(p.step + 1);
        for c in 0..k {
            s[(i, c)] = match mode {
                TargetMode::Next => next[c],
                TargetMode::Increment => next[c] - series.row(p.step)[c],
            };
        }
    }
    Ok(s)
}

pub fn extract_activations(params: &ModelParams, data: &DatasetSplit, block_name: &str, target: &str) -> Result<ActivationRecord> {
    extract_activations_with(params, data, block_name, target, TargetMode::Next)
}

pub fn extract_activations_with(
    params: &ModelParams,
    data: &DatasetSplit,
    block_name: &str,
    target: &str,
    mode: TargetMode,
) -> Result<ActivationRecord> {
    let idx = params.config.block_index(block_name)?;
    target.parse::<Target>()?;
    let ws = WindowSet::from_split(data, params.config.window, params.config.obs_dim)?;
    let s = target_matrix(data, &ws, target, mode)?;
    let h = latents(params, &ws.x, idx)?;
    Ok(ActivationRecord {
        block_name: block_name.to_string(),
        target_name: target.to_string(),
        mode,
        h,
        s,
        provenance: ws.provenance,
    })
}

/// Latents at stream position `idx` as an N × width matrix.
pub fn latents(params: &ModelParams, x: &DMatrix<f64>, idx: usize) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(x.ncols(), params.config.width);
    for start in (0..x.ncols()).step_by(CHUNK) {
        let n = CHUNK.min(x.ncols() - start);
        let hc = params.stream_at(&x.columns(start, n).into_owned(), idx)?;
        h.rows_mut(start, n).copy_from(&hc.transpose());
    }
    Ok(h)
}

/// Central finite-difference Jacobian of the decoder head at h = 0.
pub fn decoder_jacobian(params: &ModelParams) -> DMatrix<f64> {
    let step = 1e-6;
    let w = params.config.width;
    let mut j = DMatrix::zeros(params.config.obs_dim, w);
    for c in 0..w {
        let mut e = DMatrix::zeros(w, 1);
        e[c] = step;
        let plus = &params.head_w * &e;
        let minus = &params.head_w * (-e);
        j.set_column(c, &((plus - minus) / (2.0 * step)).column(0));
    }
    j
}

/// Analytic decoder Jacobian (the head weight itself).
pub fn decoder_jacobian_analytic(params: &ModelParams) -> DMatrix<f64> {
    params.head_w.clone()
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_params(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [c.window, c.width, c.n_blocks, c.obs_dim] {
        put_u64(w, v as u64)?;
    }
    put_u64(w, c.seed)?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.nrows() as u64)?;
        put_u64(w, t.ncols() as u64)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        window: get_u64(r)? as usize,
        width: get_u64(r)? as usize,
        n_blocks: get_u64(r)? as usize,
        obs_dim: get_u64(r)? as usize,
        seed: get_u64(r)?,
    };
    config.validate()?;
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = get_u64(r)? as usize;
        let cols = get_u64(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.insert(name, DMatrix::from_vec(rows, cols, data));
    }
    let (w, i) = (config.width, config.input_dim());
    let encoder_w = take_tensor(&mut tensors, "encoder.weight", (w, i))?;
    let encoder_b = take_tensor(&mut tensors, "encoder.bias", (w, 1))?;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for l in 0..config.n_blocks {
        blocks.push(Block {
            fc1_w: take_tensor(&mut tensors, &format!("blocks.{l}.fc1.weight"), (w, w))?,
            fc1_b: take_tensor(&mut tensors, &format!("blocks.{l}.fc1.bias"), (w, 1))?,
            fc2_w: take_tensor(&mut tensors, &format!("blocks.{l}.fc2.weight"), (w, w))?,
            fc2_b: take_tensor(&mut tensors, &format!("blocks.{l}.fc2.bias"), (w, 1))?,
        });
    }
    let head_w = take_tensor(&mut tensors, "head.weight", (config.obs_dim, w))?;
    let task_head = match tensors.get("task_head.weight").map(|t| t.nrows()) {
        Some(k) => Some(TaskHead { weight: take_tensor(&mut tensors, "task_head.weight", (k, w))?, bias: take_tensor(&mut tensors, "task_head.bias", (k, 1))? }),
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(ModelParams { config, encoder_w, encoder_b, blocks, head_w, task_head })
}

fn take_tensor(tensors: &mut BTreeMap<String, DMatrix<f64>>, name: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let t = tensors.remove(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    read_params(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
