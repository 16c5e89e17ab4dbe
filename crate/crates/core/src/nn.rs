//! Small dense-network building blocks with hand-written backward passes.
//!
//! Matrices hold one sample per column throughout.

use std::ops::AddAssign;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Column-wise layer norm without affine parameters. Returns the normalised
/// matrix and the per-column inverse standard deviation.
pub fn layer_norm(h: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = h.nrows() as f64;
    let mut u = h.clone();
    let mut inv = Vec::with_capacity(h.ncols());
    for mut col in u.column_iter_mut() {
        let mu = col.sum() / n;
        col.add_scalar_mut(-mu);
        let var = col.norm_squared() / n;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        col *= s;
        inv.push(s);
    }
    (u, inv)
}

/// Backward through [`layer_norm`] given its outputs `u`.
pub fn layer_norm_backward(u: &DMatrix<f64>, inv_std: &[f64], du: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows() as f64;
    let mut dh = du.clone();
    for (j, mut col) in dh.column_iter_mut().enumerate() {
        let uc = u.column(j);
        let mean_du = col.sum() / n;
        let mean_duu = col.dot(&uc) / n;
        for i in 0..col.len() {
            col[i] = inv_std[j] * (col[i] - mean_du - uc[i] * mean_duu);
        }
    }
    dh
}

/// Adds a column vector (n × 1) to every column.
pub fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

/// Sum over columns, as an n × 1 matrix.
pub fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        out.column_mut(0).add_assign(&col);
    }
    out
}


/// Uniform init in ±1/sqrt(fan_in).
pub fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. `decay[i]` selects which tensors get weight decay; `lr`
    /// overrides the configured rate (for schedules).
    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>], decay: &[bool], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let wd = if decay[i] { lr * c.weight_decay } else { 0.0 };
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= wd * p[k] + lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Half-cosine decay from `lr` to zero across `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let p = (step as f64 / total as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `(weight, bias)` per layer; weights are `out × in`, biases `out × 1`.
    pub layers: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl Mlp {
    /// `sizes` lists every layer width from input to output.
    pub fn new<R: Rng>(rng: &mut R, sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| (uniform_init(rng, w[1], w[0], w[0]), uniform_init(rng, w[1], 1, w[0])))
            .collect();
        Self { layers }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|(w, _)| w.nrows()).collect()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            a = w * a;
            add_bias(&mut a, b);
            if i + 1 < self.layers.len() {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        a
    }

    /// Mean squared error (summed over outputs, averaged over columns) and
    /// per-layer `(weight, bias)` gradients.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, Vec<(DMatrix<f64>, DMatrix<f64>)>) {
        let n = x.ncols() as f64;
        let last = self.layers.len() - 1;
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut a = w * acts.last().expect("input");
            add_bias(&mut a, b);
            pre.push(a.clone());
            if i < last {
                a.apply(|v| *v = v.max(0.0));
            }
            acts.push(a);
        }
        let diff = acts.pop().expect("output") - target;
        let loss = diff.norm_squared() / n;
        let mut d = diff * (2.0 / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d.zip_apply(&pre[i], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            grads.push((&d * acts[i].transpose(), row_sums(&d)));
            if i > 0 {
                d = self.layers[i].0.transpose() * d;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().flat_map(|(w, b)| [w.shape(), b.shape()]).collect()
    }

    pub fn apply_step(&mut self, opt: &mut AdamW, grads: &[(DMatrix<f64>, DMatrix<f64>)], lr: f64) {
        let mut params: Vec<&mut DMatrix<f64>> = self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        let g: Vec<&DMatrix<f64>> = grads.iter().flat_map(|(w, b)| [w, b]).collect();
        let decay: Vec<bool> = (0..g.len()).map(|i| i % 2 == 0).collect();
        opt.step(&mut params, &g, &decay, lr);
    }
}
