//! Representation similarity, parameter drift, concept erasure, layer-wise
//! probe scans and 2-D projections.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{evaluate_target, DatasetSplit, Target};
use crate::error::{Error, Result};
use crate::probes::{self, FrozenLinearProbe, MlpHyper, MlpProbe, ProbeReport};
use crate::stats;
use crate::worldmodel::{self, ActivationRecord, ModelParams, WindowSet};

/// Concepts of the erasure analysis.
pub const ERASURE_CONCEPTS: [&str; 4] = ["speed", "radius", "mass", "force_magnitude"];

/// Fraction of neurons selected by weight change.
pub const ERASURE_FRACTION: f64 = 0.2;

fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Linear CKA between two activation matrices with one sample per row.
pub fn cka_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} rows vs {} rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("CKA needs at least two samples".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xx = (xc.transpose() * &xc).norm();
    let yy = (yc.transpose() * &yc).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::UndefinedSimilarity("an input has zero variance".into()));
    }
    let xy = (yc.transpose() * &xc).norm_squared();
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub name: String,
    /// ‖θ' − θ‖_F / ‖θ‖_F, or the absolute change when `relative` is false.
    pub delta: f64,
    pub change_norm: f64,
    pub reference_norm: f64,
    /// False when the reference norm is zero.
    pub relative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Per tensor, ordered by depth.
    pub tensors: Vec<Drift>,
    /// Per layer (`encoder`, `blocks.{l}`, `head`), aggregating its tensors.
    pub layers: Vec<Drift>,
    /// Tensors only present after adaptation (e.g. a task head).
    pub added: Vec<String>,
}

impl DriftReport {
    pub fn layer(&self, name: &str) -> Option<&Drift> {
        self.layers.iter().find(|d| d.name == name)
    }
}

fn drift(name: String, change_sq: f64, ref_sq: f64) -> Drift {
    let change_norm = change_sq.sqrt();
    let reference_norm = ref_sq.sqrt();
    let relative = reference_norm > 0.0;
    Drift { name, delta: if relative { change_norm / reference_norm } else { change_norm }, change_norm, reference_norm, relative }
}

fn layer_of(tensor: &str) -> String {
    match tensor.split('.').collect::<Vec<_>>().as_slice() {
        ["blocks", l, ..] => format!("blocks.{l}"),
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

/// Relative Frobenius change of every named tensor and layer.
pub fn param_drift(before: &ModelParams, after: &ModelParams) -> Result<DriftReport> {
    if before.config.window != after.config.window
        || before.config.width != after.config.width
        || before.config.n_blocks != after.config.n_blocks
        || before.config.obs_dim != after.config.obs_dim
    {
        return Err(Error::Architecture(format!("{:?} vs {:?}", before.config, after.config)));
    }
    let after_tensors: BTreeMap<String, &DMatrix<f64>> = after.tensors().into_iter().collect();
    let mut tensors = Vec::new();
    let mut layers: Vec<(String, f64, f64)> = Vec::new();
    for (name, b) in before.tensors() {
        let a = after_tensors
            .get(&name)
            .ok_or_else(|| Error::Architecture(format!("tensor {name} missing after adaptation")))?;
        if a.shape() != b.shape() {
            return Err(Error::Architecture(format!("tensor {name} changed shape")));
        }
        let change_sq = (*a - b).norm_squared();
        let ref_sq = b.norm_squared();
        let layer = layer_of(&name);
        match layers.last_mut() {
            Some((l, c, r)) if *l == layer => {
                *c += change_sq;
                *r += ref_sq;
            }
            _ => layers.push((layer, change_sq, ref_sq)),
        }
        tensors.push(drift(name, change_sq, ref_sq));
    }
    let before_names: Vec<String> = before.tensors().into_iter().map(|(n, _)| n).collect();
    let added = after_tensors.keys().filter(|n| !before_names.contains(n)).cloned().collect();
    Ok(DriftReport { tensors, layers: layers.into_iter().map(|(n, c, r)| drift(n, c, r)).collect(), added })
}

/// Evenly strided subset of at most `max` sample indices.
fn strided(n: usize, max: usize) -> Vec<usize> {
    if n <= max || max == 0 {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaEntry {
    pub block: String,
    pub cka: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub blocks: Vec<CkaEntry>,
    pub samples: usize,
}

/// CKA between the two models' latents on the same windows, at every block.
pub fn cka_per_block(before: &ModelParams, after: &ModelParams, data: &DatasetSplit, max_samples: usize) -> Result<CkaReport> {
    let ws = WindowSet::from_split(data, before.config.window, before.config.obs_dim)?;
    let cols = strided(ws.len(), max_samples);
    let x = ws.x.select_columns(&cols);
    let blocks = before
        .config
        .block_names()
        .into_iter()
        .enumerate()
        .map(|(idx, block)| {
            let hb = worldmodel::latents(before, &x, idx)?;
            let ha = worldmodel::latents(after, &x, idx)?;
            Ok(CkaEntry { block, cka: cka_linear(&hb, &ha)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaReport { blocks, samples: cols.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErasure {
    pub layer: String,
    /// Neurons ranked by weight change, largest first.
    pub selected: Vec<usize>,
    /// Smallest δ_j among the selected neurons.
    pub threshold: f64,
    pub before: BTreeMap<String, Option<f64>>,
    pub after: BTreeMap<String, Option<f64>>,
    /// Δρ_k = after − before; `None` when no selected neuron had variance.
    pub shift: BTreeMap<String, Option<f64>>,
    /// Selected neurons skipped for zero variance.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub layers: Vec<LayerErasure>,
    /// Mean shift over layers per concept.
    pub mean_shift: BTreeMap<String, Option<f64>>,
    pub samples: usize,
}

/// Indices of the `ceil(fraction·n)` largest values, largest first (stable).
pub fn top_fraction(values: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * values.len() as f64).ceil() as usize).min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    idx
}

/// Per-neuron change `‖w'_j − w_j‖` over the weight rows of an out × in matrix.
pub fn neuron_changes(before: &DMatrix<f64>, after: &DMatrix<f64>) -> Vec<f64> {
    (before - after).row_iter().map(|r| r.norm()).collect()
}

/// max over `neurons` of |corr(activation_j, concept)|, plus the neurons
/// skipped for zero variance.
pub fn max_abs_corr(acts: &DMatrix<f64>, neurons: &[usize], concept: &[f64]) -> (Option<f64>, Vec<usize>) {
    let mut best: Option<f64> = None;
    let mut skipped = Vec::new();
    for &j in neurons {
        let a: Vec<f64> = acts.column(j).iter().copied().collect();
        match stats::pearson(&a, concept) {
            Some(r) => best = Some(best.map_or(r.abs(), |b: f64| b.max(r.abs()))),
            None => skipped.push(j),
        }
    }
    (best, skipped)
}

/// Erasure shift for one layer given activations (samples × neurons) before
/// and after adaptation.
pub fn erasure_from_activations(
    layer: &str,
    before_acts: &DMatrix<f64>,
    after_acts: &DMatrix<f64>,
    selected: Vec<usize>,
    threshold: f64,
    concepts: &BTreeMap<String, Vec<f64>>,
) -> LayerErasure {
    let mut out = LayerErasure {
        layer: layer.to_string(),
        selected,
        threshold,
        before: BTreeMap::new(),
        after: BTreeMap::new(),
        shift: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (name, series) in concepts {
        let (b, sb) = max_abs_corr(before_acts, &out.selected, series);
        let (a, sa) = max_abs_corr(after_acts, &out.selected, series);
        for j in sb.into_iter().chain(sa) {
            if !out.skipped.contains(&j) {
                out.skipped.push(j);
            }
        }
        out.shift.insert(name.clone(), b.zip(a).map(|(b, a)| a - b));
        out.before.insert(name.clone(), b);
        out.after.insert(name.clone(), a);
    }
    out.skipped.sort_unstable();
    out
}

/// Concept value at the window's current step. `mass` is the star mass.
fn concept_series(data: &DatasetSplit, ws: &WindowSet, cols: &[usize], concept: &str) -> Result<Vec<f64>> {
    let target: Target = concept.parse()?;
    let by_id: BTreeMap<usize, &crate::dynamics::Trajectory> = data.trajectories.iter().map(|t| (t.id, t)).collect();
    Ok(cols
        .iter()
        .map(|&c| {
            let p = ws.provenance[c];
            let t = by_id[&p.trajectory];
            let v = evaluate_target(target, &t.spec, t.states.row(p.step));
            if v.len() == 1 { v[0] } else { v.iter().map(|x| x * x).sum::<f64>().sqrt() }
        })
        .collect())
}

/// Δρ_k for every block's projection layer (`fc2`). Neuron j is output unit
/// j of that layer; the top 20% by change of its weight row are analyzed.
pub fn erasure_shift(
    before: &ModelParams,
    after: &ModelParams,
    data: &DatasetSplit,
    concepts: &[&str],
    max_samples: usize,
) -> Result<ErasureReport> {
    param_drift(before, after)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty split".into()));
    }
    let ws = WindowSet::from_split(data, before.config.window, before.config.obs_dim)?;
    let cols = strided(ws.len(), max_samples);
    let x = ws.x.select_columns(&cols);
    let mut series = BTreeMap::new();
    for &c in concepts {
        series.insert(c.to_string(), concept_series(data, &ws, &cols, c)?);
    }
    let mut layers = Vec::new();
    for l in 0..before.config.n_blocks {
        let deltas = neuron_changes(&before.blocks[l].fc2_w, &after.blocks[l].fc2_w);
        let selected = top_fraction(&deltas, ERASURE_FRACTION);
        let threshold = selected.last().map_or(0.0, |&j| deltas[j]);
        let hb = before.projection_units(&x, l)?.transpose();
        let ha = after.projection_units(&x, l)?.transpose();
        layers.push(erasure_from_activations(&format!("blocks.{l}"), &hb, &ha, selected, threshold, &series));
    }
    let mut mean_shift = BTreeMap::new();
    for &c in concepts {
        let vals: Vec<f64> = layers.iter().filter_map(|l| l.shift[c]).collect();
        mean_shift.insert(c.to_string(), (!vals.is_empty()).then(|| stats::mean(&vals)));
    }
    Ok(ErasureReport { layers, mean_shift, samples: cols.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub rho_mean: f64,
    pub rho_std: f64,
    pub mape_mean: Option<f64>,
    pub mape_std: Option<f64>,
}

impl From<&ProbeReport> for ScanSummary {
    fn from(r: &ProbeReport) -> Self {
        Self { rho_mean: r.rho_mean, rho_std: r.rho_std, mape_mean: r.mape_mean, mape_std: r.mape_std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub block: String,
    pub linear: ScanSummary,
    pub mlp: Option<ScanSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScan {
    pub target: String,
    pub entries: Vec<ScanEntry>,
    /// Block with the highest mean OOD linear ρ.
    pub best_block: String,
}

/// Linear (and optionally MLP) probe fitted at one block on ID data and
/// evaluated on the OOD suite.
pub fn scan_block(
    params: &Arc<ModelParams>,
    data: &DatasetSplit,
    ood_suite: &[DatasetSplit],
    block: &str,
    target: &str,
    alpha: f64,
    mlp: Option<&MlpHyper>,
) -> Result<ScanEntry> {
    let rec = worldmodel::extract_activations(params, data, block, target)?;
    let lin = FrozenLinearProbe::from_record(params.clone(), &rec, alpha)?;
    let linear = ScanSummary::from(&probes::evaluate_predictor(&lin, ood_suite, target)?);
    let mlp = match mlp {
        Some(h) => {
            let p = MlpProbe::from_record(params.clone(), &rec, h)?;
            Some(ScanSummary::from(&probes::evaluate_predictor(&p, ood_suite, target)?))
        }
        None => None,
    };
    Ok(ScanEntry { block: block.to_string(), linear, mlp })
}

impl LayerScan {
    /// Picks the block with the highest mean OOD linear ρ (earliest on ties).
    pub fn from_entries(target: &str, entries: Vec<ScanEntry>) -> Self {
        let best_block = entries
            .iter()
            .fold(None::<&ScanEntry>, |best, e| match best {
                Some(b) if b.linear.rho_mean >= e.linear.rho_mean => Some(b),
                _ => Some(e),
            })
            .map(|e| e.block.clone())
            .unwrap_or_default();
        LayerScan { target: target.to_string(), entries, best_block }
    }
}

/// Runs [`scan_block`] at every block.
pub fn layer_probe_scan(
    params: &Arc<ModelParams>,
    data: &DatasetSplit,
    ood_suite: &[DatasetSplit],
    target: &str,
    alpha: f64,
    mlp: Option<&MlpHyper>,
) -> Result<LayerScan> {
    let entries = params
        .config
        .block_names()
        .iter()
        .map(|b| scan_block(params, data, ood_suite, b, target, alpha, mlp))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerScan::from_entries(target, entries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// N × 2.
    pub coords: DMatrix<f64>,
    /// Fractions of total variance along the two components.
    pub explained: [f64; 2],
    /// Set when the centred data has rank < 2; the second coordinate is zero.
    pub degenerate: bool,
}

/// Projects centred latents onto their top two principal directions.
pub fn project_2d(record: &ActivationRecord) -> Result<Projection> {
    pca_2d(&record.h)
}

pub fn pca_2d(h: &DMatrix<f64>) -> Result<Projection> {
    if h.nrows() < 3 {
        return Err(Error::InvalidInput("projection needs at least three samples".into()));
    }
    if h.ncols() == 0 {
        return Err(Error::InvalidInput("no features".into()));
    }
    let xc = center_columns(h);
    let cov = xc.transpose() * &xc / (h.nrows() - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lam = |i: usize| order.get(i).map_or(0.0, |&j| eig.eigenvalues[j].max(0.0));
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let degenerate = lam(1) <= tol;
    let mut coords = DMatrix::zeros(h.nrows(), 2);
    for (c, &j) in order.iter().take(2).enumerate() {
        if c == 1 && degenerate {
            break;
        }
        let v = eig.eigenvectors.column(j);
        coords.set_column(c, &(&xc * v));
    }
    let explained = if total > 0.0 { [lam(0) / total, if degenerate { 0.0 } else { lam(1) / total }] } else { [0.0, 0.0] };
    Ok(Projection { coords, explained, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_orthogonal(seed: u64, n: usize) -> DMatrix<f64> {
        random(seed, n, n).qr().q()
    }

    #[test]
    fn cka_self_and_invariances() {
        let x = random(1, 30, 4);
        assert!((cka_linear(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let q = random_orthogonal(2, 4);
        assert!((cka_linear(&(&x * &q), &x).unwrap() - 1.0).abs() < 1e-10);
        let y = random(3, 30, 6);
        let base = cka_linear(&x, &y).unwrap();
        assert!((cka_linear(&(&x * 3.5), &y).unwrap() - base).abs() < 1e-10);
        assert!((cka_linear(&y, &x).unwrap() - base).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn cka_fixed_matrices() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0]);
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, 0.0, 1.0, 1.0]);
        // centred X: rows (0,-0.5) (-1,0.5) (0,0.5) (1,-0.5)
        // centred Y: rows (-0.25,1) (-1.25,0) (1.75,-1) (-0.25,0)
        // YcᵀXc = [[1,0.5],[0,-1]] → ‖·‖² = 2.25
        // XcᵀXc = [[2,-1],[-1,1]] → ‖·‖ = sqrt(7)
        // YcᵀYc = [[4.75,-2],[-2,2]] → ‖·‖ = sqrt(34.5625)
        let want = 2.25 / (7f64.sqrt() * 34.5625f64.sqrt());
        assert!((cka_linear(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cka_zero_variance_is_an_error() {
        let x = DMatrix::from_element(5, 2, 1.0);
        assert!(matches!(cka_linear(&x, &random(1, 5, 2)), Err(Error::UndefinedSimilarity(_))));
    }

    fn model() -> ModelParams {
        init_model(&ModelConfig { window: 3, width: 8, n_blocks: 2, obs_dim: 2, seed: 4 }).unwrap()
    }

    #[test]
    fn drift_identities() {
        let p = model();
        let same = param_drift(&p, &p).unwrap();
        assert!(same.tensors.iter().all(|d| d.delta == 0.0));
        let mut doubled = p.clone();
        for (_, t) in doubled.tensors_mut() {
            *t *= 2.0;
        }
        let r = param_drift(&p, &doubled).unwrap();
        for d in r.tensors.iter().chain(&r.layers) {
            if d.relative {
                assert_eq!(d.delta, 1.0, "{}", d.name);
            }
        }
        // the zero head has no reference norm
        assert!(!r.layer("head").unwrap().relative);
    }

    #[test]
    fn drift_matches_constructed_perturbation() {
        let p = model();
        let mut q = p.clone();
        let e = random(9, 8, 8);
        q.blocks[1].fc1_w += &e;
        let r = param_drift(&p, &q).unwrap();
        let d = r.tensors.iter().find(|d| d.name == "blocks.1.fc1.weight").unwrap();
        assert!((d.delta - e.norm() / p.blocks[1].fc1_w.norm()).abs() < 1e-10);
        assert_eq!(r.layer("blocks.0").unwrap().delta, 0.0);
        let other = init_model(&ModelConfig { window: 3, width: 16, n_blocks: 2, obs_dim: 2, seed: 4 }).unwrap();
        assert!(param_drift(&p, &other).is_err());
    }

    #[test]
    fn top_fraction_is_ceil_and_stable() {
        let v = [0.5, 3.0, 3.0, 1.0, 0.0, 2.0, 0.1, 0.2, 0.3, 0.4, 0.6];
        assert_eq!(top_fraction(&v, 0.2), vec![1, 2, 5]);
        assert_eq!(top_fraction(&[1.0; 128], 0.2).len(), 26);
    }

    #[test]
    fn constructed_three_neuron_layer() {
        let speed: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin() + 2.0).collect();
        let radius: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let noise: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64).collect();
        let mut before = DMatrix::zeros(20, 3);
        for i in 0..20 {
            before[(i, 0)] = speed[i];
            before[(i, 1)] = noise[i];
            before[(i, 2)] = radius[i] + 0.1 * noise[i];
        }
        let mut after = before.clone();
        after.column_mut(0).fill(0.0);
        let concepts = BTreeMap::from([("speed".to_string(), speed.clone()), ("radius".to_string(), radius.clone())]);
        let e = erasure_from_activations("l", &before, &after, vec![0, 1, 2], 0.0, &concepts);
        assert!((e.before["speed"].unwrap() - 1.0).abs() < 1e-12);
        let col = |m: &DMatrix<f64>, j: usize| m.column(j).iter().copied().collect::<Vec<_>>();
        let oracle = stats::pearson(&col(&before, 1), &speed)
            .unwrap()
            .abs()
            .max(stats::pearson(&col(&before, 2), &speed).unwrap().abs());
        assert!((e.after["speed"].unwrap() - oracle).abs() < 1e-12);
        assert!((e.shift["speed"].unwrap() - (oracle - 1.0)).abs() < 1e-12);
        assert_eq!(e.shift["radius"], Some(0.0));
        assert_eq!(e.skipped, vec![0]);
    }

    #[test]
    fn pca_preserves_distances_of_planar_data() {
        let x = random(5, 12, 2);
        let p = pca_2d(&x).unwrap();
        let xc = center_columns(&x);
        for i in 0..12 {
            for j in 0..12 {
                let a = (xc.row(i) - xc.row(j)).norm();
                let b = (p.coords.row(i) - p.coords.row(j)).norm();
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!((p.explained[0] + p.explained[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_of_plane_in_3d() {
        let uv = random(6, 15, 2);
        let basis = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, -1.0, 3.0]);
        let x = &uv * basis;
        let p = pca_2d(&x).unwrap();
        assert!((p.explained[0] + p.explained[1] - 1.0).abs() < 1e-10);
        // reconstruction from two components
        let xc = center_columns(&x);
        let cov = xc.transpose() * &xc / 14.0;
        let eig = SymmetricEigen::new(cov.clone());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = vals.iter().sum();
        assert!((p.explained[0] - vals[0] / total).abs() < 1e-10);
        assert!((p.explained[1] - vals[1] / total).abs() < 1e-10);
        let proj_norm = p.coords.norm_squared();
        assert!((proj_norm - xc.norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn pca_flags_rank_one() {
        let t = random(7, 10, 1);
        let x = DMatrix::from_fn(10, 3, |i, j| t[i] * (j as f64 + 1.0));
        let p = pca_2d(&x).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.column(1).iter().all(|&v| v == 0.0));
        assert!(pca_2d(&random(1, 2, 3)).is_err());
    }
}
