use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_targets, simulate_oscillator, simulate_two_body, SystemKind, SystemSpec, Target, Trajectory};
use crate::error::{Error, Result};
use crate::stats;

/// Closed interval `[lo, hi]`; `lo == hi` pins a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn disjoint(&self, other: &Interval) -> bool {
        self.hi < other.lo || other.hi < self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Parameter name to sampling interval.
///
/// Two-body parameters: `G`, `m1`, `m2`, `r0` (initial separation) and
/// `speed` (initial speed as a multiple of the circular speed at `r0`) and
/// `angle` (polar angle of the initial position, default the full circle).
/// Oscillator parameters: `k`, `m1`, `amplitude`.
pub type ParamRanges = BTreeMap<String, Interval>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    SslTrain,
    ProbeTrain,
    FtTask,
    OodTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub role: SplitRole,
    pub template: SystemSpec,
    pub generator_ranges: ParamRanges,
    pub trajectories: Vec<Trajectory>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Copies the split with extra target series computed on every trajectory.
    pub fn with_targets<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        self.trajectories = self
            .trajectories
            .into_iter()
            .map(|t| compute_targets(t, names))
            .collect::<Result<_>>()?;
        Ok(self)
    }
}

/// Everything needed to draw one split.
#[derive(Clone, Debug)]
pub struct SplitRequest<'a> {
    pub name: String,
    pub role: SplitRole,
    pub template: SystemSpec,
    pub ranges: ParamRanges,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Declared SSL training ranges; required for `probe_train` and `ood_test`.
    pub ssl_reference: Option<&'a ParamRanges>,
    pub targets: Vec<Target>,
}

fn param_names(kind: SystemKind) -> &'static [&'static str] {
    match kind {
        SystemKind::TwoBody => &["G", "m1", "m2", "r0", "speed", "angle"],
        SystemKind::Oscillator => &["k", "m1", "amplitude"],
    }
}

/// Fills every generator parameter, pinning unspecified ones at the template
/// value.
pub(crate) fn resolve_ranges(template: &SystemSpec, ranges: &ParamRanges) -> Result<ParamRanges> {
    let names = param_names(template.kind);
    for key in ranges.keys() {
        if !names.contains(&key.as_str()) {
            return Err(Error::InvalidSplit(format!("unknown generator parameter {key}")));
        }
    }
    let mut out = ParamRanges::new();
    for &name in names {
        let default = match name {
            "G" => template.g,
            "m1" => template.m1,
            "m2" => template.m2,
            "k" => template.k,
            _ => 1.0,
        };
        let fallback = if name == "angle" { Interval::new(0.0, TAU) } else { Interval::point(default) };
        let iv = ranges.get(name).copied().unwrap_or(fallback);
        if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
            return Err(Error::InvalidSplit(format!("empty or non-finite interval for {name}: {iv:?}")));
        }
        if name == "angle" {
            if iv.lo < 0.0 || iv.hi > TAU {
                return Err(Error::InvalidSplit(format!("angle interval {iv:?} must lie in [0, 2pi]")));
            }
        } else if iv.lo <= 0.0 {
            return Err(Error::InvalidSplit(format!("{name} must be positive, interval {iv:?}")));
        }
        if name == "r0" && iv.lo < template.r_min_guard {
            return Err(Error::InvalidSplit(format!(
                "r0 interval {iv:?} starts inside the guard radius {}",
                template.r_min_guard
            )));
        }
        out.insert(name.to_string(), iv);
    }
    Ok(out)
}

fn check_role(role: SplitRole, resolved: &ParamRanges, reference: Option<&ParamRanges>) -> Result<()> {
    match role {
        SplitRole::ProbeTrain => {
            let reference = reference.ok_or_else(|| {
                Error::InvalidSplit("probe_train split needs the declared ssl_train ranges".into())
            })?;
            for (name, iv) in resolved {
                let ok = reference.get(name).is_some_and(|r| r.contains(iv));
                if !ok {
                    return Err(Error::InvalidSplit(format!(
                        "probe_train range for {name} {iv:?} is not inside the ssl_train range"
                    )));
                }
            }
        }
        SplitRole::OodTest => {
            let reference = reference.ok_or_else(|| {
                Error::InvalidSplit("ood_test split needs the declared ssl_train ranges".into())
            })?;
            let shifted = resolved
                .iter()
                .any(|(name, iv)| reference.get(name).is_some_and(|r| r.disjoint(iv)));
            if !shifted {
                return Err(Error::InvalidSplit(
                    "ood_test split must have at least one parameter disjoint from ssl_train".into(),
                ));
            }
        }
        SplitRole::SslTrain | SplitRole::FtTask => {}
    }
    Ok(())
}

fn draw_trajectory(template: &SystemSpec, ranges: &ParamRanges, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let mut spec = template.clone();
    let mut meta = BTreeMap::new();
    let mut take = |name: &str, rng: &mut ChaCha8Rng| {
        let v = ranges[name].sample(rng);
        meta.insert(name.to_string(), v);
        v
    };
    match template.kind {
        SystemKind::TwoBody => {
            spec.g = take("G", rng);
            spec.m1 = take("m1", rng);
            spec.m2 = take("m2", rng);
            let r0 = take("r0", rng);
            let speed = take("speed", rng);
            let angle = take("angle", rng);
            let sense = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let v = speed * (spec.g * spec.m2 / r0).sqrt();
            let (s, c) = angle.sin_cos();
            let pos = [r0 * c, r0 * s];
            let vel = [-sense * v * s, sense * v * c];
            let mut traj = simulate_two_body(&spec, pos, vel)?;
            meta.insert("sense".into(), sense);
            traj.meta = meta;
            Ok(traj)
        }
        SystemKind::Oscillator => {
            spec.k = take("k", rng);
            spec.m1 = take("m1", rng);
            let amplitude = take("amplitude", rng);
            let phase = rng.random_range(0.0..TAU);
            let omega = (spec.k / spec.m1).sqrt();
            let mut traj = simulate_oscillator(&spec, amplitude * phase.cos(), -amplitude * omega * phase.sin())?;
            meta.insert("phase".into(), phase);
            traj.meta = meta;
            Ok(traj)
        }
    }
}

/// Draws a split of trajectories with parameters sampled uniformly from the
/// requested intervals.
///
/// Draws that fall inside the guard radius are rejected and redrawn, so the
/// result is still deterministic for a fixed seed.
pub fn sample_dataset(req: &SplitRequest<'_>) -> Result<DatasetSplit> {
    req.template.validate()?;
    let resolved = resolve_ranges(&req.template, &req.ranges)?;
    let reference = req
        .ssl_reference
        .map(|r| resolve_ranges(&req.template, r))
        .transpose()?;
    check_role(req.role, &resolved, reference.as_ref())?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut trajectories = Vec::with_capacity(req.n_trajectories);
    let max_attempts = 100 * req.n_trajectories + 100;
    let mut attempts = 0;
    let target_names: Vec<&str> = req.targets.iter().map(|t| t.name()).collect();
    while trajectories.len() < req.n_trajectories {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidSplit(format!(
                "could not draw {} untruncated trajectories in {max_attempts} attempts",
                req.n_trajectories
            )));
        }
        match draw_trajectory(&req.template, &resolved, &mut rng) {
            Ok(mut traj) => {
                traj.id = trajectories.len();
                trajectories.push(compute_targets(traj, &target_names)?);
            }
            Err(Error::TrajectoryTruncated { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(DatasetSplit {
        name: req.name.clone(),
        role: req.role,
        template: req.template.clone(),
        generator_ranges: resolved,
        trajectories,
    })
}

/// Histogram and moments of one variable across a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub variable: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

/// Histogram of a generator parameter (one value per trajectory) or a target
/// series (one value per step; vectors are reduced to their norm).
pub fn dataset_stats(split: &DatasetSplit, variable: &str, bins: usize) -> Result<Histogram> {
    if bins < 1 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let mut values = Vec::new();
    for traj in &split.trajectories {
        if let Some(v) = traj.param(variable) {
            values.push(v);
        } else if let Some(series) = traj.targets.get(variable) {
            if series.dim == 1 {
                values.extend_from_slice(&series.data);
            } else {
                values.extend(series.norms());
            }
        } else {
            return Err(Error::InvalidArgument(format!(
                "variable {variable} is neither a generator parameter nor a computed target"
            )));
        }
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else if max > min {
        (min, max)
    } else {
        (min - 0.5, max + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let idx = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram {
        variable: variable.to_string(),
        edges,
        counts,
        count: values.len(),
        mean: stats::mean(&values),
        variance: stats::variance(&values),
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> SystemSpec {
        SystemSpec::two_body(1.0, 1.0, 1.0, 1e-3, 40).with_substeps(20)
    }

    fn id_ranges() -> ParamRanges {
        ParamRanges::from([
            ("m2".to_string(), Interval::new(0.5, 2.0)),
            ("r0".to_string(), Interval::new(0.8, 1.6)),
            ("speed".to_string(), Interval::new(0.8, 1.2)),
        ])
    }

    fn request(role: SplitRole, ranges: ParamRanges, n: usize, reference: Option<&ParamRanges>) -> SplitRequest<'_> {
        SplitRequest {
            name: format!("{role:?}"),
            role,
            template: template(),
            ranges,
            n_trajectories: n,
            seed: 7,
            ssl_reference: reference,
            targets: vec![Target::ForceMagnitude],
        }
    }

    #[test]
    fn narrow_task_split_pins_star_mass() {
        let ranges = ParamRanges::from([("m2".to_string(), Interval::point(1.0))]);
        let split = sample_dataset(&request(SplitRole::FtTask, ranges, 12, None)).unwrap();
        assert!(split.trajectories.iter().all(|t| t.param("m2") == Some(1.0)));
        let h = dataset_stats(&split, "m2", 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.variance, 0.0);
    }

    #[test]
    fn empty_split_keeps_metadata() {
        let split = sample_dataset(&request(SplitRole::SslTrain, id_ranges(), 0, None)).unwrap();
        assert!(split.is_empty());
        assert_eq!(split.generator_ranges["m2"], Interval::new(0.5, 2.0));
        assert_eq!(split.role, SplitRole::SslTrain);
    }

    #[test]
    fn id_and_ood_supports_are_disjoint() {
        let id = id_ranges();
        let ssl = sample_dataset(&request(SplitRole::SslTrain, id.clone(), 60, None)).unwrap();
        let mut ood_ranges = id.clone();
        ood_ranges.insert("m2".into(), Interval::new(2.5, 4.0));
        let ood = sample_dataset(&request(SplitRole::OodTest, ood_ranges, 60, Some(&id))).unwrap();
        let scan = |s: &DatasetSplit| {
            s.trajectories
                .iter()
                .map(|t| t.param("m2").unwrap())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        };
        let (_, id_max) = scan(&ssl);
        let (ood_min, _) = scan(&ood);
        assert!(id_max < ood_min, "{id_max} vs {ood_min}");
    }

    #[test]
    fn role_invariants_are_enforced() {
        let id = id_ranges();
        let mut wide = id.clone();
        wide.insert("m2".into(), Interval::new(0.5, 3.0));
        let err = sample_dataset(&request(SplitRole::ProbeTrain, wide, 3, Some(&id))).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)));
        let err = sample_dataset(&request(SplitRole::ProbeTrain, id.clone(), 3, None)).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)));
        let err = sample_dataset(&request(SplitRole::OodTest, id.clone(), 3, Some(&id))).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)));
        assert!(sample_dataset(&request(SplitRole::ProbeTrain, id.clone(), 3, Some(&id))).is_ok());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_dataset(&request(SplitRole::SslTrain, id_ranges(), 5, None)).unwrap();
        let b = sample_dataset(&request(SplitRole::SslTrain, id_ranges(), 5, None)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_star_mass_mean_is_near_midpoint() {
        let split = sample_dataset(&request(SplitRole::SslTrain, id_ranges(), 400, None)).unwrap();
        let h = dataset_stats(&split, "m2", 8).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 400);
        // uniform on [a, b]: variance (b - a)^2 / 12
        let se = (1.5f64.powi(2) / 12.0 / 400.0).sqrt();
        assert!((h.mean - 1.25).abs() < 3.0 * se, "mean {} se {se}", h.mean);
    }

    #[test]
    fn stats_rejects_zero_bins_and_unknown_variables() {
        let split = sample_dataset(&request(SplitRole::SslTrain, id_ranges(), 2, None)).unwrap();
        assert!(dataset_stats(&split, "m2", 0).is_err());
        assert!(dataset_stats(&split, "temperature", 4).is_err());
        let h = dataset_stats(&split, "force_magnitude", 4).unwrap();
        assert_eq!(h.count, 2 * 40);
    }
}
