//! Experiment configuration with full defaulting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use phyprobe_core::dynamics::{Interval, ParamRanges, SystemSpec, Target};
use phyprobe_core::probes::{FtHyper, MlpHyper};
use phyprobe_core::symreg::GpConfig;
use phyprobe_core::worldmodel::{ModelConfig, TrainHyper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

/// Bumped whenever cached artifacts change meaning.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+cache1");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Probe,
    Finetune,
    Analyze,
    Symreg,
    Bound,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::GenData, Stage::Train, Stage::Probe, Stage::Finetune, Stage::Analyze, Stage::Symreg, Stage::Bound];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Finetune => "finetune",
            Stage::Analyze => "analyze",
            Stage::Symreg => "symreg",
            Stage::Bound => "bound",
        }
    }

    /// Direct prerequisites.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenData | Stage::Bound => &[],
            Stage::Train => &[Stage::GenData],
            Stage::Probe | Stage::Finetune => &[Stage::Train],
            Stage::Analyze => &[Stage::Probe, Stage::Finetune],
            Stage::Symreg => &[Stage::Probe],
        }
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown stage {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSystem {
    #[serde(rename = "G")]
    pub g: f64,
    pub m1: f64,
    /// Observation interval.
    pub obs_dt: f64,
    /// Integrator steps per observation.
    pub substeps: usize,
    /// Observations per trajectory.
    pub steps: usize,
    pub r_min_guard: f64,
}

impl Default for OrbitSystem {
    fn default() -> Self {
        Self { g: 1.0, m1: 1.0, obs_dt: 0.1, substeps: 20, steps: 40, r_min_guard: 0.3 }
    }
}

impl OrbitSystem {
    pub fn spec(&self) -> SystemSpec {
        let mut s = SystemSpec::two_body(self.g, self.m1, 1.0, self.obs_dt / self.substeps as f64, self.steps)
            .with_substeps(self.substeps);
        s.r_min_guard = self.r_min_guard;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub sets: usize,
    pub trajectories_per_set: usize,
    /// Lower edge of the first star-mass interval.
    pub m2_start: f64,
    pub m2_width: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self { sets: 50, trajectories_per_set: 20, m2_start: 2.2, m2_width: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub ssl_trajectories: usize,
    pub probe_trajectories: usize,
    pub ssl_ranges: ParamRanges,
    pub ood: OodConfig,
    pub ft_trajectories: usize,
    pub ft_ranges: ParamRanges,
}

fn ranges(items: &[(&str, f64, f64)]) -> ParamRanges {
    items.iter().map(|&(k, lo, hi)| (k.to_string(), Interval::new(lo, hi))).collect()
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ssl_trajectories: 2000,
            probe_trajectories: 3000,
            ssl_ranges: ranges(&[("m2", 0.5, 2.0), ("r0", 0.8, 1.6), ("speed", 0.8, 1.2)]),
            ood: OodConfig::default(),
            ft_trajectories: 8,
            ft_ranges: ranges(&[("m2", 1.0, 1.0), ("r0", 0.95, 1.05), ("speed", 0.98, 1.02), ("angle", 0.0, 0.3)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub target: String,
    pub alpha: f64,
    /// Block for the baseline comparison; the scan's best block when unset.
    pub block: Option<String>,
    /// Also fit MLP probes at every block of the scan.
    pub scan_mlp: bool,
    /// Time-dependent probe pull toward the pooled probe; selected on
    /// held-out probe trajectories when unset.
    pub td_shrink: Option<f64>,
    pub mlp: MlpHyper,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { target: "force_magnitude".into(), alpha: 1.0, block: None, scan_mlp: true, td_shrink: None, mlp: MlpHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub cka_samples: usize,
    pub erasure_samples: usize,
    pub concepts: Vec<String>,
    /// Windows projected to 2-D from the first OOD sets.
    pub projection_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cka_samples: 2000,
            erasure_samples: 2000,
            concepts: phyprobe_core::mechanics::ERASURE_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            projection_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymregConfig {
    pub gp: GpConfig,
    /// Probe predictions used as regression targets.
    pub samples: usize,
    pub inputs: Vec<String>,
    pub slope_range: (f64, f64),
    /// Values of the other inputs when measuring the r-exponent.
    pub slope_fixed: BTreeMap<String, f64>,
}

impl Default for SymregConfig {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            samples: 500,
            inputs: vec!["r".into(), "m1".into(), "m2".into()],
            slope_range: (0.5, 2.0),
            slope_fixed: BTreeMap::from([("m1".to_string(), 1.0), ("m2".to_string(), 1.0), ("G".to_string(), 1.0)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub k: f64,
    pub m1: f64,
    pub amplitude: (f64, f64),
    pub substeps: usize,
    pub steps: usize,
    /// Observation intervals of the sweep. Each gets its own SSL model
    /// trained on data observed at that interval.
    pub dt_values: Vec<f64>,
    pub ssl_trajectories: usize,
    pub probe_trajectories: usize,
    pub test_trajectories: usize,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub targets: Vec<String>,
    pub block: String,
    pub alpha: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            m1: 1.0,
            amplitude: (0.5, 1.5),
            substeps: 20,
            steps: 40,
            dt_values: vec![0.05, 0.1, 0.2],
            ssl_trajectories: 100,
            probe_trajectories: 200,
            test_trajectories: 100,
            model: ModelConfig { window: 8, width: 64, n_blocks: 4, obs_dim: 1, seed: 0 },
            train: TrainHyper {
                lr: 3e-4,
                epochs: 20,
                cosine: true,
                checkpoint_epochs: vec![1, 2, 3, 5, 8, 12, 20],
                ..TrainHyper::default()
            },
            targets: vec!["momentum".into(), "kinetic_energy".into()],
            block: "final".into(),
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    /// Stages to run; dependencies are added automatically.
    pub stages: Vec<Stage>,
    pub system: OrbitSystem,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub probe: ProbeConfig,
    pub finetune: FtHyper,
    pub analysis: AnalysisConfig,
    pub symreg: SymregConfig,
    pub bound: BoundConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "orbital".into(),
            seed: 0,
            deterministic: true,
            out_dir: PathBuf::from("runs/default"),
            stages: Stage::ALL.to_vec(),
            system: OrbitSystem::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainHyper { epochs: 10, cosine: true, ..TrainHyper::default() },
            probe: ProbeConfig::default(),
            finetune: FtHyper { train: TrainHyper { epochs: 100, ..TrainHyper::default() }, ..FtHyper::default() },
            analysis: AnalysisConfig::default(),
            symreg: SymregConfig::default(),
            bound: BoundConfig::default(),
        }
    }
}

/// Deterministic sub-seed for a named consumer of randomness.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{tag}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Hex SHA-256 of any serializable value's JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the configuration with the output directory cleared, so the
    /// same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        hash_json(&self.portable())
    }

    /// A copy without the output directory.
    pub fn portable(&self) -> Self {
        Self { out_dir: PathBuf::new(), ..self.clone() }
    }

    /// Requested stages plus everything they depend on, in execution order.
    pub fn closure(&self) -> Vec<Stage> {
        let mut set: Vec<Stage> = Vec::new();
        fn add(s: Stage, set: &mut Vec<Stage>) {
            for &d in s.deps() {
                add(d, set);
            }
            if !set.contains(&s) {
                set.push(s);
            }
        }
        for &s in &self.stages {
            add(s, &mut set);
        }
        set.sort();
        set
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.system.spec().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.system.steps <= self.model.window + 1 {
            return bad(format!("steps {} too short for window {}", self.system.steps, self.model.window));
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.obs_dim != 2 {
            return bad("orbital model needs obs_dim = 2".into());
        }
        self.bound.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.bound.model.obs_dim != 1 {
            return bad("oscillator model needs obs_dim = 1".into());
        }
        for t in std::iter::once(&self.probe.target).chain(&self.analysis.concepts).chain(&self.bound.targets) {
            Target::from_str(t).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Target::from_str(&self.finetune.target).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(b) = &self.probe.block {
            if !self.model.block_names().contains(b) {
                return bad(format!("unknown block {b}"));
            }
        }
        if !self.bound.model.block_names().contains(&self.bound.block) {
            return bad(format!("unknown bound block {}", self.bound.block));
        }
        for v in &self.symreg.inputs {
            if !["r", "m1", "m2", "G"].contains(&v.as_str()) {
                return bad(format!("unknown symbolic-regression input {v}"));
            }
        }
        if self.data.ood.sets == 0 && self.stages.iter().any(|s| matches!(s, Stage::Probe | Stage::Finetune)) {
            return bad("probing needs at least one OOD set".into());
        }
        if self.bound.dt_values.is_empty() || self.bound.dt_values.iter().any(|&d| !(d > 0.0)) {
            return bad("bound Δt values must be positive".into());
        }
        for (name, a) in [("probe.alpha", self.probe.alpha), ("bound.alpha", self.bound.alpha)] {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {a}"));
            }
        }
        if self.probe.td_shrink.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return bad("probe.td_shrink must be a finite value >= 0".into());
        }
        if self.bound.train.checkpoint_epochs.iter().any(|&e| e > self.bound.train.epochs) {
            return bad("bound checkpoint epoch beyond training length".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_the_default() {
        let cfg = ExperimentConfig::from_json("{\n  \"seed\": 0,\n  \"out_dir\": \"runs/default\"\n}\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.data.ood.sets, 50);
    }

    #[test]
    fn json_round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unresolved_names_are_rejected() {
        for text in [
            r#"{"probe": {"target": "torque"}}"#,
            r#"{"probe": {"block": "blocks.40"}}"#,
            r#"{"stages": ["explode"]}"#,
            r#"{"symreg": {"inputs": ["q"]}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn stage_closure_adds_dependencies() {
        let cfg = ExperimentConfig { stages: vec![Stage::Symreg], ..ExperimentConfig::default() };
        assert_eq!(cfg.closure(), vec![Stage::GenData, Stage::Train, Stage::Probe, Stage::Symreg]);
        let empty = ExperimentConfig { stages: vec![], ..ExperimentConfig::default() };
        assert!(empty.closure().is_empty());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(0, "ssl"), derive_seed(0, "probe"));
        assert_eq!(derive_seed(3, "ssl"), derive_seed(3, "ssl"));
    }
}
