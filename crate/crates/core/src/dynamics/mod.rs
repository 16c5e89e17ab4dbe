//! Ground-truth physical systems.
//!
//! Two systems are provided: a reduced two-body problem (planet orbiting a
//! star pinned at the origin) and a one-dimensional harmonic oscillator. Both
//! are integrated with velocity Verlet at a fixed step, so energy stays bounded
//! and time reversal holds to round-off.
//!
//! Observations expose positions only; full `(position, velocity)` states are
//! kept alongside for computing target quantities.

mod dataset;
pub mod io;
mod targets;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    dataset_stats, sample_dataset, DatasetSplit, Histogram, Interval, ParamRanges, SplitRequest,
    SplitRole,
};
pub use targets::{compute_targets, evaluate_target, Target};

/// Default minimum separation for the two-body problem.
pub const DEFAULT_R_MIN_GUARD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    TwoBody,
    Oscillator,
}

impl SystemKind {
    pub fn obs_dim(self) -> usize {
        match self {
            SystemKind::TwoBody => 2,
            SystemKind::Oscillator => 1,
        }
    }

    pub fn state_dim(self) -> usize {
        2 * self.obs_dim()
    }
}

/// Generative parameters of one simulation.
///
/// `dt` is the integrator step. Observations are recorded every `substeps`
/// integrator steps, so the observation interval is `dt * substeps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    #[serde(rename = "G")]
    pub g: f64,
    pub m1: f64,
    pub m2: f64,
    pub k: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_guard")]
    pub r_min_guard: f64,
}

fn default_substeps() -> usize {
    1
}

fn default_guard() -> f64 {
    DEFAULT_R_MIN_GUARD
}

impl SystemSpec {
    pub fn two_body(g: f64, m1: f64, m2: f64, dt: f64, steps: usize) -> Self {
        SystemSpec {
            kind: SystemKind::TwoBody,
            g,
            m1,
            m2,
            k: 1.0,
            dt,
            steps,
            substeps: 1,
            r_min_guard: DEFAULT_R_MIN_GUARD,
        }
    }

    pub fn oscillator(k: f64, m1: f64, dt: f64, steps: usize) -> Self {
        SystemSpec {
            kind: SystemKind::Oscillator,
            g: 1.0,
            m1,
            m2: 1.0,
            k,
            dt,
            steps,
            substeps: 1,
            r_min_guard: DEFAULT_R_MIN_GUARD,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("G", self.g),
            ("m1", self.m1),
            ("m2", self.m2),
            ("k", self.k),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.steps < 2 {
            return Err(Error::InvalidSpec(format!("steps must be >= 2, got {}", self.steps)));
        }
        if self.substeps < 1 {
            return Err(Error::InvalidSpec("substeps must be >= 1".into()));
        }
        if self.kind == SystemKind::TwoBody && !(self.r_min_guard.is_finite() && self.r_min_guard > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "r_min_guard must be > 0, got {}",
                self.r_min_guard
            )));
        }
        Ok(())
    }

    /// Time between consecutive observations.
    pub fn obs_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn obs_dim(&self) -> usize {
        self.kind.obs_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }
}

/// Row-major table of equally sized real vectors, one per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Series {
    pub fn new(dim: usize) -> Self {
        Series { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Series {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Euclidean norm of each row.
    pub fn norms(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
    }
}

/// A simulated run: positions observed at every step, the full phase-space
/// state, and any derived target series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub spec: SystemSpec,
    /// Generative parameters that produced this run (`m2`, `G`, `speed`, ...).
    pub meta: BTreeMap<String, f64>,
    pub observations: Series,
    pub states: Series,
    pub targets: BTreeMap<String, Series>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Builds a trajectory from explicit phase-space states, deriving the
    /// observations. No integration happens.
    pub fn from_states(spec: SystemSpec, states: &[Vec<f64>]) -> Result<Self> {
        let sd = spec.state_dim();
        let od = spec.obs_dim();
        let mut obs = Series::with_capacity(od, states.len());
        let mut st = Series::with_capacity(sd, states.len());
        for s in states {
            if s.len() != sd {
                return Err(Error::Shape(format!("state of length {} for state dim {sd}", s.len())));
            }
            obs.push(&s[..od]);
            st.push(s);
        }
        Ok(Trajectory {
            id: 0,
            spec,
            meta: BTreeMap::new(),
            observations: obs,
            states: st,
            targets: BTreeMap::new(),
        })
    }

    pub fn target(&self, name: &str) -> Result<&Series> {
        self.targets
            .get(name)
            .ok_or_else(|| Error::UnsupportedTarget(format!("{name} not computed on trajectory {}", self.id)))
    }

    /// Generative parameter, falling back to the spec for the physical
    /// constants.
    pub fn param(&self, name: &str) -> Option<f64> {
        if let Some(v) = self.meta.get(name) {
            return Some(*v);
        }
        match name {
            "G" => Some(self.spec.g),
            "m1" => Some(self.spec.m1),
            "m2" => Some(self.spec.m2),
            "k" => Some(self.spec.k),
            _ => None,
        }
    }
}

fn two_body_accel(pos: [f64; 2], gm: f64) -> [f64; 2] {
    let r2 = pos[0] * pos[0] + pos[1] * pos[1];
    let inv_r3 = 1.0 / (r2 * r2.sqrt());
    [-gm * pos[0] * inv_r3, -gm * pos[1] * inv_r3]
}

/// One velocity-Verlet step of the central-force problem. `dt` may be
/// negative for backward integration.
#[inline]
pub fn verlet_step_two_body(state: &mut [f64; 4], gm: f64, dt: f64) {
    let a = two_body_accel([state[0], state[1]], gm);
    let vx = state[2] + 0.5 * dt * a[0];
    let vy = state[3] + 0.5 * dt * a[1];
    state[0] += dt * vx;
    state[1] += dt * vy;
    let a1 = two_body_accel([state[0], state[1]], gm);
    state[2] = vx + 0.5 * dt * a1[0];
    state[3] = vy + 0.5 * dt * a1[1];
}

/// One velocity-Verlet step of `x'' = -omega2 * x`.
#[inline]
pub fn verlet_step_oscillator(state: &mut [f64; 2], omega2: f64, dt: f64) {
    let v_half = state[1] - 0.5 * dt * omega2 * state[0];
    state[0] += dt * v_half;
    state[1] = v_half - 0.5 * dt * omega2 * state[0];
}

/// Integrates the two-body problem for `n` steps without any guard.
pub fn propagate_two_body(mut state: [f64; 4], gm: f64, dt: f64, n: usize) -> [f64; 4] {
    for _ in 0..n {
        verlet_step_two_body(&mut state, gm, dt);
    }
    state
}

pub fn propagate_oscillator(mut state: [f64; 2], omega2: f64, dt: f64, n: usize) -> [f64; 2] {
    for _ in 0..n {
        verlet_step_oscillator(&mut state, omega2, dt);
    }
    state
}

/// Simulates a planet around a star fixed at the origin.
///
/// The run stops with [`Error::TrajectoryTruncated`] as soon as the planet
/// comes closer than `spec.r_min_guard`.
pub fn simulate_two_body(spec: &SystemSpec, init_position: [f64; 2], init_velocity: [f64; 2]) -> Result<Trajectory> {
    spec.validate()?;
    if spec.kind != SystemKind::TwoBody {
        return Err(Error::InvalidSpec("simulate_two_body needs a two_body spec".into()));
    }
    let r0 = init_position[0].hypot(init_position[1]);
    if r0 < spec.r_min_guard {
        return Err(Error::TrajectoryTruncated {
            step: 0,
            separation: r0,
            guard: spec.r_min_guard,
        });
    }
    let gm = spec.g * spec.m2;
    let mut state = [init_position[0], init_position[1], init_velocity[0], init_velocity[1]];
    let mut obs = Series::with_capacity(2, spec.steps);
    let mut states = Series::with_capacity(4, spec.steps);
    obs.push(&state[..2]);
    states.push(&state);
    let mut step = 0;
    for _ in 1..spec.steps {
        for _ in 0..spec.substeps {
            verlet_step_two_body(&mut state, gm, spec.dt);
            step += 1;
            let r = state[0].hypot(state[1]);
            if r < spec.r_min_guard || !r.is_finite() {
                return Err(Error::TrajectoryTruncated {
                    step,
                    separation: r,
                    guard: spec.r_min_guard,
                });
            }
        }
        obs.push(&state[..2]);
        states.push(&state);
    }
    Ok(Trajectory {
        id: 0,
        spec: spec.clone(),
        meta: BTreeMap::new(),
        observations: obs,
        states,
        targets: BTreeMap::new(),
    })
}

/// Simulates `m1 x'' = -k x`.
pub fn simulate_oscillator(spec: &SystemSpec, init_position: f64, init_velocity: f64) -> Result<Trajectory> {
    spec.validate()?;
    if spec.kind != SystemKind::Oscillator {
        return Err(Error::InvalidSpec("simulate_oscillator needs an oscillator spec".into()));
    }
    let omega2 = spec.k / spec.m1;
    let mut state = [init_position, init_velocity];
    let mut obs = Series::with_capacity(1, spec.steps);
    let mut states = Series::with_capacity(2, spec.steps);
    obs.push(&state[..1]);
    states.push(&state);
    for _ in 1..spec.steps {
        for _ in 0..spec.substeps {
            verlet_step_oscillator(&mut state, omega2, spec.dt);
        }
        obs.push(&state[..1]);
        states.push(&state);
    }
    Ok(Trajectory {
        id: 0,
        spec: spec.clone(),
        meta: BTreeMap::new(),
        observations: obs,
        states,
        targets: BTreeMap::new(),
    })
}
