use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Series, SystemKind, SystemSpec, Trajectory};
use crate::error::{Error, Result};

/// Physical quantities that can be derived from a full state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Force on the moving body (vector toward the origin for two-body).
    Force,
    ForceMagnitude,
    Speed,
    Radius,
    /// Star mass `m2` for two-body, body mass `m1` for the oscillator.
    Mass,
    /// `m1 * v`.
    Momentum,
    Energy,
    KineticEnergy,
    PotentialEnergy,
}

impl Target {
    pub const ALL: [Target; 9] = [
        Target::Force,
        Target::ForceMagnitude,
        Target::Speed,
        Target::Radius,
        Target::Mass,
        Target::Momentum,
        Target::Energy,
        Target::KineticEnergy,
        Target::PotentialEnergy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Force => "force",
            Target::ForceMagnitude => "force_magnitude",
            Target::Speed => "speed",
            Target::Radius => "radius",
            Target::Mass => "mass",
            Target::Momentum => "momentum",
            Target::Energy => "energy",
            Target::KineticEnergy => "kinetic_energy",
            Target::PotentialEnergy => "potential_energy",
        }
    }

    pub fn dim(self, kind: SystemKind) -> usize {
        match self {
            Target::Force | Target::Momentum => kind.obs_dim(),
            _ => 1,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnsupportedTarget(s.to_string()))
    }
}

/// Evaluates `target` at one phase-space state. `params` supplies the
/// physical constants (`G`, `m1`, `m2`, `k`).
pub fn evaluate_target(target: Target, spec: &SystemSpec, state: &[f64]) -> Vec<f64> {
    let (g, m1, m2, k) = (spec.g, spec.m1, spec.m2, spec.k);
    match spec.kind {
        SystemKind::TwoBody => {
            let (x, y, vx, vy) = (state[0], state[1], state[2], state[3]);
            let r2 = x * x + y * y;
            let r = r2.sqrt();
            match target {
                Target::Force => {
                    let c = -g * m1 * m2 / (r2 * r);
                    vec![c * x, c * y]
                }
                Target::ForceMagnitude => vec![g * m1 * m2 / r2],
                Target::Speed => vec![vx.hypot(vy)],
                Target::Radius => vec![r],
                Target::Mass => vec![m2],
                Target::Momentum => vec![m1 * vx, m1 * vy],
                Target::Energy => vec![0.5 * m1 * (vx * vx + vy * vy) - g * m1 * m2 / r],
                Target::KineticEnergy => vec![0.5 * m1 * (vx * vx + vy * vy)],
                Target::PotentialEnergy => vec![-g * m1 * m2 / r],
            }
        }
        SystemKind::Oscillator => {
            let (x, v) = (state[0], state[1]);
            match target {
                Target::Force => vec![-k * x],
                Target::ForceMagnitude => vec![(k * x).abs()],
                Target::Speed => vec![v.abs()],
                Target::Radius => vec![x.abs()],
                Target::Mass => vec![m1],
                Target::Momentum => vec![m1 * v],
                Target::Energy => vec![0.5 * (k * x * x + m1 * v * v)],
                Target::KineticEnergy => vec![0.5 * m1 * v * v],
                Target::PotentialEnergy => vec![0.5 * k * x * x],
            }
        }
    }
}

/// Populates the named target series from the full states.
pub fn compute_targets<S: AsRef<str>>(mut traj: Trajectory, names: &[S]) -> Result<Trajectory> {
    let parsed = names
        .iter()
        .map(|n| n.as_ref().parse::<Target>())
        .collect::<Result<Vec<_>>>()?;
    for t in parsed {
        let mut series = Series::with_capacity(t.dim(traj.spec.kind), traj.len());
        for s in traj.states.rows() {
            series.push(&evaluate_target(t, &traj.spec, s));
        }
        traj.targets.insert(t.name().to_string(), series);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate_two_body;

    #[test]
    fn inverse_square_substitution() {
        let spec = SystemSpec::two_body(1.0, 1.0, 1.0, 1e-3, 2);
        let f = evaluate_target(Target::ForceMagnitude, &spec, &[2.0, 0.0, 0.0, 0.5]);
        assert_eq!(f, vec![0.25]);
        let v = evaluate_target(Target::Force, &spec, &[2.0, 0.0, 0.0, 0.5]);
        assert!((v[0] + 0.25).abs() < 1e-15 && v[1] == 0.0);
    }

    #[test]
    fn doubling_star_mass_doubles_force() {
        let a = SystemSpec::two_body(1.0, 1.0, 1.0, 1e-3, 2);
        let b = SystemSpec::two_body(1.0, 1.0, 2.0, 1e-3, 2);
        let s = [0.7, -0.4, 0.1, 0.9];
        let fa = evaluate_target(Target::ForceMagnitude, &a, &s)[0];
        let fb = evaluate_target(Target::ForceMagnitude, &b, &s)[0];
        assert!((fb - 2.0 * fa).abs() < 1e-14);
    }

    #[test]
    fn speed_matches_central_differences_of_positions() {
        let dt = 1e-3;
        let spec = SystemSpec::two_body(1.0, 1.0, 1.0, dt, 400);
        let traj = simulate_two_body(&spec, [1.0, 0.0], [0.0, 1.15]).unwrap();
        let traj = compute_targets(traj, &["speed"]).unwrap();
        let speed = traj.target("speed").unwrap();
        for i in 1..traj.len() - 1 {
            let a = traj.observations.row(i - 1);
            let b = traj.observations.row(i + 1);
            let fd = (b[0] - a[0]).hypot(b[1] - a[1]) / (2.0 * dt);
            // central difference error is O(dt^2) times the jerk scale
            assert!((fd - speed.row(i)[0]).abs() < 5.0 * dt * dt, "step {i}");
        }
    }

    #[test]
    fn unknown_target_is_rejected() {
        let spec = SystemSpec::two_body(1.0, 1.0, 1.0, 1e-3, 3);
        let traj = simulate_two_body(&spec, [1.0, 0.0], [0.0, 1.0]).unwrap();
        let err = compute_targets(traj, &["entropy"]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedTarget(_)));
    }
}
