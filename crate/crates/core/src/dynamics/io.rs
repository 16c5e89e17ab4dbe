//! Trajectory files and split manifests.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic  b"PHYT"            4 bytes
//! version u16               currently 1
//! system_kind u8            0 = two_body, 1 = oscillator
//! dt f64, steps u64, substeps u64
//! G, m1, m2, k, r_min_guard f64
//! id u64
//! meta count u32, then (name_len u16, name, value f64)*
//! field count u32, then (name_len u16, name, dim u32)*
//! steps records, each the concatenation of every field's dim values (f64)
//! ```
//!
//! Fields are `obs`, `state`, then target series in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ParamRanges, Series, SplitRole, SystemKind, SystemSpec, Trajectory};
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"PHYT";
pub const TRAJECTORY_VERSION: u16 = 1;

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get::<8>(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get::<8>(r)?))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(get::<2>(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn fields(traj: &Trajectory) -> Vec<(&str, &Series)> {
    let mut out = vec![("obs", &traj.observations), ("state", &traj.states)];
    out.extend(traj.targets.iter().map(|(k, v)| (k.as_str(), v)));
    out
}

pub fn write_trajectory(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    let spec = &traj.spec;
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
    w.write_all(&[match spec.kind {
        SystemKind::TwoBody => 0u8,
        SystemKind::Oscillator => 1u8,
    }])?;
    w.write_all(&spec.dt.to_le_bytes())?;
    w.write_all(&(spec.steps as u64).to_le_bytes())?;
    w.write_all(&(spec.substeps as u64).to_le_bytes())?;
    for v in [spec.g, spec.m1, spec.m2, spec.k, spec.r_min_guard] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(traj.id as u64).to_le_bytes())?;
    w.write_all(&(traj.meta.len() as u32).to_le_bytes())?;
    for (k, v) in &traj.meta {
        put_str(w, k)?;
        w.write_all(&v.to_le_bytes())?;
    }
    let fields = fields(traj);
    w.write_all(&(fields.len() as u32).to_le_bytes())?;
    for (name, series) in &fields {
        if series.len() != traj.len() {
            return Err(Error::Format(format!("field {name} has {} rows, expected {}", series.len(), traj.len())));
        }
        put_str(w, name)?;
        w.write_all(&(series.dim as u32).to_le_bytes())?;
    }
    for step in 0..traj.len() {
        for (_, series) in &fields {
            for v in series.row(step) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_trajectory(r: &mut impl Read) -> Result<Trajectory> {
    if &get::<4>(r)? != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a trajectory file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(get::<2>(r)?);
    if version != TRAJECTORY_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let kind = match get::<1>(r)?[0] {
        0 => SystemKind::TwoBody,
        1 => SystemKind::Oscillator,
        k => return Err(Error::Format(format!("unknown system kind {k}"))),
    };
    let dt = get_f64(r)?;
    let steps = get_u64(r)? as usize;
    let substeps = get_u64(r)? as usize;
    let mut consts = [0.0; 5];
    for c in &mut consts {
        *c = get_f64(r)?;
    }
    let spec = SystemSpec {
        kind,
        g: consts[0],
        m1: consts[1],
        m2: consts[2],
        k: consts[3],
        dt,
        steps,
        substeps,
        r_min_guard: consts[4],
    };
    let id = get_u64(r)? as usize;
    let n_meta = u32::from_le_bytes(get::<4>(r)?);
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = get_str(r)?;
        meta.insert(k, get_f64(r)?);
    }
    let n_fields = u32::from_le_bytes(get::<4>(r)?);
    let mut layout = Vec::new();
    for _ in 0..n_fields {
        let name = get_str(r)?;
        let dim = u32::from_le_bytes(get::<4>(r)?) as usize;
        layout.push((name, Series::with_capacity(dim, steps)));
    }
    for _ in 0..steps {
        for (_, series) in layout.iter_mut() {
            for _ in 0..series.dim {
                series.data.push(get_f64(r)?);
            }
        }
    }
    let mut observations = None;
    let mut states = None;
    let mut targets = BTreeMap::new();
    for (name, series) in layout {
        match name.as_str() {
            "obs" => observations = Some(series),
            "state" => states = Some(series),
            _ => {
                targets.insert(name, series);
            }
        }
    }
    Ok(Trajectory {
        id,
        spec,
        meta,
        observations: observations.ok_or_else(|| Error::Format("missing obs field".into()))?,
        states: states.ok_or_else(|| Error::Format("missing state field".into()))?,
        targets,
    })
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory(&mut BufReader::new(File::open(path)?))
}

/// CSV export with one row per step: `step,obs_0,..,state_0,..,<target>_0,..`.
pub fn write_trajectory_csv(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    let fields = fields(traj);
    let mut header = vec!["step".to_string()];
    for (name, series) in &fields {
        header.extend((0..series.dim).map(|i| format!("{name}_{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for step in 0..traj.len() {
        let mut row = vec![step.to_string()];
        for (_, series) in &fields {
            row.extend(series.row(step).iter().map(|v| format!("{v:e}")));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// JSON manifest describing a split stored as one binary file per trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub name: String,
    pub role: SplitRole,
    pub template: SystemSpec,
    pub generator_ranges: ParamRanges,
    pub trajectories: Vec<String>,
}

/// Writes `dir/<name>.json` plus `dir/<name>/traj_NNNNN.bin`; returns the
/// manifest path.
pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<PathBuf> {
    let sub = dir.join(&split.name);
    std::fs::create_dir_all(&sub)?;
    let mut files = Vec::with_capacity(split.len());
    for (i, traj) in split.trajectories.iter().enumerate() {
        let file = format!("traj_{i:05}.bin");
        save_trajectory(&sub.join(&file), traj)?;
        files.push(format!("{}/{file}", split.name));
    }
    let manifest = SplitManifest {
        version: 1,
        name: split.name.clone(),
        role: split.role,
        template: split.template.clone(),
        generator_ranges: split.generator_ranges.clone(),
        trajectories: files,
    };
    let path = dir.join(format!("{}.json", split.name));
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_split(manifest_path: &Path) -> Result<DatasetSplit> {
    let manifest: SplitManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let trajectories = manifest
        .trajectories
        .iter()
        .map(|f| load_trajectory(&base.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        name: manifest.name,
        role: manifest.role,
        template: manifest.template,
        generator_ranges: manifest.generator_ranges,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{compute_targets, simulate_two_body, Interval};
    use proptest::prelude::*;

    fn sample(vy: f64, steps: usize) -> Trajectory {
        let spec = SystemSpec::two_body(1.0, 1.0, 1.3, 1e-3, steps).with_substeps(3);
        let mut t = simulate_two_body(&spec, [1.0, 0.0], [0.0, vy]).unwrap();
        t.meta.insert("speed".into(), vy);
        compute_targets(t, &["force", "speed"]).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn binary_round_trip(vy in 0.8f64..1.3, steps in 2usize..40) {
            let t = sample(vy, steps);
            let mut buf = Vec::new();
            write_trajectory(&mut buf, &t).unwrap();
            let back = read_trajectory(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = sample(1.0, 5);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_trajectory(&mut bad.as_slice()).is_err());
        buf.truncate(buf.len() - 3);
        assert!(read_trajectory(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let t = sample(1.0, 6);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "step,obs_0,obs_1,state_0,state_1,state_2,state_3,force_0,force_1,speed_0");
    }

    #[test]
    fn split_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = DatasetSplit {
            name: "probe".into(),
            role: SplitRole::ProbeTrain,
            template: SystemSpec::two_body(1.0, 1.0, 1.0, 1e-3, 4),
            generator_ranges: ParamRanges::from([("m2".to_string(), Interval::new(0.5, 2.0))]),
            trajectories: vec![sample(1.0, 4), sample(1.1, 4)],
        };
        let path = save_split(dir.path(), &split).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
    }
}
