//! Content-addressed artifact store. Every entry is written to a temporary
//! file and renamed into place, with a SHA-256 sidecar checked on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use phyprobe_core::dynamics::io::{read_trajectory, write_trajectory};
use phyprobe_core::dynamics::DatasetSplit;
use phyprobe_core::worldmodel::{read_params, write_params, ModelParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CODE_VERSION;
use crate::error::HarnessError;

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HarnessError::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key over the code version and any number of labelled parts.
pub fn key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct Cache {
    root: PathBuf,
    enabled: bool,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), enabled: true }
    }

    /// A cache that never hits and never writes.
    pub fn disabled() -> Self {
        Self { root: PathBuf::new(), enabled: false }
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(format!("{key}.bin"))
    }

    /// Stored bytes, or `None` on a miss or a checksum mismatch (the bad
    /// entry is removed).
    pub fn get(&self, stage: &str, key: &str) -> Option<Vec<u8>> {
        if !self.enabled {
            return None;
        }
        let path = self.path(stage, key);
        let sidecar = path.with_extension("sha256");
        let bytes = fs::read(&path).ok()?;
        let want = fs::read_to_string(&sidecar).ok()?;
        if sha256_hex(&bytes) != want.trim() {
            log::warn!("discarding corrupt cache entry {}", path.display());
            let _ = fs::remove_file(&path);
            let _ = fs::remove_file(&sidecar);
            return None;
        }
        Some(bytes)
    }

    pub fn put(&self, stage: &str, key: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        if !self.enabled {
            return Ok(());
        }
        let path = self.path(stage, key);
        // data first: an entry without its sidecar is a miss
        write_atomic(&path, bytes)?;
        write_atomic(&path.with_extension("sha256"), sha256_hex(bytes).as_bytes())
    }

    pub fn contains(&self, stage: &str, key: &str) -> bool {
        self.get(stage, key).is_some()
    }
}

pub fn encode_json<T: Serialize>(value: &T) -> Result<Vec<u8>, HarnessError> {
    Ok(serde_json::to_vec(value)?)
}

pub fn decode_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, HarnessError> {
    Ok(serde_json::from_slice(bytes)?)
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    name: String,
    role: phyprobe_core::dynamics::SplitRole,
    template: phyprobe_core::dynamics::SystemSpec,
    generator_ranges: phyprobe_core::dynamics::ParamRanges,
    trajectories: usize,
}

/// Splits as one blob: per split a length-prefixed JSON header followed by
/// its trajectories in the binary trajectory format.
pub fn encode_splits(splits: &[DatasetSplit]) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(splits.len() as u64).to_le_bytes());
    for s in splits {
        let header = serde_json::to_vec(&SplitHeader {
            name: s.name.clone(),
            role: s.role,
            template: s.template.clone(),
            generator_ranges: s.generator_ranges.clone(),
            trajectories: s.trajectories.len(),
        })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &s.trajectories {
            write_trajectory(&mut out, t)?;
        }
    }
    Ok(out)
}

pub fn decode_splits(bytes: &[u8]) -> Result<Vec<DatasetSplit>, HarnessError> {
    let mut r = bytes;
    let u64_at = |r: &mut &[u8]| -> Result<u64, HarnessError> {
        if r.len() < 8 {
            return Err(HarnessError::Cache("truncated split blob".into()));
        }
        let (a, b) = r.split_at(8);
        *r = b;
        Ok(u64::from_le_bytes(a.try_into().expect("8 bytes")))
    };
    let n = u64_at(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u64_at(&mut r)? as usize;
        if r.len() < len {
            return Err(HarnessError::Cache("truncated split header".into()));
        }
        let header: SplitHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let trajectories = (0..header.trajectories).map(|_| read_trajectory(&mut r)).collect::<Result<Vec<_>, _>>()?;
        out.push(DatasetSplit {
            name: header.name,
            role: header.role,
            template: header.template,
            generator_ranges: header.generator_ranges,
            trajectories,
        });
    }
    Ok(out)
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::new();
    write_params(&mut out, params)?;
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams, HarnessError> {
    let mut r = bytes;
    Ok(read_params(&mut r)?)
}

/// Several checkpoints, each a length-prefixed parameter blob.
pub fn encode_params_list(list: &[(String, ModelParams)]) -> Result<Vec<u8>, HarnessError> {
    let names: Vec<&String> = list.iter().map(|(n, _)| n).collect();
    let header = serde_json::to_vec(&names)?;
    let mut out = Vec::new();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in list {
        let blob = encode_params(p)?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn decode_params_list(bytes: &[u8]) -> Result<Vec<(String, ModelParams)>, HarnessError> {
    let take = |r: &mut &[u8], n: usize| -> Result<Vec<u8>, HarnessError> {
        if r.len() < n {
            return Err(HarnessError::Cache("truncated checkpoint list".into()));
        }
        let (a, b) = r.split_at(n);
        *r = b;
        Ok(a.to_vec())
    };
    let mut r = bytes;
    let len = u64::from_le_bytes(take(&mut r, 8)?.try_into().expect("8 bytes")) as usize;
    let names: Vec<String> = serde_json::from_slice(&take(&mut r, len)?)?;
    names
        .into_iter()
        .map(|name| {
            let n = u64::from_le_bytes(take(&mut r, 8)?.try_into().expect("8 bytes")) as usize;
            Ok((name, decode_params(&take(&mut r, n)?)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use phyprobe_core::dynamics::{sample_dataset, Interval, ParamRanges, SplitRequest, SplitRole, SystemSpec, Target};
    use phyprobe_core::worldmodel::{init_model, ModelConfig};

    #[test]
    fn put_get_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        assert!(cache.get("s", "k").is_none());
        cache.put("s", "k", b"hello").unwrap();
        assert_eq!(cache.get("s", "k").unwrap(), b"hello");
        fs::write(dir.path().join("s/k.bin"), b"hellp").unwrap();
        assert!(cache.get("s", "k").is_none());
        assert!(!dir.path().join("s/k.bin").exists());
        assert!(Cache::disabled().get("s", "k").is_none());
    }

    #[test]
    fn keys_depend_on_every_part() {
        assert_ne!(key(&["a", "bc"]), key(&["ab", "c"]));
        assert_eq!(key(&["x"]), key(&["x"]));
    }

    #[test]
    fn split_and_params_blobs_round_trip() {
        let spec = SystemSpec::two_body(1.0, 1.0, 1.0, 0.01, 12);
        let ranges = ParamRanges::from([("m2".to_string(), Interval::new(0.5, 2.0))]);
        let split = sample_dataset(&SplitRequest {
            name: "ssl".into(),
            role: SplitRole::SslTrain,
            template: spec,
            ranges,
            n_trajectories: 3,
            seed: 1,
            ssl_reference: None,
            targets: vec![Target::ForceMagnitude],
        })
        .unwrap();
        let back = decode_splits(&encode_splits(&[split.clone(), split.clone()]).unwrap()).unwrap();
        assert_eq!(back, vec![split.clone(), split]);
        let p = init_model(&ModelConfig { window: 3, width: 8, n_blocks: 2, obs_dim: 2, seed: 1 }).unwrap();
        let list = vec![("a".to_string(), p.clone()), ("b".to_string(), p)];
        assert_eq!(decode_params_list(&encode_params_list(&list).unwrap()).unwrap(), list);
    }

    #[test]
    fn atomic_write_into_missing_dir_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"x").unwrap();
        // a path below a regular file cannot be created
        assert!(write_atomic(&file.join("sub/out.json"), b"{}").is_err());
        assert_eq!(fs::read(&file).unwrap(), b"x");
    }
}
