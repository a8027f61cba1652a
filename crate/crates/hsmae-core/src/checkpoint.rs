//! Checkpoint serialization: a single-line JSON manifest followed by the
//! raw little-endian parameter payload.
//!
//! The manifest pins everything needed to resume or audit a run — model
//! config, init/run seeds, step counter, normalization statistics, and a
//! name/shape/byte-offset entry per tensor — while the payload stays a
//! flat dump in canonical parameter order. Optimizer moments ride along
//! as `opt.m.<name>` / `opt.v.<name>` entries so a resumed run continues
//! the exact trajectory; evaluation-only checkpoints may omit them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datacube::BandStats;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{ModelConfig, ModelParams, ModelState};
use crate::training::OptState;
use crate::Scalar;

/// Magic tag in every checkpoint manifest.
pub const CHECKPOINT_FORMAT: &str = "SMAE1";

/// The two seeds that, together with the config and data, determine a
/// run: `init` drew the initial parameters, `run` drives batch order
/// and per-step masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub run: u64,
}

/// A model frozen at some training step, with optional optimizer
/// moments and the normalization statistics it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub seeds: Seeds,
    pub step: usize,
    pub state: ModelState<T>,
    pub opt: Option<OptState<T>>,
    pub stats: Option<BandStats<T>>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    seeds: Seeds,
    step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    stats: Option<StatsJson>,
    params: Vec<ParamEntry>,
}

/// Tensors in payload order: canonical model parameters, then first and
/// second optimizer moments under their prefixed names.
fn payload_tensors<'a, T: Scalar>(
    params: &'a ModelParams<T>,
    opt: &'a Option<OptState<T>>,
) -> Vec<(String, &'a Mat<T>)> {
    let mut out = params.visit();
    if let Some(opt) = opt {
        for (name, m) in opt.m.visit() {
            out.push((format!("opt.m.{name}"), m));
        }
        for (name, m) in opt.v.visit() {
            out.push((format!("opt.v.{name}"), m));
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(opt) = &ckpt.opt {
        if opt.step != ckpt.step {
            return Err(Error::Invalid(format!(
                "checkpoint step {} disagrees with optimizer step {}",
                ckpt.step, opt.step
            )));
        }
    }
    let tensors = payload_tensors(&ckpt.state.params, &ckpt.opt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in &tensors {
        let (rows, cols) = m.shape();
        entries.push(ParamEntry {
            name: name.clone(),
            shape: [rows, cols],
            offset,
        });
        offset += (m.len() * T::BYTE_WIDTH) as u64;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: T::DTYPE.into(),
        config: ckpt.state.config.clone(),
        seeds: ckpt.seeds,
        step: ckpt.step,
        stats: ckpt.stats.as_ref().map(|s| StatsJson {
            mean: s.mean.iter().map(|&v| v.to_f64()).collect(),
            stddev: s.stddev.iter().map(|&v| v.to_f64()).collect(),
        }),
        params: entries,
    };
    let header = serde_json::to_string(&manifest)
        .map_err(|e| Error::Invalid(format!("checkpoint manifest encoding failed: {e}")))?;

    let mut bytes = Vec::with_capacity(header.len() + 1 + offset as usize);
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    for (_, m) in &tensors {
        for &v in m.as_slice() {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Fills `dst` from the manifest entry named `name`, validating shape
/// and payload bounds.
fn read_tensor<T: Scalar>(
    path: &Path,
    payload: &[u8],
    entries: &[ParamEntry],
    name: &str,
    dst: &mut Mat<T>,
) -> Result<()> {
    let entry = entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
    let (rows, cols) = dst.shape();
    if entry.shape != [rows, cols] {
        return Err(Error::format(
            path,
            format!(
                "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                entry.shape[0], entry.shape[1]
            ),
        ));
    }
    let start = entry.offset as usize;
    let nbytes = dst.len() * T::BYTE_WIDTH;
    if start + nbytes > payload.len() {
        return Err(Error::format(path, "payload size mismatch"));
    }
    let out = dst.as_mut_slice();
    for (i, chunk) in payload[start..start + nbytes].chunks_exact(T::BYTE_WIDTH).enumerate() {
        out[i] = T::read_le(chunk);
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing manifest line"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!(
                "format tag {:?} is not {CHECKPOINT_FORMAT:?}",
                manifest.format
            ),
        ));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("dtype {} does not match requested {}", manifest.dtype, T::DTYPE),
        ));
    }
    manifest.config.validate()?;
    let payload = &bytes[nl + 1..];
    let expected: usize = manifest
        .params
        .iter()
        .map(|e| e.shape[0] * e.shape[1] * T::BYTE_WIDTH)
        .sum();
    if payload.len() != expected {
        return Err(Error::format(path, "payload size mismatch"));
    }

    let mut params = ModelParams::zeros(&manifest.config);
    let mut consumed = 0usize;
    for (name, m) in params.visit_mut() {
        read_tensor(path, payload, &manifest.params, &name, m)?;
        consumed += 1;
    }
    let has_opt = manifest.params.iter().any(|e| e.name.starts_with("opt."));
    let opt = if has_opt {
        let mut opt = OptState::new(&manifest.config);
        opt.step = manifest.step;
        for (name, m) in opt.m.visit_mut() {
            read_tensor(path, payload, &manifest.params, &format!("opt.m.{name}"), m)?;
            consumed += 1;
        }
        for (name, m) in opt.v.visit_mut() {
            read_tensor(path, payload, &manifest.params, &format!("opt.v.{name}"), m)?;
            consumed += 1;
        }
        Some(opt)
    } else {
        None
    };
    if consumed != manifest.params.len() {
        return Err(Error::format(
            path,
            format!(
                "manifest lists {} tensors but the model accounts for {consumed}",
                manifest.params.len()
            ),
        ));
    }
    let stats = manifest.stats.map(|s| BandStats {
        mean: s.mean.into_iter().map(T::cast).collect(),
        stddev: s.stddev.into_iter().map(T::cast).collect(),
    });
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
    }
    Ok(Checkpoint {
        seeds: manifest.seeds,
        step: manifest.step,
        state: ModelState {
            config: manifest.config,
            params,
        },
        opt,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use tempfile::tempdir;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            p: 2,
            s: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            enc_dim: 16,
            dec_dim: 12,
            enc_heads: 2,
            dec_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn full_checkpoint() -> Checkpoint<f64> {
        let cfg = test_cfg();
        let state = init_model(&cfg, 42).unwrap();
        let mut opt = OptState::new(&cfg);
        opt.step = 17;
        *opt.m.head.w.at_mut(0, 0) = 0.25;
        *opt.v.head.w.at_mut(0, 0) = 0.0625;
        Checkpoint {
            seeds: Seeds { init: 42, run: 7 },
            step: 17,
            state,
            opt: Some(opt),
            stats: Some(BandStats {
                mean: vec![0.1, 0.2, 0.3, 0.4],
                stddev: vec![1.0, 2.0, 3.0, 4.0],
            }),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        let ck = full_checkpoint();
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.seeds, ck.seeds);
        assert_eq!(back.step, 17);
        assert_eq!(back.state.config, ck.state.config);
        assert_eq!(back.state.params, ck.state.params);
        let (o1, o2) = (ck.opt.unwrap(), back.opt.unwrap());
        assert_eq!(o1.m, o2.m);
        assert_eq!(o1.v, o2.v);
        assert_eq!(o2.step, 17);
        assert_eq!(back.stats.unwrap(), ck.stats.unwrap());
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.smae");
        let p2 = dir.path().join("b.smae");
        let ck = full_checkpoint();
        save_checkpoint(&p1, &ck).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn evaluation_checkpoint_can_omit_optimizer_and_stats() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        let ck = Checkpoint {
            opt: None,
            stats: None,
            ..full_checkpoint()
        };
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert!(back.opt.is_none());
        assert!(back.stats.is_none());
        assert_eq!(back.state.params, ck.state.params);
    }

    #[test]
    fn dtype_is_strict() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        save_checkpoint(&path, &full_checkpoint()).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("f64le"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        save_checkpoint(&path, &full_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        save_checkpoint(&path, &full_checkpoint()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // corrupt the format tag in place: "SMAE1" -> "SMAE9"
        let pos = bytes.windows(5).position(|w| w == b"SMAE1").unwrap();
        bytes[pos + 4] = b'9';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("SMAE1"), "{err}");
    }

    #[test]
    fn step_mismatch_with_optimizer_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        let mut ck = full_checkpoint();
        ck.step = 3;
        assert!(save_checkpoint(&path, &ck).is_err());
    }

    #[test]
    fn manifest_is_one_json_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.smae");
        save_checkpoint(&path, &full_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(v["format"], "SMAE1");
        assert_eq!(v["dtype"], "f64le");
        assert_eq!(v["step"], 17);
    }
}
