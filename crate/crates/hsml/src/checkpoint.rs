//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 manifest length, the JSON manifest, then the raw
//! little-endian f64 payload of every tensor in manifest order. Tensor bits
//! are written exactly, names are kept sorted, and JSON floats use
//! round-trip-exact formatting, so save -> load -> save reproduces the file
//! byte for byte.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{AdamState, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{ExpansionMonitor, Mode, TrainState};
use crate::{aggregator, cluster, gate, learner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"HSMLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct MonitorState {
    window: u64,
    threshold: f64,
    window_sum: f64,
    window_count: u64,
    prev_avg: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    iteration: u64,
    level_sizes: Vec<usize>,
    task_rng: [u64; 4],
    expand_rng: [u64; 4],
    monitor: MonitorState,
    adam_t: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// Serializes state (parameters, optimizer slots, rng streams, progress,
/// cluster structure) plus the run config snapshot.
pub fn save(path: &Path, config: &RunConfig, state: &TrainState) -> Result<()> {
    let mut combined: BTreeMap<String, &Tensor> = BTreeMap::new();
    for (name, t) in state.params.iter() {
        combined.insert(format!("param.{name}"), t);
    }
    for (name, t) in &state.adam.m {
        combined.insert(format!("adam.m.{name}"), t);
    }
    for (name, t) in &state.adam.v {
        combined.insert(format!("adam.v.{name}"), t);
    }

    let mut tensors = Vec::with_capacity(combined.len());
    let mut offset = 0u64;
    for (name, t) in &combined {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64;
    }

    let manifest = Manifest {
        config: config.clone(),
        iteration: state.iteration,
        level_sizes: state.structure.level_sizes.clone(),
        task_rng: state.task_rng.state(),
        expand_rng: state.expand_rng.state(),
        monitor: MonitorState {
            window: state.monitor.window,
            threshold: state.monitor.threshold,
            window_sum: state.monitor.window_sum,
            window_count: state.monitor.window_count,
            prev_avg: state.monitor.prev_avg,
        },
        adam_t: state.adam.t.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(manifest_bytes.len() + 8 * offset as usize + 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in combined.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Restores a checkpoint, rejecting unknown format versions and validating
/// the tensor set against the architecture implied by the stored config and
/// cluster structure.
pub fn load(path: &Path) -> Result<(RunConfig, TrainState)> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + mlen {
        return Err(fail("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[20..20 + mlen])?;
    let payload = &bytes[20 + mlen..];

    let mut params = ParamStore::new();
    let mut adam = AdamState {
        t: manifest.adam_t.clone(),
        ..AdamState::default()
    };
    for entry in &manifest.tensors {
        let start = entry.offset as usize * 8;
        let end = start + entry.len as usize * 8;
        if end > payload.len() {
            return Err(fail(format!("tensor '{}' exceeds the payload", entry.name)));
        }
        if entry.shape.iter().product::<usize>() != entry.len as usize {
            return Err(fail(format!(
                "tensor '{}' shape {:?} does not match {} values",
                entry.name, entry.shape, entry.len
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data);
        if let Some(name) = entry.name.strip_prefix("param.") {
            params.insert(name, t);
        } else if let Some(name) = entry.name.strip_prefix("adam.m.") {
            adam.m.insert(name.to_string(), t);
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            adam.v.insert(name.to_string(), t);
        } else {
            return Err(fail(format!("unrecognized tensor entry '{}'", entry.name)));
        }
    }

    let config = manifest.config;
    config.validate()?;
    let tcfg = config.trainer_config();
    let structure = cluster::Structure {
        level_sizes: manifest.level_sizes.clone(),
    };
    validate_architecture(&tcfg, &structure, &params)
        .map_err(|e| fail(format!("architecture mismatch: {e}")))?;

    let state = TrainState {
        cfg: tcfg,
        structure,
        params,
        adam,
        monitor: ExpansionMonitor {
            window: manifest.monitor.window,
            threshold: manifest.monitor.threshold,
            window_sum: manifest.monitor.window_sum,
            window_count: manifest.monitor.window_count,
            prev_avg: manifest.monitor.prev_avg,
        },
        iteration: manifest.iteration,
        task_rng: Rng::from_state(manifest.task_rng),
        expand_rng: Rng::from_state(manifest.expand_rng),
    };
    Ok((config, state))
}

/// Checks the loaded tensors against the names and shapes the config and
/// structure imply.
fn validate_architecture(
    cfg: &crate::trainer::TrainerConfig,
    structure: &cluster::Structure,
    params: &ParamStore,
) -> Result<()> {
    let mut rng = Rng::new(0);
    let mut expected = ParamStore::new();
    expected.insert(
        crate::trainer::THETA0,
        learner::init_theta(&cfg.arch, &mut rng),
    );
    if cfg.mode == Mode::Hsml {
        aggregator::init_params(&mut expected, &cfg.aggregator, &mut rng);
        cluster::init_params(&mut expected, &cfg.cluster, structure, &mut rng);
        gate::init_params(
            &mut expected,
            cfg.aggregator.repr_dim,
            cfg.arch.param_len(),
            &mut rng,
        );
    }
    // Same names, same shapes.
    for (name, want) in expected.iter() {
        let got = params.get(name)?;
        if got.shape() != want.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                got.shape(),
                want.shape()
            )));
        }
    }
    for (name, _) in params.iter() {
        expected.get(name)?;
    }
    Ok(())
}
