//! Versioned binary checkpoints with a JSON sidecar.
//!
//! Binary layout (little-endian): magic `SAMGACKP`, `u32` version, `u64`
//! step, `u64` epoch, `u64` seed, `u32` block count, then per block a `u64`
//! length followed by parameters, first moments and second moments as
//! `f64`. The sidecar (`<path>.json`) records the architecture and the
//! block names and lengths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelDims, RouterConfig};
use crate::optim::OptimizerState;

const MAGIC: &[u8; 8] = b"SAMGACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub tau_init: f64,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        Model::new(self.dims.clone(), &self.model, &self.router, self.tau_init, seed)
    }
}

/// Model parameters plus optimizer state and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub epoch: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let model = spec.build(seed)?;
        let optimizer = OptimizerState::new(&model);
        Ok(ModelState {
            spec,
            model,
            optimizer,
            epoch: 0,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    spec: ModelSpec,
    shared_frozen: bool,
    step: u64,
    epoch: u64,
    seed: u64,
    blocks: Vec<BlockEntry>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let blocks = state.model.block_values();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&state.optimizer.step.to_le_bytes());
    bytes.extend_from_slice(&state.epoch.to_le_bytes());
    bytes.extend_from_slice(&state.seed.to_le_bytes());
    bytes.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (i, (_, values)) in blocks.iter().enumerate() {
        bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for arr in [values, &state.optimizer.m[i], &state.optimizer.v[i]] {
            for v in arr {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sidecar = Sidecar {
        version: CHECKPOINT_VERSION,
        spec: state.spec.clone(),
        shared_frozen: state.model.shared.frozen,
        step: state.optimizer.step,
        epoch: state.epoch,
        seed: state.seed,
        blocks: blocks
            .iter()
            .map(|(name, v)| BlockEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(
                self.path,
                format!("truncated: need {} bytes, file has {}", self.pos + n, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| ckpt_err(&side, e.to_string()))?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            &side,
            format!("version {} (expected {CHECKPOINT_VERSION})", sidecar.version),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let step = r.u64()?;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let n_blocks = r.u32()? as usize;

    let mut model = sidecar.spec.build(seed)?;
    model.shared.frozen = sidecar.shared_frozen;
    let mut optimizer = OptimizerState::new(&model);
    optimizer.step = step;
    {
        let blocks = model.blocks_mut();
        if blocks.len() != n_blocks || sidecar.blocks.len() != n_blocks {
            return Err(ckpt_err(
                path,
                format!("architecture has {} blocks, file has {n_blocks}", blocks.len()),
            ));
        }
        for (i, (block, entry)) in blocks.into_iter().zip(&sidecar.blocks).enumerate() {
            let len = r.u64()? as usize;
            if block.name != entry.name || block.data.len() != len || entry.len != len {
                return Err(ckpt_err(
                    path,
                    format!(
                        "shape mismatch for block `{}`: expected {}, file has `{}` with {len}",
                        block.name,
                        block.data.len(),
                        entry.name
                    ),
                ));
            }
            block.data.copy_from_slice(&r.f64s(len)?);
            optimizer.m[i] = r.f64s(len)?;
            optimizer.v[i] = r.f64s(len)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelState {
        spec: sidecar.spec,
        model,
        optimizer,
        epoch,
        seed,
    })
}

/// Loads a checkpoint and checks it was built for `dims`.
pub fn load_checkpoint_for(path: &Path, dims: &ModelDims) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    let have = &state.spec.dims;
    if have.layer_dims != dims.layer_dims {
        return Err(ckpt_err(
            path,
            format!(
                "shape mismatch: checkpoint has K = {} layers {:?}, dataset has K = {} layers {:?}",
                have.layer_dims.len(),
                have.layer_dims,
                dims.layer_dims.len(),
                dims.layer_dims
            ),
        ));
    }
    if have.signal_len != dims.signal_len || have.subjects != dims.subjects {
        return Err(ckpt_err(
            path,
            format!(
                "shape mismatch: checkpoint expects signal length {} and {} subjects, dataset has {} and {}",
                have.signal_len, have.subjects, dims.signal_len, dims.subjects
            ),
        ));
    }
    Ok(state)
}
