//! Checkpoint directories: `params.bin` (little-endian f64 values of every
//! tensor, concatenated), an optional `optimizer.bin` with RAdam moments in
//! the same layout, `vocab.tsv`, and a `manifest.json` describing the rest.

use std::fs;
use std::path::Path;

use fnftg_tensor::{OptimizerState, ParamStore, RAdamConfig, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{io_err, CoreError, Result};
use crate::model::{Model, ModelSpec};
use crate::text::Vocab;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin` (and `optimizer.bin`, per moment block).
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub endianness: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub model: ModelSpec,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    pub optimizer: Option<OptimizerMeta>,
    pub rng: Option<ChaCha8Rng>,
}

/// Training state saved next to the parameters.
#[derive(Debug, Clone, Default)]
pub struct TrainingState<'a> {
    pub config: Option<&'a TrainConfig>,
    pub epoch: usize,
    pub optimizer: Option<&'a OptimizerState>,
    pub rng: Option<&'a ChaCha8Rng>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
}

fn to_bytes(blocks: impl Iterator<Item = impl AsRef<[f64]>>) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blocks {
        for v in b.as_ref() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_block(bytes: &[u8], offset: usize, len: usize, file: &str) -> Result<Vec<f64>> {
    let end = offset + len * 8;
    let slice = bytes
        .get(offset..end)
        .ok_or_else(|| CoreError::Checkpoint(format!("{file} is truncated (need bytes {offset}..{end})")))?;
    Ok(slice.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

pub fn save(dir: &Path, model: &Model, state: &TrainingState<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel() * 8;
    }
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, to_bytes(model.params.iter().map(|(_, _, t)| t.data()))).map_err(io_err(&params_path))?;

    let optimizer = state.optimizer.map(|opt| OptimizerMeta {
        step: opt.step,
        base_lr: opt.base_lr,
        total_steps: opt.total_steps,
        beta1: opt.config.beta1,
        beta2: opt.config.beta2,
        eps: opt.config.eps,
    });
    if let Some(opt) = state.optimizer {
        let path = dir.join(OPTIMIZER_FILE);
        let blocks = opt.first_moment.iter().chain(&opt.second_moment);
        fs::write(&path, to_bytes(blocks)).map_err(io_err(&path))?;
    }

    let vocab_path = dir.join(VOCAB_FILE);
    fs::write(&vocab_path, model.vocab.to_tsv()).map_err(io_err(&vocab_path))?;

    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        dtype: "f64".into(),
        tensors,
        model: model.spec,
        config: state.config.cloned(),
        epoch: state.epoch,
        optimizer,
        rng: state.rng.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION || m.endianness != "little" || m.dtype != "f64" {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint format {} ({}, {})",
            m.format_version, m.endianness, m.dtype
        )));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(io_err(&params_path))?;
    let mut params = ParamStore::new();
    let mut total = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), read_block(&bytes, e.offset, n, PARAMS_FILE)?)?)?;
        total += n;
    }
    if bytes.len() != total * 8 {
        return Err(CoreError::Checkpoint(format!("{PARAMS_FILE} has {} bytes, expected {}", bytes.len(), total * 8)));
    }

    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
    let vocab = Vocab::from_tsv(&vocab_text).map_err(|e| CoreError::Checkpoint(format!("{VOCAB_FILE}: {e}")))?;

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(meta) => {
            let path = dir.join(OPTIMIZER_FILE);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let config = RAdamConfig { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps };
            let mut state = OptimizerState::new(&params, config, meta.base_lr, meta.total_steps);
            state.step = meta.step;
            let second_base = total * 8;
            for (i, e) in manifest.tensors.iter().enumerate() {
                let n: usize = e.shape.iter().product();
                state.first_moment[i] = read_block(&bytes, e.offset, n, OPTIMIZER_FILE)?;
                state.second_moment[i] = read_block(&bytes, second_base + e.offset, n, OPTIMIZER_FILE)?;
            }
            Some(state)
        }
    };

    let model = Model::from_params(manifest.model, vocab, params)?;
    Ok(Checkpoint { model, config: manifest.config, epoch: manifest.epoch, optimizer, rng: manifest.rng })
}
