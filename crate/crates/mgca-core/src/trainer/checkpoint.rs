//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "MGCA" | u32 version | u32 len + config JSON |
//!   per parameter:        u32 name len | name | u8 rank | u32 dims.. | f64 data..
//!   per parameter, twice: the same record shape for the Adam m then v buffers
//! u64 step | u32 len + sampler-counter JSON
//! ```
//!
//! Record counts are not stored; they follow from the model config inside
//! the JSON blob. Loading rebuilds the model skeleton from that config and
//! demands an exact name/shape match, so a resumed run is bit-identical to
//! an uninterrupted one.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::Dictionary;
use crate::model::{Model, ModelConfig};
use crate::objectives::LossConfig;
use crate::sampler::{BatchSampler, MonoCorpus, ParallelCorpus, SamplerConfig, SamplerCounters};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

use super::{AdamState, Clock, TrainConfig, TrainError, Trainer};

pub const MAGIC: &[u8; 4] = b"MGCA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    BadVersion { found: u32 },
    #[error("corrupt config blob: {0}")]
    BadConfig(String),
    #[error("parameter record {index} is {found:?}, expected {expected:?}")]
    NameMismatch { index: usize, expected: String, found: String },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    sampler: SamplerConfig,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|e| CheckpointError::Truncated(format!("{what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
    let name_len = read_u32(r, "record name length")? as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact_or(r, &mut name_bytes, "record name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|e| CheckpointError::Truncated(format!("record name utf8: {e}")))?;
    let mut rank = [0u8; 1];
    read_exact_or(r, &mut rank, "record rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r, "record dim")? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0f64; numel];
    for v in data.iter_mut() {
        let mut b = [0u8; 8];
        read_exact_or(r, &mut b, "tensor data")?;
        *v = f64::from_le_bytes(b);
    }
    Ok((name, shape, data))
}

/// Exact on-disk size of a checkpoint for the given trainer, computable
/// without writing: header, config blob, parameter and moment records, the
/// step counter, and the counter blob.
pub fn predicted_size(trainer: &Trainer) -> usize {
    let blob = config_blob_bytes(trainer);
    let counters = counter_bytes(trainer);
    let record = |name: &str, rank: usize, numel: usize| 4 + name.len() + 1 + 4 * rank + 8 * numel;
    let params: usize = trainer
        .model
        .named_params()
        .iter()
        .map(|(name, t)| {
            record(name, t.rank(), t.numel())
                + record(&format!("m:{name}"), t.rank(), t.numel())
                + record(&format!("v:{name}"), t.rank(), t.numel())
        })
        .sum();
    4 + 4 + 4 + blob.len() + params + 8 + 4 + counters.len()
}

fn config_blob_bytes(trainer: &Trainer) -> Vec<u8> {
    let blob = ConfigBlob {
        model: trainer.model.config.clone(),
        train: trainer.train_config.clone(),
        loss: trainer.loss_config.clone(),
        sampler: trainer.sampler.config().clone(),
    };
    serde_json::to_vec(&blob).expect("config serialize")
}

#[derive(Serialize, Deserialize)]
struct TrailerState {
    counters: SamplerCounters,
    adam_t: u64,
}

fn counter_bytes(trainer: &Trainer) -> Vec<u8> {
    let state = TrailerState { counters: trainer.sampler.counters(), adam_t: trainer.opt.t };
    serde_json::to_vec(&state).expect("counter serialize")
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let blob = config_blob_bytes(trainer);
    write_u32(&mut w, blob.len() as u32)?;
    w.write_all(&blob)?;

    for (name, t) in trainer.model.named_params() {
        write_record(&mut w, &name, &t.shape, &t.data)?;
    }
    let names: Vec<String> = trainer.model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let t = trainer.model.named_params()[i].1;
        write_record(&mut w, &format!("m:{name}"), &t.shape, &trainer.opt.m[i])?;
        write_record(&mut w, &format!("v:{name}"), &t.shape, &trainer.opt.v[i])?;
    }

    write_u64(&mut w, trainer.step)?;
    let counters = counter_bytes(trainer);
    write_u32(&mut w, counters.len() as u32)?;
    w.write_all(&counters)?;
    w.flush()?;
    Ok(())
}

/// Restores just the model (for evaluation): header, configs, and parameter
/// records; optimizer moments and counters are not read.
pub fn load_model(path: &Path) -> Result<(Model, u64), CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let blob_len = read_u32(&mut r, "config length")? as usize;
    let mut blob = vec![0u8; blob_len];
    read_exact_or(&mut r, &mut blob, "config blob")?;
    let configs: ConfigBlob =
        serde_json::from_slice(&blob).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    let mut model = Model::init(configs.model.clone(), 0)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape.clone()))
        .collect();
    let mut buffers = Vec::with_capacity(expected.len());
    for (index, (want_name, want_shape)) in expected.iter().enumerate() {
        let (name, shape, data) = read_record(&mut r)?;
        if &name != want_name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: want_name.clone(),
                found: name,
            });
        }
        if &shape != want_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: want_shape.clone(),
                found: shape,
            });
        }
        buffers.push(data);
    }
    for (i, data) in buffers.into_iter().enumerate() {
        let (_, t) = &mut model.named_params_mut()[i];
        t.data = data;
    }

    // skip the moment records to reach the step counter
    for _ in 0..2 * expected.len() {
        read_record(&mut r)?;
    }
    let step = read_u64(&mut r, "step")?;
    Ok((model, step))
}

/// Restores a trainer. Corpora, vocabulary, and dictionary are external
/// inputs; the checkpoint carries every config and counter needed to make
/// the resumed stream identical.
pub fn load(
    path: &Path,
    mono: &MonoCorpus,
    parallel: &ParallelCorpus,
    vocab: &Vocab,
    dict: &Dictionary,
) -> Result<Trainer, TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(CheckpointError::Io)?);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version }.into());
    }
    let blob_len = read_u32(&mut r, "config length")? as usize;
    let mut blob = vec![0u8; blob_len];
    read_exact_or(&mut r, &mut blob, "config blob")?;
    let configs: ConfigBlob = serde_json::from_slice(&blob)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // Rebuild the skeleton, then overwrite every tensor from the records.
    let mut model = Model::init(configs.model.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape.clone()))
        .collect();

    let mut restore = |model: &mut Model, prefix: &str, index: usize| -> Result<Vec<f64>, CheckpointError> {
        let (name, shape, data) = read_record(&mut r)?;
        let want_name = format!("{prefix}{}", expected[index].0);
        if name != want_name {
            return Err(CheckpointError::NameMismatch { index, expected: want_name, found: name });
        }
        if shape != expected[index].1 {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: expected[index].1.clone(),
                found: shape,
            });
        }
        let _ = model;
        Ok(data)
    };

    let count = expected.len();
    let mut param_data = Vec::with_capacity(count);
    for i in 0..count {
        param_data.push(restore(&mut model, "", i)?);
    }
    for (i, data) in param_data.into_iter().enumerate() {
        let (_, t) = &mut model.named_params_mut()[i];
        **t = Tensor {
            shape: t.shape.clone(),
            data,
            requires_grad: true,
            grad: None,
        };
    }

    let mut opt = AdamState { m: Vec::with_capacity(count), v: Vec::with_capacity(count), t: 0 };
    for i in 0..count {
        let m = restore(&mut model, "m:", i)?;
        let v = restore(&mut model, "v:", i)?;
        opt.m.push(m);
        opt.v.push(v);
    }

    let step = read_u64(&mut r, "step")?;
    let trailer_len = read_u32(&mut r, "state length")? as usize;
    let mut trailer = vec![0u8; trailer_len];
    read_exact_or(&mut r, &mut trailer, "state blob")?;
    let trailer: TrailerState = serde_json::from_slice(&trailer)
        .map_err(|e| CheckpointError::BadConfig(format!("trailer: {e}")))?;
    opt.t = trailer.adam_t;

    let mut sampler = BatchSampler::new(configs.sampler, mono, parallel, vocab, dict)?;
    sampler.restore_counters(&trailer.counters);

    Ok(Trainer {
        model,
        sampler,
        opt,
        loss_config: configs.loss,
        train_config: configs.train,
        step,
        stream_hash: super::STREAM_HASH_SEED,
        clock: Clock::Fixed,
    })
}
