//! Versioned binary checkpoints: magic, JSON header length, JSON header,
//! then raw little-endian tensor data (weights, first moments, second moments).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ObjectiveBreakdown;
use crate::model::{DecoderModel, ModelConfig};
use crate::tensor::{DType, Scalar, Tensor};

use super::{AdamW, TrainConfig};

const MAGIC: &[u8; 8] = b"TMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestVal {
    pub step: usize,
    pub val_ce: f64,
    pub val_ppl: f64,
}

/// Loop position. Data order and dropout masks are derived from the seed and
/// these counters, so they are the whole RNG state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub tokens: u64,
    pub best: Option<BestVal>,
    /// Micro-batch losses since the last evaluation.
    #[serde(default)]
    pub pending: Vec<ObjectiveBreakdown>,
    /// An epoch finished since the last evaluation.
    #[serde(default)]
    pub epoch_end: bool,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<T> {
    pub model: DecoderModel<T>,
    pub optimizer: AdamW<T>,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn write_data<T: Scalar>(w: &mut impl Write, data: &[T]) -> std::io::Result<()> {
    for &x in data {
        match T::DTYPE {
            DType::F32 => w.write_all(&(x.to_f64() as f32).to_le_bytes())?,
            DType::F64 => w.write_all(&x.to_f64().to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_data<T: Scalar>(r: &mut impl Read, n: usize) -> std::io::Result<Vec<T>> {
    let width = match T::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(width)
        .map(|c| match T::DTYPE {
            DType::F32 => T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            DType::F64 => T::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &DecoderModel<T>, opt: &AdamW<T>, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        model: model.config().clone(),
        train: train.clone(),
        state: state.clone(),
        optimizer_step: opt.step,
        tensors: model.params().iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for p in model.params().iter() {
            write_data(&mut w, p.value.data()).map_err(io)?;
        }
        for t in opt.m.iter().chain(&opt.v) {
            write_data(&mut w, t.data()).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bad = |m: String| Error::Parse { path: path.into(), message: m };
    let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("truncated checkpoint".into()))?;
    if &head[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(head[8..].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated checkpoint header".into()))?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if h.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", h.format_version)));
    }
    if h.dtype != T::DTYPE {
        return Err(bad(format!("checkpoint holds {:?} weights, requested {:?}", h.dtype, T::DTYPE)));
    }
    let mut model = DecoderModel::<T>::new(h.model.clone(), 0)?;
    let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
        let data = read_data(&mut r, shape.iter().product()).map_err(|_| bad("truncated tensor data".into()))?;
        Tensor::new(shape, data)
    };
    let mut named = Vec::with_capacity(h.tensors.len());
    for e in &h.tensors {
        named.push((e.name.clone(), read(&e.shape)?));
    }
    let m = h.tensors.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
    let v = h.tensors.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
    model.params_mut().load(named)?;
    // moments must line up with the model's parameter order
    for (p, e) in model.params().iter().zip(&h.tensors) {
        if p.name != e.name {
            return Err(bad(format!("tensor order mismatch at {}", e.name)));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { model, optimizer: AdamW { step: h.optimizer_step, m, v }, train: h.train, state: h.state })
}
