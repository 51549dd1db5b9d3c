use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng_key;

use super::Tokenizer;

const MAGIC: &[u8; 8] = b"TMOEWIN\0";
const VERSION: u32 = 1;
const SPLIT_TAG: u64 = 0x5350_4c49_54;
const SHUFFLE_TAG: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Self::All => 0,
            Self::Train => 1,
            Self::Val => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        [Self::All, Self::Train, Self::Val].into_iter().find(|s| s.code() == c)
    }
}

/// Fixed-length, non-overlapping token windows stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindowDataset {
    pub window_len: usize,
    pub vocab_size: usize,
    pub split: Split,
    pub shard_seed: u64,
    tokens: Vec<u32>,
}

/// Concatenates encoded documents, separated by the tokenizer's separator
/// token when `separate` is set.
pub fn token_stream<S: AsRef<str>>(docs: &[S], tokenizer: &dyn Tokenizer, separate: bool) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 && separate {
            out.extend(tokenizer.separator());
        }
        out.extend(tokenizer.encode(d.as_ref()));
    }
    out
}

/// Cuts `stream` into `floor(len / window_len)` windows; the tail is dropped.
pub fn build_windows(stream: &[u32], window_len: usize, vocab_size: usize) -> Result<TokenWindowDataset> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be positive".into()));
    }
    if stream.len() < window_len {
        return Err(Error::Data(format!("token stream of {} is shorter than one {window_len}-token window", stream.len())));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::Data(format!("token id {bad} out of range for vocab {vocab_size}")));
    }
    let n = stream.len() / window_len;
    Ok(TokenWindowDataset { window_len, vocab_size, split: Split::All, shard_seed: 0, tokens: stream[..n * window_len].to_vec() })
}

/// Whether window `index` lands in the validation split: a pure function of
/// the shard seed and the index.
pub fn is_val_window(shard_seed: u64, index: u64, train_ratio: f64) -> bool {
    let u = (rng_key(&[SPLIT_TAG, shard_seed, index]) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u >= train_ratio
}

/// Deterministic window-level train/val split.
pub fn split_train_val(ds: &TokenWindowDataset, train_ratio: f64, shard_seed: u64) -> Result<(TokenWindowDataset, TokenWindowDataset)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {train_ratio} must lie strictly between 0 and 1")));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, w) in ds.windows().enumerate() {
        if is_val_window(shard_seed, i as u64, train_ratio) { &mut val } else { &mut train }.extend_from_slice(w);
    }
    let make = |tokens, split| TokenWindowDataset { window_len: ds.window_len, vocab_size: ds.vocab_size, split, shard_seed, tokens };
    Ok((make(train, Split::Train), make(val, Split::Val)))
}

/// Window order for one epoch, keyed by (seed, epoch).
pub fn epoch_order(n_windows: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_key(&[SHUFFLE_TAG, seed, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Shuffled window-index batches for one epoch; the last batch may be short.
pub fn batch_iterator(n_windows: usize, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Vec<usize>> {
    let order = epoch_order(n_windows, seed, epoch);
    let bs = batch_size.max(1);
    (0..order.len().div_ceil(bs)).map(move |b| order[b * bs..((b + 1) * bs).min(order.len())].to_vec())
}

impl TokenWindowDataset {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.window_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn window(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.window_len..(i + 1) * self.window_len]
    }

    pub fn windows(&self) -> std::slice::ChunksExact<'_, u32> {
        self.tokens.chunks_exact(self.window_len)
    }

    /// Row-major `[indices.len(), window_len]` token block.
    pub fn gather(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().flat_map(|&i| self.window(i).iter().map(|&t| t as usize)).collect()
    }

    /// Prediction targets in the whole dataset: `window_len - 1` per window.
    pub fn loss_tokens(&self) -> u64 {
        self.len() as u64 * (self.window_len as u64 - 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        for v in [VERSION, self.vocab_size as u32, self.window_len as u32, self.split.code()] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [self.shard_seed, self.len() as u64] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for t in &self.tokens {
            w.write_all(&t.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Parse { path: path.into(), message: m };
        let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let mut head = [0u8; 8 + 4 * 4 + 8 * 2];
        r.read_exact(&mut head).map_err(|_| bad("truncated header".into()))?;
        if &head[..8] != MAGIC {
            return Err(bad("not a token-window dataset (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        if u32_at(8) != VERSION {
            return Err(bad(format!("unsupported dataset version {}", u32_at(8))));
        }
        let (vocab_size, window_len) = (u32_at(12) as usize, u32_at(16) as usize);
        let split = Split::from_code(u32_at(20)).ok_or_else(|| bad(format!("unknown split code {}", u32_at(20))))?;
        let (shard_seed, count) = (u64_at(24), u64_at(32) as usize);
        if window_len == 0 {
            return Err(bad("zero window length".into()));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() != count * window_len * 4 {
            return Err(bad(format!("expected {count} windows of {window_len} tokens, found {} bytes", raw.len())));
        }
        let tokens: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(bad(format!("token id {t} out of range for vocab {vocab_size}")));
        }
        Ok(Self { window_len, vocab_size, split, shard_seed, tokens })
    }
}
