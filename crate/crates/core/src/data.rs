//! Byte-level vocabulary and deterministic batching for next-token prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Maps bytes to ids `0..256`; ids 256..259 are reserved specials.
pub fn encode(bytes: &[u8], prefix_bos: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(bytes.len() + usize::from(prefix_bos));
    if prefix_bos {
        ids.push(BOS);
    }
    ids.extend(bytes.iter().map(|&b| b as usize));
    ids
}

/// Inverse of [`encode`]; special ids are dropped.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(encode(&bytes, false))
}

/// Prefix/suffix split; `train_frac` of the tokens go to the first half.
pub fn split_corpus(tokens: &[usize], train_frac: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Config(format!("train fraction {train_frac} outside [0, 1]")));
    }
    let cut = ((tokens.len() as f64) * train_frac).round() as usize;
    Ok(tokens.split_at(cut.min(tokens.len())))
}

/// Row-major `batch × seq` inputs with their next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn row_inputs(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.seq..(b + 1) * self.seq]
    }

    pub fn row_targets(&self, b: usize) -> &[usize] {
        &self.targets[b * self.seq..(b + 1) * self.seq]
    }
}

/// The corpus is cut into non-overlapping windows of `seq_len + 1` tokens
/// starting at multiples of `seq_len`. Each epoch visits every window once,
/// in order or in a seeded per-epoch permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl BatchPlan {
    pub fn windows(&self, corpus_len: usize) -> Result<usize> {
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("sequence length and batch size must be positive".into()));
        }
        if corpus_len < self.seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus of {corpus_len} tokens is shorter than one window of {}",
                self.seq_len + 1
            )));
        }
        Ok((corpus_len - 1) / self.seq_len)
    }

    fn epoch_order(&self, windows: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..windows).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    /// Start offset of the `i`-th window drawn.
    pub fn window_offset(&self, corpus_len: usize, i: u64) -> Result<usize> {
        let w = self.windows(corpus_len)?;
        let order = self.epoch_order(w, i / w as u64);
        Ok(order[(i % w as u64) as usize] * self.seq_len)
    }

    /// `count` consecutive draws starting at draw index `first`.
    pub fn draws(&self, corpus: &[usize], first: u64, count: usize) -> Result<Batch> {
        let w = self.windows(corpus.len())? as u64;
        let t = self.seq_len;
        let mut inputs = Vec::with_capacity(count * t);
        let mut targets = Vec::with_capacity(count * t);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in first..first + count as u64 {
            let epoch = i / w;
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(w as usize, epoch)));
            }
            let order = &cached.as_ref().expect("filled above").1;
            let off = order[(i % w) as usize] * t;
            inputs.extend_from_slice(&corpus[off..off + t]);
            targets.extend_from_slice(&corpus[off + 1..off + t + 1]);
        }
        Ok(Batch { batch: count, seq: t, inputs, targets })
    }

    /// The batch for optimizer step `step`.
    pub fn next_batch(&self, corpus: &[usize], step: u64) -> Result<Batch> {
        self.draws(corpus, step * self.batch_size as u64, self.batch_size)
    }
}

/// Every full window of `corpus` in order, grouped into batches of at most
/// `batch_size`. Used for teacher-forced evaluation.
pub fn sequential_batches(corpus: &[usize], seq_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    let plan = BatchPlan { seq_len, batch_size, seed: 0, shuffle: false };
    let w = plan.windows(corpus.len())?;
    (0..w)
        .step_by(batch_size)
        .map(|start| plan.draws(corpus, start as u64, batch_size.min(w - start)))
        .collect()
}
