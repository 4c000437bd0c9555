use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{format_err, read_file, IoError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    File(PathBuf),
    /// Chain seed and the index of the sample stream drawn from it.
    Synthetic { seed: u64, stream: u64 },
}

/// Equal-length token sequences used for activation statistics and
/// reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    tokens: Vec<u32>,
    n_sequences: usize,
    seq_len: usize,
    pub provenance: Provenance,
}

impl CalibrationSet {
    pub fn new(tokens: Vec<u32>, n_sequences: usize, seq_len: usize, provenance: Provenance) -> Option<Self> {
        (n_sequences >= 1 && seq_len >= 1 && tokens.len() == n_sequences * seq_len).then_some(Self {
            tokens,
            n_sequences,
            seq_len,
            provenance,
        })
    }

    /// Sequences drawn from the order-1 chain of [`MarkovSource::new`]`(seed)`.
    pub fn synthetic(n_sequences: usize, seq_len: usize, vocab: usize, seed: u64) -> Self {
        Self::synthetic_stream(n_sequences, seq_len, vocab, seed, 0)
    }

    /// Like [`CalibrationSet::synthetic`], but from an independent sample
    /// stream of the same chain (stream 0 is the calibration stream).
    pub fn synthetic_stream(n_sequences: usize, seq_len: usize, vocab: usize, seed: u64, stream: u64) -> Self {
        let sample_seed = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let tokens = MarkovSource::new(vocab, seed).sample(n_sequences * seq_len, seq_len, sample_seed);
        Self::new(tokens, n_sequences, seq_len, Provenance::Synthetic { seed, stream }).expect("sizes match")
    }

    /// Reads little-endian u32 token ids and keeps the first
    /// `n_sequences·seq_len` of them.
    pub fn from_file(path: &Path, n_sequences: usize, seq_len: usize, vocab: usize) -> Result<Self, IoError> {
        let bytes = read_file(path)?;
        if bytes.len() % 4 != 0 {
            return Err(format_err(path, "token file length is not a multiple of 4"));
        }
        let need = n_sequences * seq_len;
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .take(need)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tokens.len() < need {
            return Err(format_err(
                path,
                format!("{} tokens available, {need} needed", bytes.len() / 4),
            ));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(format_err(path, format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self::new(tokens, n_sequences, seq_len, Provenance::File(path.to_path_buf())).expect("sizes match"))
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> Vec<&[u32]> {
        (0..self.n_sequences).map(|i| self.sequence(i)).collect()
    }
}

/// Order-1 Markov chain over `vocab` symbols with peaked random transitions.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    rows: Vec<WeightedIndex<f64>>,
}

impl MarkovSource {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let logit = Normal::new(0.0f64, 2.0).expect("positive std");
        let rows = (0..vocab)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| logit.sample(&mut rng).exp()).collect();
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();
        Self { rows }
    }

    /// `n` tokens; a fresh uniformly drawn start state every `restart` tokens.
    pub fn sample(&self, n: usize, restart: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let mut state = 0;
        for i in 0..n {
            state = if i % restart.max(1) == 0 {
                rng.gen_range(0..self.rows.len())
            } else {
                self.rows[state].sample(&mut rng)
            };
            out.push(state as u32);
        }
        out
    }
}
