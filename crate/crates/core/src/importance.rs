//! Weight importance from calibration activations and the per-row sort that
//! fixes which weights each rank bin covers.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{record_block, BlockConfig, BlockVars, LayerName, Layers, ModelCheckpoint, ModelError};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("block index {index} out of range for {blocks} blocks")]
    BlockIndex { index: usize, blocks: usize },
    #[error("weight has {weight} input features but {norms} norms were given")]
    Shape { weight: usize, norms: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Wanda,
    Magnitude,
}

/// Per-layer squared input-feature norms, accumulated over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationNorms {
    sum_sq: Layers<Vec<f64>>,
    token_count: usize,
}

impl ActivationNorms {
    pub fn new(cfg: &BlockConfig) -> Self {
        Self {
            sum_sq: Layers::from_fn(|l| vec![0.0; cfg.layer_shape(l)[1]]),
            token_count: 0,
        }
    }

    /// Adds the rows of `x` (one token per row) to the layer's accumulator.
    pub fn accumulate(&mut self, layer: LayerName, x: &Tensor) {
        let acc = &mut self.sum_sq[layer];
        for r in 0..x.rows() {
            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                *a += v * v;
            }
        }
    }

    pub fn add_tokens(&mut self, n: usize) {
        self.token_count += n;
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// ℓ2 norm of each input feature at `layer`.
    pub fn norms(&self, layer: LayerName) -> Tensor {
        let v: Vec<f64> = self.sum_sq[layer].iter().map(|s| s.sqrt()).collect();
        let n = v.len();
        Tensor::new(&[n], v).expect("norm vector")
    }
}

/// Runs block `block_index` on its actual input stream and records the
/// feature norms seen at every projection input.
///
/// `input` stacks whole sequences of `cfg.seq_len` tokens.
pub fn collect_activation_norms(
    model: &ModelCheckpoint,
    block_index: usize,
    input: &Tensor,
    seq_len: usize,
) -> Result<ActivationNorms, ImportanceError> {
    let block = model.blocks.get(block_index).ok_or(ImportanceError::BlockIndex {
        index: block_index,
        blocks: model.blocks.len(),
    })?;
    let cfg = BlockConfig {
        seq_len,
        ..model.config
    };
    let mut norms = ActivationNorms::new(&cfg);
    let mut tape = Tape::new();
    let vars = BlockVars::constants(&mut tape, block);
    let x = tape.constant(input.clone());
    let trace = record_block(&mut tape, &cfg, &vars, x)?;
    for (l, &v) in trace.layer_inputs.iter() {
        norms.accumulate(l, tape.value(v));
    }
    norms.add_tokens(input.rows());
    Ok(norms)
}

/// `δ[o,i] = |W[o,i]|·‖x_i‖` (wanda) or `|W[o,i]|` (magnitude).
pub fn compute_importance(w: &Tensor, norms: &Tensor, metric: Metric) -> Result<Tensor, ImportanceError> {
    let cols = w.cols();
    if norms.numel() != cols {
        return Err(ImportanceError::Shape {
            weight: cols,
            norms: norms.numel(),
        });
    }
    let n = norms.data();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(idx, v)| match metric {
            Metric::Wanda => v.abs() * n[idx % cols],
            Metric::Magnitude => v.abs(),
        })
        .collect();
    Ok(Tensor::new(w.shape(), data).expect("same shape as weight"))
}

/// Ascending importance order of every row of one weight matrix.
///
/// `row(o)[r]` is the input index holding rank `r` in output row `o`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowRanking {
    out_features: usize,
    in_features: usize,
    order: Vec<u32>,
}

impl RowRanking {
    pub fn from_order(out_features: usize, in_features: usize, order: Vec<u32>) -> Option<Self> {
        if order.len() != out_features * in_features {
            return None;
        }
        for row in order.chunks(in_features.max(1)) {
            let mut seen = vec![false; in_features];
            for &c in row {
                let c = c as usize;
                if c >= in_features || seen[c] {
                    return None;
                }
                seen[c] = true;
            }
        }
        Some(Self {
            out_features,
            in_features,
            order,
        })
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn row(&self, o: usize) -> &[u32] {
        &self.order[o * self.in_features..(o + 1) * self.in_features]
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    /// Debug export: `out`, `in` as u32 LE, then the indices as u32 LE.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(&(self.out_features as u32).to_le_bytes())?;
        w.write_all(&(self.in_features as u32).to_le_bytes())?;
        for &i in &self.order {
            w.write_all(&i.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Option<Self> {
        let word = |i: usize| -> Option<u32> { Some(u32::from_le_bytes(bytes.get(4 * i..4 * i + 4)?.try_into().ok()?)) };
        let out = word(0)? as usize;
        let inn = word(1)? as usize;
        if bytes.len() != 8 + 4 * out * inn {
            return None;
        }
        let order = (0..out * inn).map(|i| word(i + 2)).collect::<Option<Vec<_>>>()?;
        Self::from_order(out, inn, order)
    }
}

/// Stable ascending sort of each row by `delta`, ties by column index.
pub fn sort_rows(delta: &Tensor) -> RowRanking {
    let (out, inn) = (delta.rows(), delta.cols());
    let mut order = Vec::with_capacity(out * inn);
    for o in 0..out {
        let row = delta.row(o);
        let mut idx: Vec<u32> = (0..inn as u32).collect();
        idx.sort_by(|&a, &b| row[a as usize].total_cmp(&row[b as usize]));
        order.extend(idx);
    }
    RowRanking {
        out_features: out,
        in_features: inn,
        order,
    }
}

/// Rankings of all seven projections of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRanking {
    pub per_layer: Layers<RowRanking>,
    pub metric: Metric,
}

impl ImportanceRanking {
    pub fn for_block(
        weights: &Layers<Tensor>,
        norms: &ActivationNorms,
        metric: Metric,
    ) -> Result<Self, ImportanceError> {
        let per_layer = Layers::try_from_fn(|l| {
            let delta = compute_importance(&weights[l], &norms.norms(l), metric)?;
            Ok::<_, ImportanceError>(sort_rows(&delta))
        })?;
        Ok(Self { per_layer, metric })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_importance_and_order() {
        let w = Tensor::new(&[1, 3], vec![0.5, -2.0, 1.0]).unwrap();
        let n = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let d = compute_importance(&w, &n, Metric::Wanda).unwrap();
        assert_eq!(d.data(), &[0.5, 4.0, 3.0]);
        assert_eq!(sort_rows(&d).row(0), &[0, 2, 1]);
        assert_eq!(compute_importance(&w, &n, Metric::Magnitude).unwrap().data(), &[0.5, 2.0, 1.0]);
    }

    #[test]
    fn ties_and_reversal() {
        let ties = Tensor::new(&[1, 4], vec![2.0; 4]).unwrap();
        assert_eq!(sort_rows(&ties).row(0), &[0, 1, 2, 3]);
        let desc = Tensor::new(&[1, 4], vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(sort_rows(&desc).row(0), &[3, 2, 1, 0]);
    }

    #[test]
    fn norm_accumulation() {
        let cfg = BlockConfig {
            d_model: 2,
            n_heads: 1,
            d_ff: 2,
            seq_len: 2,
        };
        let mut a = ActivationNorms::new(&cfg);
        a.accumulate(LayerName::QProj, &Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        assert_eq!(a.norms(LayerName::QProj).data(), &[3.0, 4.0]);
        let mut b = ActivationNorms::new(&cfg);
        b.accumulate(LayerName::QProj, &Tensor::new(&[2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        assert_eq!(b.norms(LayerName::QProj).data(), &[5.0, 0.0]);
        assert_eq!(b.norms(LayerName::KProj).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(compute_importance(&w, &Tensor::zeros(&[2]), Metric::Wanda).is_err());
    }

    #[test]
    fn ranking_export_round_trip() {
        let d = Tensor::new(&[2, 3], vec![3.0, 1.0, 2.0, 0.0, 5.0, 4.0]).unwrap();
        let r = sort_rows(&d);
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24);
        assert_eq!(RowRanking::read_from(&buf).unwrap(), r);
        assert!(RowRanking::from_order(1, 3, vec![0, 0, 1]).is_none());
    }
}
