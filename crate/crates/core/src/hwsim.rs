//! Cycle estimates for sparse-weight × dense-activation matmuls on a
//! two-engine accelerator.
//!
//! The weight is cut into `tile_rows × tile_cols` tiles. Inside a tile,
//! each column whose keep density reaches `density_threshold` goes to the
//! Denser Engine, which streams the whole column without skipping zeros;
//! the remaining columns go to the Sparser Engine, which only spends work
//! on their nonzeros. Both engines draw from one pool of
//! `(pe_denser + pe_sparser)·macs_per_pe_cycle` MACs per cycle and
//! partial-sum hand-off is free, so
//!
//! ```text
//! cycles = ceil(tokens · Σ_tiles Σ_columns cost / throughput)
//! ```
//!
//! where `cost` is the tile height for dense columns and the nonzero count
//! otherwise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerName, Layers};
use crate::sparsity::PruneMask;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("no masks to report")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub pe_denser: u64,
    pub pe_sparser: u64,
    pub macs_per_pe_cycle: u64,
    pub density_threshold: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Activation rows multiplied per weight pass.
    pub tokens: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pe_denser: 32,
            pe_sparser: 32,
            macs_per_pe_cycle: 64,
            density_threshold: 0.5,
            tile_rows: 64,
            tile_cols: 64,
            tokens: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.pe_denser == 0
            || self.pe_sparser == 0
            || self.macs_per_pe_cycle == 0
            || self.tile_rows == 0
            || self.tile_cols == 0
            || self.tokens == 0
        {
            return Err(SimError::Config("all counts must be >= 1".into()));
        }
        if !(self.density_threshold > 0.0 && self.density_threshold < 1.0) {
            return Err(SimError::Config(format!(
                "density_threshold {} must lie in (0, 1)",
                self.density_threshold
            )));
        }
        Ok(())
    }

    /// MACs per cycle across both engines.
    pub fn throughput(&self) -> u64 {
        (self.pe_denser + self.pe_sparser) * self.macs_per_pe_cycle
    }
}

pub fn dense_baseline(out: usize, inn: usize, tokens: u64, cfg: &SimConfig) -> u64 {
    (out as u64 * inn as u64 * tokens).div_ceil(cfg.throughput())
}

/// Work units (MACs per token) each engine receives for `mask`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct EngineWork {
    pub denser: u64,
    pub sparser: u64,
}

pub fn engine_work(mask: &PruneMask, cfg: &SimConfig) -> EngineWork {
    let (out, inn) = (mask.out_features(), mask.in_features());
    let mut work = EngineWork::default();
    let mut col_nnz = vec![0u64; inn];
    for r0 in (0..out).step_by(cfg.tile_rows) {
        let r1 = (r0 + cfg.tile_rows).min(out);
        col_nnz.iter_mut().for_each(|c| *c = 0);
        for r in r0..r1 {
            for (c, n) in col_nnz.iter_mut().enumerate() {
                *n += mask.get(r, c) as u64;
            }
        }
        let height = (r1 - r0) as u64;
        for &nnz in &col_nnz {
            if nnz as f64 >= cfg.density_threshold * height as f64 {
                work.denser += height;
            } else {
                work.sparser += nnz;
            }
        }
    }
    work
}

/// Tile row boundaries do not depend on column tiling: a column's density
/// is taken over the tile height, so tile width only groups columns.
pub fn simulate_spmm(mask: &PruneMask, tokens: u64, cfg: &SimConfig) -> u64 {
    let w = engine_work(mask, cfg);
    ((w.denser + w.sparser) * tokens).div_ceil(cfg.throughput())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSim {
    pub layer: LayerName,
    pub out_features: usize,
    pub in_features: usize,
    pub dense_cycles: u64,
    /// Mean over blocks.
    pub sparse_cycles: f64,
    pub sparsity: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub n_blocks: usize,
    pub tokens: u64,
    pub layers: Vec<LayerSim>,
    pub mean_speedup: f64,
}

/// Per-layer cycles, sparsity and speedup averaged over `blocks`.
pub fn report_block(blocks: &[Layers<PruneMask>], cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let first = blocks.first().ok_or(SimError::Empty)?;
    let n = blocks.len() as f64;
    let layers: Vec<LayerSim> = LayerName::ALL
        .iter()
        .map(|&l| {
            let m0 = &first[l];
            let dense = dense_baseline(m0.out_features(), m0.in_features(), cfg.tokens, cfg);
            let sparse = blocks.iter().map(|b| simulate_spmm(&b[l], cfg.tokens, cfg) as f64).sum::<f64>() / n;
            let sparsity = blocks.iter().map(|b| b[l].achieved_sparsity()).sum::<f64>() / n;
            LayerSim {
                layer: l,
                out_features: m0.out_features(),
                in_features: m0.in_features(),
                dense_cycles: dense,
                sparse_cycles: sparse,
                sparsity,
                speedup: if sparse == 0.0 { f64::INFINITY } else { dense as f64 / sparse },
            }
        })
        .collect();
    let finite: Vec<f64> = layers.iter().map(|l| l.speedup).filter(|s| s.is_finite()).collect();
    let mean_speedup = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(SimReport {
        n_blocks: blocks.len(),
        tokens: cfg.tokens,
        layers,
        mean_speedup,
    })
}

impl SimReport {
    /// Aligned text table with one column per projection.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<18}", "Layer");
        for l in &self.layers {
            let _ = write!(s, "{:>11}", l.layer.as_str());
        }
        s.push('\n');
        let rows: [(&str, Box<dyn Fn(&LayerSim) -> String>); 4] = [
            ("Dense Runtime", Box::new(|l| l.dense_cycles.to_string())),
            ("Average Runtime", Box::new(|l| format!("{:.1}", l.sparse_cycles))),
            ("Sparsity", Box::new(|l| format!("{:.2}%", 100.0 * l.sparsity))),
            ("Speedup", Box::new(|l| format!("{:.2}x", l.speedup))),
        ];
        for (name, f) in rows.iter() {
            let _ = write!(s, "{name:<18}");
            for l in &self.layers {
                let _ = write!(s, "{:>11}", f(l));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_dense_runtime() {
        let cfg = SimConfig::default();
        assert_eq!(dense_baseline(4096, 4096, 1, &cfg), 4096);
        assert_eq!(dense_baseline(4096, 4096, 2, &cfg), 8192);
        assert_eq!(dense_baseline(1, 1, 1, &cfg), 1);
    }

    #[test]
    fn identity_and_empty() {
        let cfg = SimConfig::default();
        let ones = PruneMask::ones("x", 100, 70);
        assert_eq!(simulate_spmm(&ones, 3, &cfg), dense_baseline(100, 70, 3, &cfg));
        assert_eq!(simulate_spmm(&PruneMask::zeros("x", 100, 70), 3, &cfg), 0);
    }

    #[test]
    fn dense_columns_do_not_skip_zeros() {
        let cfg = SimConfig {
            tile_rows: 4,
            ..Default::default()
        };
        let mut m = PruneMask::ones("x", 4, 2);
        m.set(0, 0, false);
        m.set(0, 1, false);
        m.set(1, 1, false);
        m.set(2, 1, false);
        // column 0 keeps 3/4 (dense, costs 4), column 1 keeps 1/4 (costs 1)
        assert_eq!(engine_work(&m, &cfg), EngineWork { denser: 4, sparser: 1 });
    }

    #[test]
    fn bad_config() {
        let cfg = SimConfig {
            density_threshold: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
