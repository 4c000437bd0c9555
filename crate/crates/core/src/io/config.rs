//! Flat run configuration read from TOML; every key has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, IoError};
use crate::hwsim::SimConfig;
use crate::importance::Metric;
use crate::model::BlockConfig;
use crate::pruner::{PenaltyKind, PruneConfig, Scope};
use crate::sparsity::Granularity;

/// Calibration size used when `desk_scale` is set.
pub const DESK_SEQUENCES: usize = 16;
pub const DESK_TOKENS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Checkpoint directory; a synthetic toy model is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub synth_seed: u64,
    pub synth_blocks: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,

    /// Little-endian u32 token file; synthetic Markov tokens when absent.
    pub calib_file: Option<PathBuf>,
    pub calib_seed: u64,
    pub calib_sequences: usize,
    pub calib_tokens: usize,
    /// Replace the calibration size by 16 sequences of 128 tokens.
    pub desk_scale: bool,
    /// Held-out sequences for `eval` (same length as calibration).
    pub eval_sequences: usize,

    pub out_dir: PathBuf,
    pub masks_dir: Option<PathBuf>,

    pub target_sparsity: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_sequences: usize,
    pub granularity: Granularity,
    pub metric: Metric,
    pub scope: Scope,
    pub seed: u64,
    pub sparsity_step: f64,
    pub penalty: PenaltyKind,
    pub init_width: f64,
    pub two_stream: bool,
    pub converge_sparsity_tol: f64,
    pub converge_loss_tol: f64,
    pub converge_window: usize,

    pub quant_bits: u32,
    pub quant_learning_rate: f64,
    pub quant_init_logit: f64,

    pub pe_denser: u64,
    pub pe_sparser: u64,
    pub macs_per_pe_cycle: u64,
    pub density_threshold: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub sim_tokens: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PruneConfig::default();
        let s = SimConfig::default();
        let b = BlockConfig::default();
        Self {
            checkpoint: None,
            synth_seed: 0,
            synth_blocks: 4,
            vocab: 256,
            d_model: b.d_model,
            n_heads: b.n_heads,
            d_ff: b.d_ff,
            calib_file: None,
            calib_seed: 1,
            calib_sequences: 128,
            calib_tokens: 2048,
            desk_scale: false,
            eval_sequences: 4,
            out_dir: PathBuf::from("out"),
            masks_dir: None,
            target_sparsity: p.target_sparsity,
            lambda: p.lambda,
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            max_steps: p.max_steps,
            batch_sequences: p.batch_sequences,
            granularity: p.granularity,
            metric: p.metric,
            scope: p.scope,
            seed: p.seed,
            sparsity_step: p.sparsity_step,
            penalty: p.penalty,
            init_width: p.init_width,
            two_stream: p.two_stream,
            converge_sparsity_tol: p.converge_sparsity_tol,
            converge_loss_tol: p.converge_loss_tol,
            converge_window: p.converge_window,
            quant_bits: p.quant_bits,
            quant_learning_rate: p.quant_learning_rate,
            quant_init_logit: p.quant_init_logit,
            pe_denser: s.pe_denser,
            pe_sparser: s.pe_sparser,
            macs_per_pe_cycle: s.macs_per_pe_cycle,
            density_threshold: s.density_threshold,
            tile_rows: s.tile_rows,
            tile_cols: s.tile_cols,
            sim_tokens: s.tokens,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(sequences, tokens per sequence)` after applying `desk_scale`.
    pub fn calibration_size(&self) -> (usize, usize) {
        if self.desk_scale {
            (DESK_SEQUENCES, DESK_TOKENS)
        } else {
            (self.calib_sequences, self.calib_tokens)
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            seq_len: self.calibration_size().1,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            target_sparsity: self.target_sparsity,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_sequences: self.batch_sequences,
            granularity: self.granularity,
            metric: self.metric,
            scope: self.scope,
            seed: self.seed,
            sparsity_step: self.sparsity_step,
            penalty: self.penalty,
            init_width: self.init_width,
            two_stream: self.two_stream,
            converge_sparsity_tol: self.converge_sparsity_tol,
            converge_loss_tol: self.converge_loss_tol,
            converge_window: self.converge_window,
            quant_bits: self.quant_bits,
            quant_learning_rate: self.quant_learning_rate,
            quant_init_logit: self.quant_init_logit,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            pe_denser: self.pe_denser,
            pe_sparser: self.pe_sparser,
            macs_per_pe_cycle: self.macs_per_pe_cycle,
            density_threshold: self.density_threshold,
            tile_rows: self.tile_rows,
            tile_cols: self.tile_cols,
            tokens: self.sim_tokens,
        }
    }

    /// Reads a `--sim-config` file holding only simulator keys.
    pub fn load_sim_config(path: &Path) -> Result<SimConfig, IoError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("target_sparsity = 0.4\nlamda = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn enum_keys_parse() {
        let c = RunConfig::from_toml_str("granularity = \"per_layer\"\nscope = \"two_blocks\"\nmetric = \"magnitude\"")
            .unwrap();
        assert_eq!(c.granularity, Granularity::PerLayer);
        assert_eq!(c.scope, Scope::TwoBlocks);
        assert_eq!(c.metric, Metric::Magnitude);
    }

    #[test]
    fn desk_scale_overrides_size() {
        let c = RunConfig {
            desk_scale: true,
            ..Default::default()
        };
        assert_eq!(c.calibration_size(), (16, 128));
        assert_eq!(RunConfig::default().calibration_size(), (128, 2048));
    }
}
