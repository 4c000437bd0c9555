//! On-disk formats: checkpoints, calibration tokens, masks, quantized
//! exports, run configuration and reports.

mod calib;
mod checkpoint;
pub mod config;
mod masks;
mod quant_export;
pub mod report;

pub use calib::{CalibrationSet, MarkovSource, Provenance};
pub use checkpoint::{load_checkpoint, save_checkpoint, synth_model, CheckpointManifest, Dtype, TensorEntry};
pub use masks::{read_mask, read_mask_set, write_mask, write_mask_set, MaskManifest, MaskManifestEntry};
pub use quant_export::{read_quant_layer, write_quant_set, QuantLayerFile};

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Version stamped into every manifest and report this crate writes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {tensor}: {reason}")]
    CorruptCheckpoint { tensor: String, reason: String },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| IoError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    std::fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Name of a prunable tensor inside a multi-block artifact.
pub fn layer_key(block: usize, layer: crate::model::LayerName) -> String {
    format!("blocks.{block}.{}", layer.as_str())
}
