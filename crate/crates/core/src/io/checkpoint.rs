use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_err, layer_key, read_file, write_file, IoError, FORMAT_VERSION};
use crate::model::{BlockConfig, BlockWeights, LayerName, Layers, ModelCheckpoint};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: BlockConfig,
    pub n_blocks: usize,
    pub vocab: usize,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(m: &ModelCheckpoint) -> Vec<(String, &Tensor)> {
    let mut out = vec![("embed".to_string(), &m.embed)];
    for (b, block) in m.blocks.iter().enumerate() {
        for (l, w) in block.layers.iter() {
            out.push((layer_key(b, l), w));
        }
        out.push((format!("blocks.{b}.attn_norm_gain"), &block.attn_norm_gain));
        out.push((format!("blocks.{b}.mlp_norm_gain"), &block.mlp_norm_gain));
    }
    out.push(("final_norm_gain".into(), &m.final_norm_gain));
    out.push(("head".into(), &m.head));
    out
}

/// Writes `manifest.json` and `weights.bin` (little-endian, row-major) into `dir`.
pub fn save_checkpoint(m: &ModelCheckpoint, dir: &Path, dtype: Dtype) -> Result<CheckpointManifest, IoError> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(m) {
        let start = blob.len();
        for &v in t.data() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype,
            offset: start as u64,
            length: (blob.len() - start) as u64,
            sha256: hex::encode(Sha256::digest(&blob[start..])),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: m.config,
        n_blocks: m.blocks.len(),
        vocab: m.vocab,
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    write_file(&dir.join(BLOB_FILE), &blob)?;
    Ok(manifest)
}

fn corrupt(tensor: &str, reason: impl Into<String>) -> IoError {
    IoError::CorruptCheckpoint {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelCheckpoint, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let blob = read_file(&dir.join(BLOB_FILE))?;

    let cfg = manifest.config;
    let d = cfg.d_model;
    let mut expected: Vec<String> = Vec::new();
    for b in 0..manifest.n_blocks {
        expected.extend(LayerName::ALL.iter().map(|&l| layer_key(b, l)));
        expected.push(format!("blocks.{b}.attn_norm_gain"));
        expected.push(format!("blocks.{b}.mlp_norm_gain"));
    }
    expected.extend(["embed", "head", "final_norm_gain"].map(String::from));
    if let Some(name) = expected.iter().find(|n| !manifest.tensors.iter().any(|t| &t.name == *n)) {
        return Err(corrupt(name, "missing"));
    }

    let mut spans: Vec<(u64, u64, &str)> = manifest
        .tensors
        .iter()
        .map(|t| (t.offset, t.offset + t.length, t.name.as_str()))
        .collect();
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(corrupt(pair[1].2, format!("overlaps {}", pair[0].2)));
        }
    }
    let total: u64 = manifest.tensors.iter().map(|t| t.length).sum();
    if total != blob.len() as u64 {
        let last = spans.last().map_or("weights.bin", |s| s.2);
        return Err(corrupt(
            last,
            format!("manifest describes {total} bytes, blob has {}", blob.len()),
        ));
    }

    let get = |name: &str, shape: &[usize]| -> Result<Tensor, IoError> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| corrupt(name, "missing"))?;
        if entry.shape != shape {
            return Err(corrupt(name, format!("shape {:?}, expected {shape:?}", entry.shape)));
        }
        let numel: usize = shape.iter().product();
        if entry.length as usize != numel * entry.dtype.width() {
            return Err(corrupt(name, format!("byte length {} does not fit shape", entry.length)));
        }
        let end = (entry.offset + entry.length) as usize;
        let bytes = blob
            .get(entry.offset as usize..end)
            .ok_or_else(|| corrupt(name, "extends past end of blob"))?;
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(corrupt(name, "checksum mismatch"));
        }
        let data = match entry.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        Ok(Tensor::new(shape, data).expect("length checked"))
    };

    let mut blocks = Vec::with_capacity(manifest.n_blocks);
    for b in 0..manifest.n_blocks {
        let layers = Layers::try_from_fn(|l| get(&layer_key(b, l), &cfg.layer_shape(l)))?;
        blocks.push(BlockWeights {
            layers,
            attn_norm_gain: get(&format!("blocks.{b}.attn_norm_gain"), &[d])?,
            mlp_norm_gain: get(&format!("blocks.{b}.mlp_norm_gain"), &[d])?,
        });
    }
    let embed = get("embed", &[manifest.vocab, d])?;
    let head = get("head", &[manifest.vocab, d])?;
    let final_norm_gain = get("final_norm_gain", &[d])?;
    ModelCheckpoint::new(cfg, manifest.vocab, blocks, embed, head, final_norm_gain)
        .map_err(|e| format_err(&manifest_path, e.to_string()))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Deterministic random model; projection weights have std `1/√fan_in`.
pub fn synth_model(cfg: &BlockConfig, n_blocks: usize, vocab: usize, seed: u64) -> ModelCheckpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let embed = gaussian(&mut rng, &[vocab, d], 1.0);
    let blocks = (0..n_blocks)
        .map(|_| {
            let layers = Layers::from_fn(|l: LayerName| {
                let [o, i] = cfg.layer_shape(l);
                gaussian(&mut rng, &[o, i], 1.0 / (i as f64).sqrt())
            });
            BlockWeights {
                layers,
                attn_norm_gain: Tensor::ones(&[d]),
                mlp_norm_gain: Tensor::ones(&[d]),
            }
        })
        .collect();
    let head = gaussian(&mut rng, &[vocab, d], 1.0 / (d as f64).sqrt());
    ModelCheckpoint::new(*cfg, vocab, blocks, embed, head, Tensor::ones(&[d])).expect("synthetic shapes are valid")
}
