use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, layer_key, read_file, write_file, IoError, FORMAT_VERSION};
use crate::model::Layers;
use crate::quant::Quantized;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BESAQUNT";
pub const QUANT_MANIFEST: &str = "quant.json";

/// Contents of one quantized layer file.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayerFile {
    pub out_features: usize,
    pub in_features: usize,
    pub bits: u32,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub passthrough: Vec<bool>,
    pub codes: Vec<u32>,
    /// Original values of pass-through rows, in row order.
    pub raw_rows: Vec<f64>,
}

impl QuantLayerFile {
    pub fn from_quantized(q: &Quantized, bits: u32) -> Self {
        let (out, inn) = (q.dequantized.rows(), q.dequantized.cols());
        let raw_rows = (0..out)
            .filter(|&o| q.passthrough[o])
            .flat_map(|o| q.dequantized.row(o).to_vec())
            .collect();
        Self {
            out_features: out,
            in_features: inn,
            bits,
            scales: q.scales.clone(),
            zero_points: q.zero_points.clone(),
            passthrough: q.passthrough.clone(),
            codes: q.codes.clone(),
            raw_rows,
        }
    }

    /// `(code − z)·h`, with pass-through rows restored verbatim.
    pub fn dequantize(&self) -> Tensor {
        let inn = self.in_features;
        let mut data = Vec::with_capacity(self.out_features * inn);
        let mut raw = self.raw_rows.chunks_exact(inn.max(1));
        for o in 0..self.out_features {
            if self.passthrough[o] {
                data.extend_from_slice(raw.next().expect("one raw row per pass-through channel"));
            } else {
                let (h, z) = (self.scales[o], self.zero_points[o] as f64);
                data.extend(self.codes[o * inn..(o + 1) * inn].iter().map(|&c| (c as f64 - z) * h));
            }
        }
        Tensor::new(&[self.out_features, inn], data).expect("dimensions")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        for v in [self.out_features as u32, self.in_features as u32, self.bits] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for h in &self.scales {
            b.extend_from_slice(&h.to_le_bytes());
        }
        for z in &self.zero_points {
            b.extend_from_slice(&z.to_le_bytes());
        }
        b.extend(self.passthrough.iter().map(|&p| p as u8));
        let mut packed = vec![0u8; (self.codes.len() * self.bits as usize).div_ceil(8)];
        for (i, &c) in self.codes.iter().enumerate() {
            for bit in 0..self.bits as usize {
                if c >> bit & 1 == 1 {
                    let pos = i * self.bits as usize + bit;
                    packed[pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        b.extend_from_slice(&packed);
        for v in &self.raw_rows {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, IoError> {
        let bad = |why: &str| format_err(path, why.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a quantized layer file"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let (out, inn, bits) = (word(8) as usize, word(12) as usize, word(16));
        if !(2..=8).contains(&bits) {
            return Err(bad("bit width outside 2..=8"));
        }
        let mut at = 20;
        let head = out * (8 + 4 + 1);
        let packed_len = (out * inn * bits as usize).div_ceil(8);
        if bytes.len() < at + head + packed_len {
            return Err(bad("truncated"));
        }
        let scales: Vec<f64> = (0..out)
            .map(|o| f64::from_le_bytes(bytes[at + 8 * o..at + 8 * o + 8].try_into().expect("8 bytes")))
            .collect();
        at += 8 * out;
        let zero_points: Vec<i32> = (0..out)
            .map(|o| i32::from_le_bytes(bytes[at + 4 * o..at + 4 * o + 4].try_into().expect("4 bytes")))
            .collect();
        at += 4 * out;
        let passthrough: Vec<bool> = bytes[at..at + out].iter().map(|&b| b != 0).collect();
        at += out;
        let packed = &bytes[at..at + packed_len];
        at += packed_len;
        let codes = (0..out * inn)
            .map(|i| {
                (0..bits as usize).fold(0u32, |acc, bit| {
                    let pos = i * bits as usize + bit;
                    acc | (((packed[pos / 8] >> (pos % 8)) & 1) as u32) << bit
                })
            })
            .collect();
        let n_raw = passthrough.iter().filter(|&&p| p).count() * inn;
        if bytes.len() != at + 8 * n_raw {
            return Err(bad("pass-through section has the wrong length"));
        }
        let raw_rows = bytes[at..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            out_features: out,
            in_features: inn,
            bits,
            scales,
            zero_points,
            passthrough,
            codes,
            raw_rows,
        })
    }
}

pub fn read_quant_layer(path: &Path) -> Result<QuantLayerFile, IoError> {
    QuantLayerFile::from_bytes(path, &read_file(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantManifestEntry {
    pub name: String,
    pub file: String,
    pub bits: u32,
    pub passthrough_channels: usize,
    /// Mask file applied on top of the codes, relative to the mask directory.
    pub mask_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub format_version: u32,
    pub n_blocks: usize,
    pub layers: Vec<QuantManifestEntry>,
}

/// One `<blocks.i.layer>.quant` file per layer plus `quant.json`.
pub fn write_quant_set(
    dir: &Path,
    blocks: &[Layers<Quantized>],
    bits: u32,
    with_masks: bool,
) -> Result<QuantManifest, IoError> {
    let mut layers = Vec::new();
    for (b, qs) in blocks.iter().enumerate() {
        for (l, q) in qs.iter() {
            let name = layer_key(b, l);
            let file = format!("{name}.quant");
            write_file(&dir.join(&file), &QuantLayerFile::from_quantized(q, bits).to_bytes())?;
            layers.push(QuantManifestEntry {
                mask_file: with_masks.then(|| format!("{name}.mask")),
                passthrough_channels: q.passthrough.iter().filter(|&&p| p).count(),
                name,
                file,
                bits,
            });
        }
    }
    let manifest = QuantManifest {
        format_version: FORMAT_VERSION,
        n_blocks: blocks.len(),
        layers,
    };
    write_file(
        &dir.join(QUANT_MANIFEST),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}
