use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, layer_key, read_file, write_file, IoError, FORMAT_VERSION};
use crate::model::{LayerName, Layers};
use crate::sparsity::PruneMask;

const MAGIC: &[u8; 8] = b"BESAMASK";
pub const MASK_MANIFEST: &str = "masks.json";

/// Header, packed keep bits, then the achieved sparsity as f64 LE.
pub fn write_mask(path: &Path, mask: &PruneMask) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(24 + mask.len() / 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(mask.out_features() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mask.in_features() as u32).to_le_bytes());
    bytes.extend_from_slice(&mask.to_bytes());
    bytes.extend_from_slice(&mask.achieved_sparsity().to_le_bytes());
    write_file(path, &bytes)
}

pub fn read_mask(path: &Path, layer: &str) -> Result<PruneMask, IoError> {
    let bytes = read_file(path)?;
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a mask file"));
    }
    let out = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let inn = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let packed = (out * inn).div_ceil(8);
    if bytes.len() != 16 + packed + 8 {
        return Err(format_err(path, format!("expected {} bytes for {out}x{inn}", 24 + packed)));
    }
    let mask = PruneMask::from_bytes(layer, out, inn, &bytes[16..16 + packed]).expect("length checked");
    let footer = f64::from_le_bytes(bytes[16 + packed..].try_into().expect("8 bytes"));
    if footer.to_bits() != mask.achieved_sparsity().to_bits() {
        return Err(format_err(
            path,
            format!("footer sparsity {footer} disagrees with bits ({})", mask.achieved_sparsity()),
        ));
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifestEntry {
    pub name: String,
    pub file: String,
    pub out_features: usize,
    pub in_features: usize,
    pub achieved_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub format_version: u32,
    pub n_blocks: usize,
    pub global_sparsity: f64,
    pub layers: Vec<MaskManifestEntry>,
}

/// One `<blocks.i.layer>.mask` file per layer plus `masks.json`.
pub fn write_mask_set(dir: &Path, blocks: &[Layers<PruneMask>]) -> Result<MaskManifest, IoError> {
    let mut layers = Vec::new();
    let (mut zeros, mut total) = (0usize, 0usize);
    for (b, masks) in blocks.iter().enumerate() {
        for (l, m) in masks.iter() {
            let name = layer_key(b, l);
            let file = format!("{name}.mask");
            write_mask(&dir.join(&file), m)?;
            zeros += m.zero_count();
            total += m.len();
            layers.push(MaskManifestEntry {
                name,
                file,
                out_features: m.out_features(),
                in_features: m.in_features(),
                achieved_sparsity: m.achieved_sparsity(),
            });
        }
    }
    let manifest = MaskManifest {
        format_version: FORMAT_VERSION,
        n_blocks: blocks.len(),
        global_sparsity: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        layers,
    };
    write_file(
        &dir.join(MASK_MANIFEST),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

pub fn read_mask_set(dir: &Path) -> Result<Vec<Layers<PruneMask>>, IoError> {
    let path = dir.join(MASK_MANIFEST);
    let manifest: MaskManifest =
        serde_json::from_slice(&read_file(&path)?).map_err(|e| format_err(&path, e.to_string()))?;
    let mut blocks = Vec::with_capacity(manifest.n_blocks);
    for b in 0..manifest.n_blocks {
        let layers = Layers::try_from_fn(|l: LayerName| {
            let name = layer_key(b, l);
            let entry = manifest
                .layers
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| format_err(&path, format!("no entry for {name}")))?;
            let mask = read_mask(&dir.join(&entry.file), &name)?;
            if (mask.out_features(), mask.in_features()) != (entry.out_features, entry.in_features) {
                return Err(format_err(&path, format!("{name}: shape disagrees with mask file")));
            }
            Ok(mask)
        })?;
        blocks.push(layers);
    }
    Ok(blocks)
}
