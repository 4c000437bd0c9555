use besa::io::{
    load_checkpoint, read_mask, read_mask_set, read_quant_layer, save_checkpoint, synth_model, write_mask,
    write_mask_set, write_quant_set, CalibrationSet, CheckpointManifest, Dtype, IoError,
};
use besa::model::{BlockConfig, LayerName, Layers};
use besa::quant::{quantize, QuantParams};
use besa::sparsity::PruneMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> BlockConfig {
    BlockConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        seq_len: 8,
    }
}

fn random_mask(rng: &mut ChaCha8Rng, name: &str, out: usize, inn: usize) -> PruneMask {
    let mut m = PruneMask::ones(name, out, inn);
    for o in 0..out {
        for i in 0..inn {
            m.set(o, i, rng.gen_bool(0.6));
        }
    }
    m
}

#[test]
fn checkpoint_round_trip_f64_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_model(&small_cfg(), 3, 32, 5);
    save_checkpoint(&m, dir.path(), Dtype::F64).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), m);
}

#[test]
fn checkpoint_round_trip_f32_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_model(&small_cfg(), 1, 32, 5);
    save_checkpoint(&m, dir.path(), Dtype::F32).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let diff = back.blocks[0].layers[LayerName::DownProj].max_abs_diff(&m.blocks[0].layers[LayerName::DownProj]);
    assert!(diff < 1e-6, "{diff}");
}

fn corrupt_name(err: IoError) -> String {
    match err {
        IoError::CorruptCheckpoint { tensor, .. } => tensor,
        other => panic!("expected a corrupt-checkpoint error, got {other}"),
    }
}

#[test]
fn missing_tensor_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_model(&small_cfg(), 3, 32, 5);
    save_checkpoint(&m, dir.path(), Dtype::F64).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    manifest.tensors.retain(|t| t.name != "blocks.2.gate_proj");
    std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    assert_eq!(corrupt_name(load_checkpoint(dir.path()).unwrap_err()), "blocks.2.gate_proj");
}

#[test]
fn flipped_byte_fails_the_checksum_of_its_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_model(&small_cfg(), 3, 32, 5);
    let manifest = save_checkpoint(&m, dir.path(), Dtype::F64).unwrap();
    let entry = manifest.tensors.iter().find(|t| t.name == "blocks.2.gate_proj").unwrap();
    let blob_path = dir.path().join("weights.bin");
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[entry.offset as usize + 17] ^= 0x40;
    std::fs::write(&blob_path, blob).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(corrupt_name(err), "blocks.2.gate_proj");
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&synth_model(&small_cfg(), 1, 32, 5), dir.path(), Dtype::F64).unwrap();
    let blob_path = dir.path().join("weights.bin");
    let blob = std::fs::read(&blob_path).unwrap();
    std::fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(IoError::CorruptCheckpoint { .. })));
}

#[test]
fn synthetic_model_is_deterministic_with_expected_scale() {
    let cfg = BlockConfig::default();
    let a = synth_model(&cfg, 2, 64, 9);
    assert_eq!(a, synth_model(&cfg, 2, 64, 9));
    assert_ne!(a, synth_model(&cfg, 2, 64, 10));
    for l in LayerName::ALL {
        let w = &a.blocks[1].layers[l];
        let std = (w.sum_sq() / w.numel() as f64).sqrt();
        let expect = 1.0 / (w.cols() as f64).sqrt();
        assert!((std / expect - 1.0).abs() < 0.1, "{l}: std {std}, expected {expect}");
    }
}

#[test]
fn calibration_sets_are_deterministic_and_in_vocab() {
    let a = CalibrationSet::synthetic(4, 32, 50, 3);
    assert_eq!(a.tokens(), CalibrationSet::synthetic(4, 32, 50, 3).tokens());
    assert!(a.tokens().iter().all(|&t| t < 50));
    let held = CalibrationSet::synthetic_stream(4, 32, 50, 3, 1);
    assert_ne!(a.tokens(), held.tokens());
}

#[test]
fn calibration_file_round_trip_and_vocab_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tokens.bin");
    let tokens: Vec<u32> = (0..40).map(|i| i % 7).collect();
    std::fs::write(&path, tokens.iter().flat_map(|t| t.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    let c = CalibrationSet::from_file(&path, 4, 10, 7).unwrap();
    assert_eq!(c.sequence(3), &tokens[30..40]);
    assert!(CalibrationSet::from_file(&path, 4, 10, 6).is_err());
    assert!(CalibrationSet::from_file(&path, 5, 10, 7).is_err());
}

#[test]
fn mask_file_round_trip_and_footer_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random_mask(&mut rng, "blocks.0.q_proj", 13, 29);
    let path = dir.path().join("m.mask");
    write_mask(&path, &m).unwrap();
    assert_eq!(read_mask(&path, "blocks.0.q_proj").unwrap(), m);

    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"BESAMASK");
    bytes[16] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_mask(&path, "x").is_err(), "footer sparsity no longer matches the bits");
}

#[test]
fn mask_set_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let blocks: Vec<Layers<PruneMask>> = (0..2)
        .map(|b| {
            Layers::from_fn(|l| {
                let [o, i] = cfg.layer_shape(l);
                random_mask(&mut rng, &format!("blocks.{b}.{l}"), o, i)
            })
        })
        .collect();
    let manifest = write_mask_set(dir.path(), &blocks).unwrap();
    assert_eq!(manifest.n_blocks, 2);
    assert_eq!(read_mask_set(dir.path()).unwrap(), blocks);
}

#[test]
fn quantized_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_model(&small_cfg(), 1, 32, 5);
    let layers = Layers::from_fn(|l| {
        let w = &m.blocks[0].layers[l];
        let mut q = QuantParams::unclipped(3, w.rows());
        q.gamma1[0] = 0.7;
        quantize(w, &q).unwrap()
    });
    write_quant_set(dir.path(), std::slice::from_ref(&layers), 3, false).unwrap();
    for l in LayerName::ALL {
        let f = read_quant_layer(&dir.path().join(format!("blocks.0.{l}.quant"))).unwrap();
        assert_eq!(f.dequantize(), layers[l].dequantized, "{l}");
    }
}
