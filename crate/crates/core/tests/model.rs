mod common;

use besa::model::{
    block_forward, final_logits, embed_tokens, model_forward, perplexity, BlockConfig, BlockWeights, LayerName,
    Layers, ModelCheckpoint,
};
use besa::sparsity::PruneMask;
use besa::tensor::Tensor;
use common::{random_tensor, rng};

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn tiny_cfg() -> BlockConfig {
    BlockConfig {
        d_model: 2,
        n_heads: 1,
        d_ff: 2,
        seq_len: 2,
    }
}

fn tiny_block() -> BlockWeights {
    BlockWeights {
        layers: Layers([
            t(&[2, 2], &[0.5, -0.2, 0.1, 0.3]),
            t(&[2, 2], &[0.4, 0.0, -0.3, 0.2]),
            t(&[2, 2], &[1.0, 0.5, -0.5, 0.25]),
            t(&[2, 2], &[0.2, -0.1, 0.6, 0.4]),
            t(&[2, 2], &[0.7, -0.4, 0.2, 0.9]),
            t(&[2, 2], &[-0.3, 0.8, 0.5, 0.1]),
            t(&[2, 2], &[0.6, 0.2, -0.7, 0.3]),
        ]),
        attn_norm_gain: t(&[2], &[1.0, 0.8]),
        mlp_norm_gain: t(&[2], &[0.9, 1.1]),
    }
}

// Scalar-by-scalar evaluation of the block, written out without the tape.
fn hand_block(x: [[f64; 2]; 2], w: &BlockWeights) -> [[f64; 2]; 2] {
    let m = |l: LayerName, o: usize, i: usize| w.layers[l].at(o, i);
    let norm = |v: [f64; 2], g: &Tensor| {
        let rms = ((v[0] * v[0] + v[1] * v[1]) / 2.0 + 1e-6).sqrt();
        [v[0] / rms * g.data()[0], v[1] / rms * g.data()[1]]
    };
    let proj = |l: LayerName, v: [f64; 2]| [m(l, 0, 0) * v[0] + m(l, 0, 1) * v[1], m(l, 1, 0) * v[0] + m(l, 1, 1) * v[1]];
    let z = [norm(x[0], &w.attn_norm_gain), norm(x[1], &w.attn_norm_gain)];
    let q = [proj(LayerName::QProj, z[0]), proj(LayerName::QProj, z[1])];
    let k = [proj(LayerName::KProj, z[0]), proj(LayerName::KProj, z[1])];
    let v = [proj(LayerName::VProj, z[0]), proj(LayerName::VProj, z[1])];
    let scale = 1.0 / 2f64.sqrt();
    let dot = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) * scale;
    // position 0 sees only itself
    let a0 = v[0];
    let s00 = dot(q[1], k[0]);
    let s01 = dot(q[1], k[1]);
    let mx = s00.max(s01);
    let (e0, e1) = ((s00 - mx).exp(), (s01 - mx).exp());
    let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let a1 = [p0 * v[0][0] + p1 * v[1][0], p0 * v[0][1] + p1 * v[1][1]];
    let o = [proj(LayerName::OProj, a0), proj(LayerName::OProj, a1)];
    let h = [[x[0][0] + o[0][0], x[0][1] + o[0][1]], [x[1][0] + o[1][0], x[1][1] + o[1][1]]];
    let mut out = [[0.0; 2]; 2];
    for s in 0..2 {
        let z = norm(h[s], &w.mlp_norm_gain);
        let g = proj(LayerName::GateProj, z);
        let u = proj(LayerName::UpProj, z);
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let act = [silu(g[0]) * u[0], silu(g[1]) * u[1]];
        let d = proj(LayerName::DownProj, act);
        out[s] = [h[s][0] + d[0], h[s][1] + d[1]];
    }
    out
}

#[test]
fn block_matches_hand_computation() {
    let x = [[0.3, -1.2], [0.9, 0.4]];
    let w = tiny_block();
    let got = block_forward(&tiny_cfg(), &w, &t(&[2, 2], &[0.3, -1.2, 0.9, 0.4]), None, None).unwrap();
    let expect = hand_block(x, &w);
    for s in 0..2 {
        for c in 0..2 {
            assert!((got.at(s, c) - expect[s][c]).abs() < 1e-12, "{s},{c}");
        }
    }
}

fn toy_model(blocks: usize, seed: u64) -> ModelCheckpoint {
    let cfg = BlockConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        seq_len: 6,
    };
    besa::io::synth_model(&cfg, blocks, 32, seed)
}

fn masks_of(cfg: &BlockConfig, keep: bool) -> Layers<PruneMask> {
    Layers::from_fn(|l| {
        let [o, i] = cfg.layer_shape(l);
        if keep {
            PruneMask::ones(l.as_str(), o, i)
        } else {
            PruneMask::zeros(l.as_str(), o, i)
        }
    })
}

#[test]
fn all_ones_mask_is_bitwise_noop() {
    let m = toy_model(1, 3);
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[12, 8], 1.0);
    let plain = block_forward(&m.config, &m.blocks[0], &x, None, None).unwrap();
    let masked = block_forward(&m.config, &m.blocks[0], &x, Some(&masks_of(&m.config, true)), None).unwrap();
    assert_eq!(plain, masked);
}

#[test]
fn all_zeros_mask_leaves_residual_only() {
    let m = toy_model(1, 3);
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[12, 8], 1.0);
    let y = block_forward(&m.config, &m.blocks[0], &x, Some(&masks_of(&m.config, false)), None).unwrap();
    assert_eq!(y, x);
}

#[test]
fn mask_shape_mismatch_is_reported() {
    let m = toy_model(1, 3);
    let mut masks = masks_of(&m.config, true);
    masks[LayerName::UpProj] = PruneMask::ones("up_proj", 3, 3);
    let x = Tensor::zeros(&[6, 8]);
    let err = block_forward(&m.config, &m.blocks[0], &x, Some(&masks), None).unwrap_err();
    assert!(err.to_string().contains("up_proj"), "{err}");
}

#[test]
fn sequences_are_processed_independently() {
    let m = toy_model(1, 4);
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[6, 8], 1.0);
    let b = random_tensor(&mut r, &[6, 8], 1.0);
    let both = block_forward(&m.config, &m.blocks[0], &Tensor::concat_rows(&[&a, &b]).unwrap(), None, None).unwrap();
    let swapped = block_forward(&m.config, &m.blocks[0], &Tensor::concat_rows(&[&b, &a]).unwrap(), None, None).unwrap();
    let ya = block_forward(&m.config, &m.blocks[0], &a, None, None).unwrap();
    assert_eq!(both.slice_rows(0, 6), ya);
    assert_eq!(swapped.slice_rows(6, 12), ya);
}

#[test]
fn causality() {
    let m = toy_model(2, 5);
    let base: Vec<u32> = vec![1, 5, 9, 2, 7, 30];
    let logits = model_forward(&m, &base).unwrap();
    for t in 0..base.len() - 1 {
        let mut changed = base.clone();
        for v in changed.iter_mut().skip(t + 1) {
            *v = (*v + 11) % 32;
        }
        let other = model_forward(&m, &changed).unwrap();
        for s in 0..=t {
            assert_eq!(logits.row(s), other.row(s), "position {s} after edit past {t}");
        }
    }
}

#[test]
fn one_block_logits_compose() {
    let m = toy_model(1, 6);
    let tokens = [3u32, 1, 4, 1, 5, 9];
    let x = embed_tokens(&m, &[&tokens]).unwrap();
    let h = block_forward(&m.config, &m.blocks[0], &x, None, None).unwrap();
    assert_eq!(final_logits(&m, &h).unwrap(), model_forward(&m, &tokens).unwrap());
}

#[test]
fn perplexity_matches_reference_log_softmax() {
    let m = toy_model(2, 7);
    let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let logits = model_forward(&m, &tokens).unwrap();
    let mut nll = 0.0;
    for t in 0..tokens.len() - 1 {
        let row = logits.row(t);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        nll -= (row[tokens[t + 1] as usize].exp() / z).ln();
    }
    let reference = (nll / (tokens.len() - 1) as f64).exp();
    assert!((perplexity(&m, &tokens).unwrap() - reference).abs() < 1e-9);
}

#[test]
fn bad_tokens_and_empty_checkpoint_rejected() {
    let m = toy_model(1, 8);
    assert!(model_forward(&m, &[0, 40]).is_err());
    let r = ModelCheckpoint::new(m.config, m.vocab, vec![], m.embed.clone(), m.head.clone(), m.final_norm_gain.clone());
    assert!(r.is_err());
}
