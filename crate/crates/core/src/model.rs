//! LLaMA-style pre-norm transformer block and a stack of them.
//!
//! A block maps `x ↦ h + MLP(RMSNorm(h))` with `h = x + Attn(RMSNorm(x))`
//! and `MLP(z) = down · (silu(gate · z) ⊙ (up · z))`. Attention is causal and
//! multi-head. Positions are encoded by fixed sinusoids added to the token
//! embedding, not by rotary embeddings.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{self, QuantParams};
use crate::sparsity::PruneMask;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask for {layer} has shape {got:?}, weight is {expected:?}")]
    Mask {
        layer: LayerName,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// The seven prunable projections of a block, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerName {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl LayerName {
    pub const ALL: [LayerName; 7] = [
        LayerName::QProj,
        LayerName::KProj,
        LayerName::VProj,
        LayerName::OProj,
        LayerName::GateProj,
        LayerName::UpProj,
        LayerName::DownProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerName::QProj => "q_proj",
            LayerName::KProj => "k_proj",
            LayerName::VProj => "v_proj",
            LayerName::OProj => "o_proj",
            LayerName::GateProj => "gate_proj",
            LayerName::UpProj => "up_proj",
            LayerName::DownProj => "down_proj",
        }
    }

    pub fn parse(s: &str) -> Option<LayerName> {
        LayerName::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        matches!(self, LayerName::QProj | LayerName::KProj | LayerName::VProj | LayerName::OProj)
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layers<T>(pub [T; 7]);

impl<T> Layers<T> {
    pub fn from_fn(mut f: impl FnMut(LayerName) -> T) -> Self {
        Layers(LayerName::ALL.map(&mut f))
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(LayerName) -> Result<T, E>) -> Result<Self, E> {
        let mut out = Vec::with_capacity(7);
        for l in LayerName::ALL {
            out.push(f(l)?);
        }
        Ok(Layers(out.try_into().ok().expect("seven layers")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerName, &T)> {
        LayerName::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(LayerName, &T) -> U) -> Layers<U> {
        Layers::from_fn(|l| f(l, &self[l]))
    }
}

impl<T> Index<LayerName> for Layers<T> {
    type Output = T;
    fn index(&self, l: LayerName) -> &T {
        &self.0[l.index()]
    }
}

impl<T> IndexMut<LayerName> for Layers<T> {
    fn index_mut(&mut self, l: LayerName) -> &mut T {
        &mut self.0[l.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Tokens per calibration sequence.
    pub seq_len: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 172,
            seq_len: 128,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return Err(ModelError::Config(format!("all dimensions must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `[out, in]` of a prunable layer.
    pub fn layer_shape(&self, layer: LayerName) -> [usize; 2] {
        match layer {
            LayerName::GateProj | LayerName::UpProj => [self.d_ff, self.d_model],
            LayerName::DownProj => [self.d_model, self.d_ff],
            _ => [self.d_model, self.d_model],
        }
    }

    /// Total prunable weights of one block.
    pub fn block_params(&self) -> usize {
        LayerName::ALL
            .iter()
            .map(|&l| {
                let [o, i] = self.layer_shape(l);
                o * i
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub layers: Layers<Tensor>,
    pub attn_norm_gain: Tensor,
    pub mlp_norm_gain: Tensor,
}

impl BlockWeights {
    pub fn layer(&self, l: LayerName) -> &Tensor {
        &self.layers[l]
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<(), String> {
        for (l, w) in self.layers.iter() {
            if w.shape() != cfg.layer_shape(l) {
                return Err(format!("{l} has shape {:?}, expected {:?}", w.shape(), cfg.layer_shape(l)));
            }
        }
        for (name, g) in [("attn_norm_gain", &self.attn_norm_gain), ("mlp_norm_gain", &self.mlp_norm_gain)] {
            if g.shape() != [cfg.d_model] {
                return Err(format!("{name} has shape {:?}, expected [{}]", g.shape(), cfg.d_model));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: BlockConfig,
    pub vocab: usize,
    pub blocks: Vec<BlockWeights>,
    pub embed: Tensor,
    pub head: Tensor,
    pub final_norm_gain: Tensor,
}

impl ModelCheckpoint {
    pub fn new(
        config: BlockConfig,
        vocab: usize,
        blocks: Vec<BlockWeights>,
        embed: Tensor,
        head: Tensor,
        final_norm_gain: Tensor,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if blocks.is_empty() {
            return Err(ModelError::Config("checkpoint needs at least one block".into()));
        }
        if vocab == 0 {
            return Err(ModelError::Config("vocabulary must be non-empty".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            b.validate(&config)
                .map_err(|e| ModelError::Config(format!("block {i}: {e}")))?;
        }
        let d = config.d_model;
        for (name, t, shape) in [
            ("embed", &embed, vec![vocab, d]),
            ("head", &head, vec![vocab, d]),
            ("final_norm_gain", &final_norm_gain, vec![d]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self {
            config,
            vocab,
            blocks,
            embed,
            head,
            final_norm_gain,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn prunable_params(&self) -> usize {
        self.config.block_params() * self.blocks.len()
    }
}

/// Tape handles for the weights a block forward consumes.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub layers: Layers<Var>,
    pub attn_norm: Var,
    pub mlp_norm: Var,
}

impl BlockVars {
    /// Records every weight of `w` as a constant.
    pub fn constants(tape: &mut Tape, w: &BlockWeights) -> Self {
        Self {
            layers: Layers::from_fn(|l| tape.constant(w.layers[l].clone())),
            attn_norm: tape.constant(w.attn_norm_gain.clone()),
            mlp_norm: tape.constant(w.mlp_norm_gain.clone()),
        }
    }
}

/// Intermediate handles of a recorded block forward.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Residual stream after the attention half.
    pub mid: Var,
    pub output: Var,
    /// Input seen by each projection.
    pub layer_inputs: Layers<Var>,
    /// Output of each projection.
    pub layer_outputs: Layers<Var>,
}

/// Attention half: returns `x + o_proj(attn(q, k, v))`.
pub fn record_attention(
    tape: &mut Tape,
    cfg: &BlockConfig,
    w: &BlockVars,
    x: Var,
    inputs: &mut [Option<Var>; 7],
    outputs: &mut [Option<Var>; 7],
) -> Result<Var, ModelError> {
    let z = tape.rms_norm(x, w.attn_norm)?;
    let q = tape.matmul_t(z, w.layers[LayerName::QProj])?;
    let k = tape.matmul_t(z, w.layers[LayerName::KProj])?;
    let v = tape.matmul_t(z, w.layers[LayerName::VProj])?;
    let a = tape.causal_attention(q, k, v, cfg.n_heads, cfg.seq_len)?;
    let o = tape.matmul_t(a, w.layers[LayerName::OProj])?;
    for (l, i, out) in [
        (LayerName::QProj, z, q),
        (LayerName::KProj, z, k),
        (LayerName::VProj, z, v),
        (LayerName::OProj, a, o),
    ] {
        inputs[l.index()] = Some(i);
        outputs[l.index()] = Some(out);
    }
    Ok(tape.add(x, o)?)
}

/// MLP half: returns `h + down(silu(gate z) ⊙ up z)` with `z = RMSNorm(h)`.
pub fn record_mlp(
    tape: &mut Tape,
    w: &BlockVars,
    h: Var,
    inputs: &mut [Option<Var>; 7],
    outputs: &mut [Option<Var>; 7],
) -> Result<Var, ModelError> {
    let z = tape.rms_norm(h, w.mlp_norm)?;
    let g = tape.matmul_t(z, w.layers[LayerName::GateProj])?;
    let u = tape.matmul_t(z, w.layers[LayerName::UpProj])?;
    let sg = tape.silu(g);
    let m = tape.mul(sg, u)?;
    let d = tape.matmul_t(m, w.layers[LayerName::DownProj])?;
    for (l, i, out) in [
        (LayerName::GateProj, z, g),
        (LayerName::UpProj, z, u),
        (LayerName::DownProj, m, d),
    ] {
        inputs[l.index()] = Some(i);
        outputs[l.index()] = Some(out);
    }
    Ok(tape.add(h, d)?)
}

/// Records a full block forward on `tape`.
pub fn record_block(tape: &mut Tape, cfg: &BlockConfig, w: &BlockVars, x: Var) -> Result<BlockTrace, ModelError> {
    let xs = tape.value(x);
    if xs.shape().len() != 2 || xs.cols() != cfg.d_model {
        return Err(TensorError::Shape {
            op: "block_forward",
            lhs: xs.shape().to_vec(),
            rhs: vec![cfg.d_model],
        }
        .into());
    }
    let mut inputs = [None; 7];
    let mut outputs = [None; 7];
    let mid = record_attention(tape, cfg, w, x, &mut inputs, &mut outputs)?;
    let output = record_mlp(tape, w, mid, &mut inputs, &mut outputs)?;
    Ok(BlockTrace {
        mid,
        output,
        layer_inputs: Layers(inputs.map(|v| v.expect("every layer recorded"))),
        layer_outputs: Layers(outputs.map(|v| v.expect("every layer recorded"))),
    })
}

/// The weight a projection actually uses: `quantize(W) ⊙ mask`.
pub fn effective_weight(
    w: &Tensor,
    layer: LayerName,
    mask: Option<&PruneMask>,
    quant: Option<&QuantParams>,
) -> Result<Tensor, ModelError> {
    let mut out = match quant {
        Some(q) => quant::quantize(w, q)?.dequantized,
        None => w.clone(),
    };
    if let Some(m) = mask {
        if [m.out_features(), m.in_features()] != w.shape() {
            return Err(ModelError::Mask {
                layer,
                expected: w.shape().to_vec(),
                got: vec![m.out_features(), m.in_features()],
            });
        }
        for (v, keep) in out.data_mut().iter_mut().zip(m.iter_bits()) {
            *v *= if keep { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Effective weights of every projection in a block.
pub fn effective_block(
    w: &BlockWeights,
    masks: Option<&Layers<PruneMask>>,
    quant: Option<&Layers<QuantParams>>,
) -> Result<BlockWeights, ModelError> {
    let layers = Layers::try_from_fn(|l| {
        effective_weight(&w.layers[l], l, masks.map(|m| &m[l]), quant.map(|q| &q[l]))
    })?;
    Ok(BlockWeights {
        layers,
        attn_norm_gain: w.attn_norm_gain.clone(),
        mlp_norm_gain: w.mlp_norm_gain.clone(),
    })
}

/// Block forward without gradient tracking.
///
/// `x` is `[n_seq·seq_len × d_model]` with whole sequences stacked; every
/// prunable matrix is replaced by `quantize(W) ⊙ mask` when those are given.
pub fn block_forward(
    cfg: &BlockConfig,
    w: &BlockWeights,
    x: &Tensor,
    masks: Option<&Layers<PruneMask>>,
    quant: Option<&Layers<QuantParams>>,
) -> Result<Tensor, ModelError> {
    let eff = if masks.is_some() || quant.is_some() {
        effective_block(w, masks, quant)?
    } else {
        w.clone()
    };
    let mut tape = Tape::new();
    let vars = BlockVars::constants(&mut tape, &eff);
    let xv = tape.constant(x.clone());
    let trace = record_block(&mut tape, cfg, &vars, xv)?;
    Ok(tape.value(trace.output).clone())
}

pub fn sinusoidal_position(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Embeds equal-length token sequences into a stacked `[n·len × d]` stream.
pub fn embed_tokens(m: &ModelCheckpoint, seqs: &[&[u32]]) -> Result<Tensor, ModelError> {
    let d = m.config.d_model;
    let len = seqs.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(seqs.len() * len * d);
    let pe: Vec<Vec<f64>> = (0..len).map(|p| sinusoidal_position(p, d)).collect();
    for s in seqs {
        if s.len() != len {
            return Err(ModelError::Config("sequences in a batch must share one length".into()));
        }
        for (pos, &tok) in s.iter().enumerate() {
            if tok as usize >= m.vocab {
                return Err(ModelError::Token { id: tok, vocab: m.vocab });
            }
            let row = m.embed.row(tok as usize);
            data.extend(row.iter().zip(&pe[pos]).map(|(e, p)| e + p));
        }
    }
    Ok(Tensor::new(&[seqs.len() * len, d], data)?)
}

/// Token logits `[len × vocab]` for one sequence, optionally with masks
/// (and fake quantization) applied per block.
pub fn model_forward_masked(
    m: &ModelCheckpoint,
    tokens: &[u32],
    masks: Option<&[Layers<PruneMask>]>,
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<Tensor, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Config("empty token sequence".into()));
    }
    let cfg = BlockConfig {
        seq_len: tokens.len(),
        ..m.config
    };
    let mut x = embed_tokens(m, &[tokens])?;
    for (l, block) in m.blocks.iter().enumerate() {
        x = block_forward(&cfg, block, &x, masks.map(|ms| &ms[l]), quant.map(|q| &q[l]))?;
    }
    final_logits(m, &x)
}

pub fn model_forward(m: &ModelCheckpoint, tokens: &[u32]) -> Result<Tensor, ModelError> {
    model_forward_masked(m, tokens, None, None)
}

/// Final norm and output head applied to a hidden stream.
pub fn final_logits(m: &ModelCheckpoint, hidden: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let g = tape.constant(m.final_norm_gain.clone());
    let head = tape.constant(m.head.clone());
    let z = tape.rms_norm(h, g)?;
    let logits = tape.matmul_t(z, head)?;
    Ok(tape.value(logits).clone())
}

/// `exp` of the mean next-token negative log-likelihood of `logits[t]`
/// against `tokens[t+1]`.
pub fn perplexity_from_logits(logits: &Tensor, tokens: &[u32]) -> f64 {
    let n = tokens.len() - 1;
    let mut nll = 0.0;
    for t in 0..n {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[tokens[t + 1] as usize];
    }
    (nll / n as f64).exp()
}

pub fn perplexity(m: &ModelCheckpoint, tokens: &[u32]) -> Result<f64, ModelError> {
    perplexity_masked(m, tokens, None, None)
}

pub fn perplexity_masked(
    m: &ModelCheckpoint,
    tokens: &[u32],
    masks: Option<&[Layers<PruneMask>]>,
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<f64, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::Config("perplexity needs at least two tokens".into()));
    }
    let logits = model_forward_masked(m, tokens, masks, quant)?;
    Ok(perplexity_from_logits(&logits, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        let bad = BlockConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layer_names_round_trip() {
        for l in LayerName::ALL {
            assert_eq!(LayerName::parse(l.as_str()), Some(l));
        }
        assert_eq!(LayerName::parse("lm_head"), None);
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let v = 13;
        let logits = Tensor::zeros(&[5, v]);
        let ppl = perplexity_from_logits(&logits, &[0, 3, 7, 1, 12]);
        assert!((ppl - v as f64).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_has_unit_perplexity() {
        let tokens = [1u32, 2, 0, 1];
        let mut logits = Tensor::full(&[4, 3], -1e6);
        for t in 0..3 {
            logits.data_mut()[t * 3 + tokens[t + 1] as usize] = 0.0;
        }
        assert!((perplexity_from_logits(&logits, &tokens) - 1.0).abs() < 1e-12);
    }
}
