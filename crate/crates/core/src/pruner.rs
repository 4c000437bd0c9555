//! Block-sequential optimization of sparsity allocations (and, optionally,
//! quantization clipping strengths) against a block reconstruction loss.
//!
//! Blocks are visited in order. For each one the dense-weight output on
//! the current input stream is fixed as the target, every prunable matrix
//! is ranked once by importance, and the allocation logits are trained
//! with Adam on
//!
//! ```text
//! ‖F(W, X) − F(Q(W) ⊙ M, X)‖² / ‖F(W, X)‖²  +  λ·(zeros(M)/T − target)²
//! ```
//!
//! The input to the next block is the pruned block's output.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{collect_activation_norms, ImportanceError, ImportanceRanking, Metric, RowRanking};
use crate::io::{layer_key, CalibrationSet};
use crate::model::{
    block_forward, embed_tokens, record_attention, record_block, record_mlp, BlockConfig, BlockVars, BlockWeights,
    LayerName, Layers, ModelCheckpoint, ModelError,
};
use crate::quant::{record_quantize, QuantParams};
use crate::sparsity::{
    beta_grad_to_logits, generate_mask, mask_backward_beta, sparsity_penalty, surrogate_penalty, CandidateRates,
    Granularity, PruneMask, SparsityError, SparsityParams,
};
use crate::tensor::{sigmoid, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in block {block} at step {step} (last finite loss {last_finite_loss})")]
    Divergence {
        block: usize,
        step: usize,
        last_finite_loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
}

/// Which outputs the loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Each projection's own output on dense-stream inputs.
    Layer,
    /// Attention and MLP outputs separately.
    AttnMlp,
    #[default]
    Block,
    /// Consecutive pairs of blocks jointly.
    TwoBlocks,
}

impl Scope {
    pub fn group_size(self) -> usize {
        match self {
            Scope::TwoBlocks => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Realized zero fraction with a straight-through gradient.
    #[default]
    ZeroCount,
    /// Soft rates `α` weighted by the elements they govern.
    Surrogate,
}

/// What a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Prune,
    /// Clipping strengths only; masks stay all ones.
    Quantize,
    Joint,
}

impl Task {
    pub fn prunes(self) -> bool {
        matches!(self, Task::Prune | Task::Joint)
    }

    pub fn quantizes(self) -> bool {
        matches!(self, Task::Quantize | Task::Joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps per block group.
    pub max_steps: Option<usize>,
    pub batch_sequences: usize,
    pub granularity: Granularity,
    pub metric: Metric,
    pub scope: Scope,
    pub seed: u64,
    pub sparsity_step: f64,
    pub penalty: PenaltyKind,
    /// Width (in rate units) of the initial bump of `β` around the target.
    pub init_width: f64,
    /// Compute targets from a separately propagated dense stream.
    pub two_stream: bool,
    pub converge_sparsity_tol: f64,
    pub converge_loss_tol: f64,
    pub converge_window: usize,
    pub quant_bits: u32,
    pub quant_learning_rate: f64,
    /// Initial clip logit; `sigmoid(8) ≈ 0.9997`.
    pub quant_init_logit: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.5,
            lambda: 1.0,
            learning_rate: 1e-2,
            epochs: 1,
            max_steps: None,
            batch_sequences: 8,
            granularity: Granularity::PerRow,
            metric: Metric::Wanda,
            scope: Scope::Block,
            seed: 0,
            sparsity_step: 0.01,
            penalty: PenaltyKind::ZeroCount,
            init_width: 0.05,
            two_stream: false,
            converge_sparsity_tol: 0.002,
            converge_loss_tol: 1e-4,
            converge_window: 20,
            quant_bits: 4,
            quant_learning_rate: 1e-2,
            quant_init_logit: 8.0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let bad = |m: String| Err(PruneError::Config(m));
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return bad(format!("target_sparsity {} must lie in (0, 1)", self.target_sparsity));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !(self.quant_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.epochs == 0 || self.batch_sequences == 0 || self.converge_window == 0 {
            return bad("epochs, batch_sequences and converge_window must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        if !(self.init_width > 0.0) {
            return bad("init_width must be positive".into());
        }
        if !(2..=8).contains(&self.quant_bits) {
            return bad(format!("quant_bits {} outside 2..=8", self.quant_bits));
        }
        CandidateRates::from_step(self.sparsity_step).map_err(|e| PruneError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn rates(&self) -> CandidateRates {
        CandidateRates::from_step(self.sparsity_step).expect("validated step")
    }
}

/// Adam without weight decay over one flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// `‖dense − pruned‖² / ‖dense‖²`.
pub fn relative_error(dense: &Tensor, pruned: &Tensor) -> f64 {
    let num: f64 = dense.data().iter().zip(pruned.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    num / dense.sum_sq()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub recon: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Reconstruction term plus `λ` times the squared sparsity gap.
pub fn block_loss(
    dense_out: &Tensor,
    pruned_out: &Tensor,
    masks: &[&PruneMask],
    target: f64,
    lambda: f64,
) -> Result<LossParts, PruneError> {
    if dense_out.shape() != pruned_out.shape() {
        return Err(TensorError::Shape {
            op: "block_loss",
            lhs: dense_out.shape().to_vec(),
            rhs: pruned_out.shape().to_vec(),
        }
        .into());
    }
    let recon = relative_error(dense_out, pruned_out);
    let penalty = sparsity_penalty(masks, target).value;
    Ok(LossParts {
        recon,
        penalty,
        total: recon + lambda * penalty,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub block: usize,
    pub step: usize,
    pub recon: f64,
    pub penalty: f64,
    pub achieved: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLossReport {
    /// First block of the group.
    pub block: usize,
    pub n_blocks: usize,
    /// Reconstruction loss over the whole calibration set with final masks.
    pub recon_loss: f64,
    pub sparsity_penalty: f64,
    pub block_sparsity: f64,
    /// `(blocks.i.layer, achieved)` in report order.
    pub achieved_sparsity: Vec<(String, f64)>,
    pub steps: usize,
    pub converged: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Learned state of one block group.
#[derive(Clone, Debug)]
pub struct GroupResult {
    pub masks: Vec<Layers<PruneMask>>,
    pub params: Option<Vec<Layers<SparsityParams>>>,
    pub quant: Option<Vec<Layers<QuantParams>>>,
    pub report: BlockLossReport,
    pub curve: Vec<StepRecord>,
}

fn gather_sequences(t: &Tensor, idx: &[usize], seq_len: usize) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * seq_len * cols);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * seq_len * cols..(i + 1) * seq_len * cols]);
    }
    Tensor::new(&[idx.len() * seq_len, cols], data).expect("gathered rows")
}

/// Fixed reconstruction targets of a group, over every calibration sequence.
struct Targets {
    /// Group output (block and two-block scopes).
    output: Tensor,
    /// Attention-module and MLP-module outputs plus the dense mid stream.
    attn_out: Tensor,
    mlp_in: Tensor,
    mlp_out: Tensor,
    layer_in: Layers<Tensor>,
    layer_out: Layers<Tensor>,
}

fn dense_targets(blocks: &[&BlockWeights], cfg: &BlockConfig, x: &Tensor) -> Result<Targets, PruneError> {
    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    let mut first = None;
    for (b, w) in blocks.iter().enumerate() {
        let vars = BlockVars::constants(&mut tape, w);
        let tr = record_block(&mut tape, cfg, &vars, h)?;
        if b == 0 {
            first = Some(tr.clone());
        }
        h = tr.output;
    }
    let tr = first.expect("at least one block");
    let attn_out = tape.value(tr.layer_outputs[LayerName::OProj]).clone();
    let mlp_out = tape.value(tr.layer_outputs[LayerName::DownProj]).clone();
    Ok(Targets {
        output: tape.value(h).clone(),
        attn_out,
        mlp_in: tape.value(tr.mid).clone(),
        mlp_out,
        layer_in: tr.layer_inputs.map(|_, &v| tape.value(v).clone()),
        layer_out: tr.layer_outputs.map(|_, &v| tape.value(v).clone()),
    })
}

fn relative_on_tape(tape: &mut Tape, target: &Tensor, got: Var) -> Result<Var, TensorError> {
    let t = tape.constant(target.clone());
    let d = tape.sub(t, got)?;
    let e = tape.frobenius_sq(d);
    Ok(tape.scale(e, 1.0 / target.sum_sq()))
}

/// Records the scope's reconstruction loss for the sequences `idx`.
fn record_loss(
    tape: &mut Tape,
    scope: Scope,
    cfg: &BlockConfig,
    eff: &[BlockVars],
    x: &Tensor,
    targets: &Targets,
    idx: &[usize],
) -> Result<Var, PruneError> {
    let s = cfg.seq_len;
    let pick = |t: &Tensor| gather_sequences(t, idx, s);
    match scope {
        Scope::Block | Scope::TwoBlocks => {
            let mut h = tape.constant(pick(x));
            for vars in eff {
                h = record_block(tape, cfg, vars, h)?.output;
            }
            Ok(relative_on_tape(tape, &pick(&targets.output), h)?)
        }
        Scope::AttnMlp => {
            let (mut ins, mut outs) = ([None; 7], [None; 7]);
            let xv = tape.constant(pick(x));
            record_attention(tape, cfg, &eff[0], xv, &mut ins, &mut outs)?;
            let hv = tape.constant(pick(&targets.mlp_in));
            record_mlp(tape, &eff[0], hv, &mut ins, &mut outs)?;
            let o = outs[LayerName::OProj.index()].expect("recorded");
            let d = outs[LayerName::DownProj.index()].expect("recorded");
            let a = relative_on_tape(tape, &pick(&targets.attn_out), o)?;
            let m = relative_on_tape(tape, &pick(&targets.mlp_out), d)?;
            let sum = tape.add(a, m)?;
            Ok(tape.scale(sum, 0.5))
        }
        Scope::Layer => {
            let mut total: Option<Var> = None;
            for l in LayerName::ALL {
                let xin = tape.constant(pick(&targets.layer_in[l]));
                let y = tape.matmul_t(xin, eff[0].layers[l])?;
                let e = relative_on_tape(tape, &pick(&targets.layer_out[l]), y)?;
                total = Some(match total {
                    Some(t) => tape.add(t, e)?,
                    None => e,
                });
            }
            Ok(tape.scale(total.expect("seven layers"), 1.0 / 7.0))
        }
    }
}

/// Per-layer state during optimization.
struct LayerState {
    name: String,
    weight: Tensor,
    params: Option<SparsityParams>,
    adam: Option<Adam>,
    /// Clip logits `[out × 2]` and their optimizer.
    clip: Option<(Tensor, Adam)>,
}

impl LayerState {
    fn quant_params(&self, bits: u32) -> Option<QuantParams> {
        self.clip.as_ref().map(|(theta, _)| {
            let g = theta.map(sigmoid);
            QuantParams {
                bits,
                gamma0: (0..g.rows()).map(|o| g.at(o, 0)).collect(),
                gamma1: (0..g.rows()).map(|o| g.at(o, 1)).collect(),
            }
        })
    }
}

fn current_masks(
    states: &[Vec<LayerState>],
    rankings: &[&ImportanceRanking],
) -> Result<Vec<Vec<(PruneMask, Option<crate::sparsity::MaskRecord>)>>, PruneError> {
    states
        .iter()
        .zip(rankings)
        .map(|(layers, ranking)| {
            layers
                .iter()
                .zip(LayerName::ALL)
                .map(|(st, l)| match &st.params {
                    Some(p) => {
                        let (m, rec) = generate_mask(p, &ranking.per_layer[l], &st.name)?;
                        Ok((m, Some(rec)))
                    }
                    None => {
                        let [o, i] = [st.weight.rows(), st.weight.cols()];
                        Ok((PruneMask::ones(st.name.clone(), o, i), None))
                    }
                })
                .collect()
        })
        .collect()
}

/// Optimizes one group of consecutive blocks.
///
/// `input` is the group's (pruned-stream) input and `target_input` the
/// stream the dense target is computed from; both stack whole sequences of
/// `cfg.seq_len` tokens. `first_block` only labels the output.
#[allow(clippy::too_many_arguments)]
pub fn prune_group(
    blocks: &[&BlockWeights],
    cfg: &BlockConfig,
    input: &Tensor,
    target_input: &Tensor,
    rankings: &[&ImportanceRanking],
    config: &PruneConfig,
    task: Task,
    first_block: usize,
) -> Result<GroupResult, PruneError> {
    config.validate()?;
    let started = Instant::now();
    if blocks.is_empty() || blocks.len() != rankings.len() {
        return Err(PruneError::Config("one ranking per block is required".into()));
    }
    if blocks.len() > 1 && !matches!(config.scope, Scope::TwoBlocks | Scope::Block) {
        return Err(PruneError::Config("multi-block groups need a block-level scope".into()));
    }
    let s = cfg.seq_len;
    if input.rows() % s != 0 || input.rows() != target_input.rows() {
        return Err(PruneError::Config(format!(
            "input of {} rows is not a whole number of {s}-token sequences",
            input.rows()
        )));
    }
    let n_seq = input.rows() / s;
    let rates = config.rates();
    let targets = dense_targets(blocks, cfg, target_input)?;

    let mut states: Vec<Vec<LayerState>> = blocks
        .iter()
        .enumerate()
        .map(|(b, w)| {
            LayerName::ALL
                .iter()
                .map(|&l| {
                    let weight = w.layers[l].clone();
                    let [o, i] = [weight.rows(), weight.cols()];
                    let params = task.prunes().then(|| {
                        SparsityParams::centered(
                            config.granularity,
                            rates,
                            o,
                            i,
                            config.target_sparsity,
                            config.init_width,
                        )
                    });
                    let adam = params.as_ref().map(|p| Adam::new(p.logits().numel()));
                    let clip = task
                        .quantizes()
                        .then(|| (Tensor::full(&[o, 2], config.quant_init_logit), Adam::new(o * 2)));
                    LayerState {
                        name: layer_key(first_block + b, l),
                        weight,
                        params,
                        adam,
                        clip,
                    }
                })
                .collect()
        })
        .collect();

    let batches_per_epoch = n_seq.div_ceil(config.batch_sequences);
    let mut budget = config.epochs * batches_per_epoch;
    if let Some(cap) = config.max_steps {
        budget = budget.min(cap);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (first_block as u64).wrapping_mul(0x9e37_79b9));
    let mut order: Vec<usize> = (0..n_seq).collect();
    let mut curve = Vec::with_capacity(budget);
    let mut last_finite = f64::NAN;
    let mut converged = false;
    let mut steps = 0;

    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (bi, idx) in order.chunks(config.batch_sequences).enumerate() {
            let step = epoch * batches_per_epoch + bi;
            if step >= budget {
                break 'outer;
            }
            let generated = current_masks(&states, rankings)?;

            let mut tape = Tape::new();
            let mut mask_vars = Vec::new();
            let mut clip_vars = Vec::new();
            let mut eff = Vec::with_capacity(blocks.len());
            for (b, w) in blocks.iter().enumerate() {
                let mut layers = Vec::with_capacity(7);
                for (li, st) in states[b].iter().enumerate() {
                    let wv = tape.constant(st.weight.clone());
                    let base = match &st.clip {
                        Some((theta, _)) => {
                            let g = tape.leaf(theta.map(sigmoid), true);
                            clip_vars.push(Some(g));
                            record_quantize(&mut tape, wv, g, config.quant_bits)?
                        }
                        None => {
                            clip_vars.push(None);
                            wv
                        }
                    };
                    let v = if st.params.is_some() {
                        let m = tape.leaf(generated[b][li].0.to_tensor(), true);
                        mask_vars.push(Some(m));
                        tape.mul(base, m)?
                    } else {
                        mask_vars.push(None);
                        base
                    };
                    layers.push(v);
                }
                eff.push(BlockVars {
                    layers: Layers(layers.try_into().expect("seven layers")),
                    attn_norm: tape.constant(w.attn_norm_gain.clone()),
                    mlp_norm: tape.constant(w.mlp_norm_gain.clone()),
                });
            }
            let loss = record_loss(&mut tape, config.scope, cfg, &eff, input, &targets, idx)?;
            let recon = tape.value(loss).item();
            if !recon.is_finite() {
                return Err(PruneError::Divergence {
                    block: first_block,
                    step,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = recon;
            let mut grads = tape.backward(loss)?;

            let all_masks: Vec<&PruneMask> = generated.iter().flatten().map(|(m, _)| m).collect();
            let pen = sparsity_penalty(&all_masks, config.target_sparsity);
            let surrogate = (task.prunes() && config.penalty == PenaltyKind::Surrogate).then(|| {
                let ps: Vec<&SparsityParams> = states
                    .iter()
                    .flatten()
                    .map(|st| st.params.as_ref().expect("pruning"))
                    .collect();
                surrogate_penalty(&ps, config.target_sparsity)
            });
            curve.push(StepRecord {
                block: first_block,
                step,
                recon,
                penalty: if task.prunes() { pen.value } else { 0.0 },
                achieved: pen.achieved,
            });

            let lr = cosine_lr(config.learning_rate, step, budget);
            let qlr = cosine_lr(config.quant_learning_rate, step, budget);
            let mut flat = 0;
            for (b, layers) in states.iter_mut().enumerate() {
                for (li, st) in layers.iter_mut().enumerate() {
                    if let (Some(params), Some(mv)) = (st.params.as_mut(), mask_vars[flat]) {
                        let mut upstream = grads.take(mv).unwrap_or_else(|| Tensor::zeros(st.weight.shape()));
                        if config.penalty == PenaltyKind::ZeroCount {
                            let extra = config.lambda * pen.mask_grad;
                            upstream.data_mut().iter_mut().for_each(|g| *g += extra);
                        }
                        let (_, record) = &generated[b][li];
                        let record = record.as_ref().expect("pruning layer has a record");
                        let mut beta_grads =
                            mask_backward_beta(record, params, &rankings[b].per_layer[LayerName::ALL[li]], &upstream)?;
                        if let Some((_, sg)) = &surrogate {
                            for (g, extra) in beta_grads.iter_mut().zip(&sg[flat]) {
                                for (a, e) in g.iter_mut().zip(extra) {
                                    *a += config.lambda * e;
                                }
                            }
                        }
                        let logit_grad: Vec<f64> = record
                            .betas()
                            .iter()
                            .zip(&beta_grads)
                            .flat_map(|(beta, g)| beta_grad_to_logits(beta, g))
                            .collect();
                        if logit_grad.iter().any(|g| !g.is_finite()) {
                            return Err(PruneError::Divergence {
                                block: first_block,
                                step,
                                last_finite_loss: last_finite,
                            });
                        }
                        let adam = st.adam.as_mut().expect("optimizer per allocation");
                        adam.step(params.logits_mut().data_mut(), &logit_grad, lr);
                    }
                    if let (Some((theta, adam)), Some(gv)) = (st.clip.as_mut(), clip_vars[flat]) {
                        if let Some(gg) = grads.take(gv) {
                            let chained: Vec<f64> = gg
                                .data()
                                .iter()
                                .zip(theta.data())
                                .map(|(g, &t)| {
                                    let s = sigmoid(t);
                                    g * s * (1.0 - s)
                                })
                                .collect();
                            adam.step(theta.data_mut(), &chained, qlr);
                        }
                    }
                    flat += 1;
                }
            }
            steps = step + 1;

            let w = config.converge_window;
            if task.prunes() && curve.len() >= 2 * w {
                let mean = |r: &[StepRecord]| r.iter().map(|c| c.recon).sum::<f64>() / r.len() as f64;
                let n = curve.len();
                let (prev, last) = (mean(&curve[n - 2 * w..n - w]), mean(&curve[n - w..]));
                let latest = sparsity_after_update(&states, rankings)?;
                if (latest - config.target_sparsity).abs() <= config.converge_sparsity_tol
                    && ((last - prev) / prev).abs() < config.converge_loss_tol
                {
                    converged = true;
                    break 'outer;
                }
            }
        }
    }

    let final_masks = current_masks(&states, rankings)?;
    let masks: Vec<Layers<PruneMask>> = final_masks
        .into_iter()
        .map(|layers| Layers(layers.into_iter().map(|(m, _)| m).collect::<Vec<_>>().try_into().expect("seven")))
        .collect();
    let quant: Option<Vec<Layers<QuantParams>>> = task.quantizes().then(|| {
        states
            .iter()
            .map(|layers| {
                Layers(
                    layers
                        .iter()
                        .map(|st| st.quant_params(config.quant_bits).expect("clip state"))
                        .collect::<Vec<_>>()
                        .try_into()
                        .expect("seven"),
                )
            })
            .collect()
    });
    let params = task.prunes().then(|| {
        states
            .iter()
            .map(|layers| {
                Layers(
                    layers
                        .iter()
                        .map(|st| st.params.clone().expect("pruning"))
                        .collect::<Vec<_>>()
                        .try_into()
                        .expect("seven"),
                )
            })
            .collect()
    });

    let all: Vec<&PruneMask> = masks.iter().flat_map(|l| l.0.iter()).collect();
    let pen = sparsity_penalty(&all, config.target_sparsity);
    let everything: Vec<usize> = (0..n_seq).collect();
    let recon_loss = group_recon(blocks, cfg, config.scope, input, &targets, &masks, quant.as_deref(), &everything)?;
    let achieved_sparsity = masks
        .iter()
        .flat_map(|l| l.0.iter())
        .map(|m| (m.layer().to_string(), m.achieved_sparsity()))
        .collect();
    Ok(GroupResult {
        report: BlockLossReport {
            block: first_block,
            n_blocks: blocks.len(),
            recon_loss,
            sparsity_penalty: if task.prunes() { pen.value } else { 0.0 },
            block_sparsity: pen.achieved,
            achieved_sparsity,
            steps,
            converged,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
        masks,
        params,
        quant,
        curve,
    })
}

fn sparsity_after_update(states: &[Vec<LayerState>], rankings: &[&ImportanceRanking]) -> Result<f64, PruneError> {
    let g = current_masks(states, rankings)?;
    let all: Vec<&PruneMask> = g.iter().flatten().map(|(m, _)| m).collect();
    Ok(sparsity_penalty(&all, 0.0).achieved)
}

/// Scope loss of fixed masks (and clips) without gradients.
#[allow(clippy::too_many_arguments)]
fn group_recon(
    blocks: &[&BlockWeights],
    cfg: &BlockConfig,
    scope: Scope,
    input: &Tensor,
    targets: &Targets,
    masks: &[Layers<PruneMask>],
    quant: Option<&[Layers<QuantParams>]>,
    idx: &[usize],
) -> Result<f64, PruneError> {
    let mut tape = Tape::new();
    let mut eff = Vec::new();
    for (b, w) in blocks.iter().enumerate() {
        let e = crate::model::effective_block(w, Some(&masks[b]), quant.map(|q| &q[b]))?;
        eff.push(BlockVars::constants(&mut tape, &e));
    }
    let loss = record_loss(&mut tape, scope, cfg, &eff, input, targets, idx)?;
    Ok(tape.value(loss).item())
}

/// Ranks every projection of `block` on its current input stream.
pub fn rank_block(
    m: &ModelCheckpoint,
    block: usize,
    input: &Tensor,
    seq_len: usize,
    metric: Metric,
) -> Result<ImportanceRanking, PruneError> {
    let norms = collect_activation_norms(m, block, input, seq_len)?;
    Ok(ImportanceRanking::for_block(&m.blocks[block].layers, &norms, metric)?)
}

/// Masks, clips and reports for a whole model.
#[derive(Clone, Debug)]
pub struct PrunedModel {
    pub masks: Vec<Layers<PruneMask>>,
    pub quant: Option<Vec<Layers<QuantParams>>>,
    pub reports: Vec<BlockLossReport>,
    pub curve: Vec<StepRecord>,
}

impl PrunedModel {
    pub fn global_sparsity(&self) -> f64 {
        let all: Vec<&PruneMask> = self.masks.iter().flat_map(|l| l.0.iter()).collect();
        sparsity_penalty(&all, 0.0).achieved
    }
}

/// Runs the block-sequential loop over every block of `m`.
pub fn prune_model(
    m: &ModelCheckpoint,
    calib: &CalibrationSet,
    config: &PruneConfig,
    task: Task,
) -> Result<PrunedModel, PruneError> {
    config.validate()?;
    let s = calib.seq_len();
    let cfg = BlockConfig { seq_len: s, ..m.config };
    let mut x_p = embed_tokens(m, &calib.sequences())?;
    let mut x_fp = config.two_stream.then(|| x_p.clone());
    let group = config.scope.group_size();
    let mut out = PrunedModel {
        masks: Vec::new(),
        quant: task.quantizes().then(Vec::new),
        reports: Vec::new(),
        curve: Vec::new(),
    };
    let mut start = 0;
    while start < m.n_blocks() {
        let end = (start + group).min(m.n_blocks());
        let mut rankings = Vec::new();
        let mut stream = x_p.clone();
        for b in start..end {
            rankings.push(rank_block(m, b, &stream, s, config.metric)?);
            if b + 1 < end {
                stream = block_forward(&cfg, &m.blocks[b], &stream, None, None)?;
            }
        }
        let blocks: Vec<&BlockWeights> = m.blocks[start..end].iter().collect();
        let rank_refs: Vec<&ImportanceRanking> = rankings.iter().collect();
        let target_input = x_fp.as_ref().unwrap_or(&x_p);
        let result = prune_group(&blocks, &cfg, &x_p, target_input, &rank_refs, config, task, start)?;
        for (i, b) in (start..end).enumerate() {
            let q = result.quant.as_ref().map(|q| &q[i]);
            x_p = block_forward(&cfg, &m.blocks[b], &x_p, Some(&result.masks[i]), q)?;
            if let Some(xf) = x_fp.as_mut() {
                *xf = block_forward(&cfg, &m.blocks[b], xf, None, None)?;
            }
        }
        out.masks.extend(result.masks);
        if let (Some(all), Some(q)) = (out.quant.as_mut(), result.quant) {
            all.extend(q);
        }
        out.reports.push(result.report);
        out.curve.extend(result.curve);
        start = end;
    }
    Ok(out)
}

/// Prunes `⌊in·(o+1)·rate⌋ − ⌊in·o·rate⌋` lowest-ranked weights from row
/// `o`, so every row loses `⌊in·rate⌋` or `⌈in·rate⌉` and the layer loses
/// exactly `⌊out·in·rate⌋`.
pub fn uniform_mask(ranking: &RowRanking, rate: f64, layer: &str) -> PruneMask {
    let (out, inn) = (ranking.out_features(), ranking.in_features());
    let mut mask = PruneMask::ones(layer, out, inn);
    let cum = |o: usize| ((inn * o) as f64 * rate).floor() as usize;
    for o in 0..out {
        let k = (cum(o + 1) - cum(o)).min(inn);
        for &c in &ranking.row(o)[..k] {
            mask.set(o, c as usize, false);
        }
    }
    mask
}

pub fn uniform_masks(ranking: &ImportanceRanking, rate: f64, block: usize) -> Layers<PruneMask> {
    Layers::from_fn(|l| uniform_mask(&ranking.per_layer[l], rate, &layer_key(block, l)))
}

/// Same rate everywhere, no learning; rankings follow the pruned stream.
pub fn uniform_baseline(
    m: &ModelCheckpoint,
    calib: &CalibrationSet,
    rate: f64,
    metric: Metric,
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<Vec<Layers<PruneMask>>, PruneError> {
    let s = calib.seq_len();
    let cfg = BlockConfig { seq_len: s, ..m.config };
    let mut x = embed_tokens(m, &calib.sequences())?;
    let mut out = Vec::with_capacity(m.n_blocks());
    for b in 0..m.n_blocks() {
        let ranking = rank_block(m, b, &x, s, metric)?;
        let masks = uniform_masks(&ranking, rate, b);
        x = block_forward(&cfg, &m.blocks[b], &x, Some(&masks), quant.map(|q| &q[b]))?;
        out.push(masks);
    }
    Ok(out)
}

/// Final hidden stream of the model on `calib`, optionally masked.
pub fn hidden_states(
    m: &ModelCheckpoint,
    calib: &CalibrationSet,
    masks: Option<&[Layers<PruneMask>]>,
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<Tensor, PruneError> {
    let cfg = BlockConfig {
        seq_len: calib.seq_len(),
        ..m.config
    };
    let mut x = embed_tokens(m, &calib.sequences())?;
    for b in 0..m.n_blocks() {
        x = block_forward(&cfg, &m.blocks[b], &x, masks.map(|ms| &ms[b]), quant.map(|q| &q[b]))?;
    }
    Ok(x)
}

/// Relative error of the final hidden stream against the dense model.
pub fn model_recon_error(
    m: &ModelCheckpoint,
    calib: &CalibrationSet,
    masks: &[Layers<PruneMask>],
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<f64, PruneError> {
    let dense = hidden_states(m, calib, None, None)?;
    let pruned = hidden_states(m, calib, Some(masks), quant)?;
    Ok(relative_error(&dense, &pruned))
}

/// Block-output relative error of fixed masks on a given block input.
pub fn block_recon_error(
    cfg: &BlockConfig,
    w: &BlockWeights,
    input: &Tensor,
    masks: &Layers<PruneMask>,
    quant: Option<&Layers<QuantParams>>,
) -> Result<f64, PruneError> {
    let dense = block_forward(cfg, w, input, None, None)?;
    let pruned = block_forward(cfg, w, input, Some(masks), quant)?;
    Ok(relative_error(&dense, &pruned))
}

/// Checkpoint whose prunable weights are `Q(W) ⊙ M`.
pub fn apply_masks(
    m: &ModelCheckpoint,
    masks: &[Layers<PruneMask>],
    quant: Option<&[Layers<QuantParams>]>,
) -> Result<ModelCheckpoint, PruneError> {
    let mut out = m.clone();
    for (b, block) in out.blocks.iter_mut().enumerate() {
        *block = crate::model::effective_block(block, Some(&masks[b]), quant.map(|q| &q[b]))?;
    }
    Ok(out)
}
