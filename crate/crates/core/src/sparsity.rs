//! Learnable sparsity allocation over a grid of candidate pruning rates.
//!
//! Each allocation unit (one output row, or a whole layer) owns a point `β`
//! on the probability simplex over the rates `p_d = d/D`, `d = 1..D`. Its
//! effective rate is `α = Σ β_d p_d`. Weights of a row are sorted by
//! importance and split into `D` rank bins; bin `k` covers ranks
//! `⌊in·k/D⌋ .. ⌊in·(k+1)/D⌋` and is pruned with probability
//! `Σ_{d>k} β_d`. The mask drops every bin whose probability reaches `α`.
//!
//! `β` is a softmax over `D − 1` free logits with the last slot held at
//! zero, so the most important bin can never be pruned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::RowRanking;
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("sparsity step {0} must divide 1 into at least two rates")]
    Step(f64),
    #[error("coefficients are not on the simplex: {0}")]
    Simplex(String),
    #[error("rank {rank} out of range for row width {width}")]
    Rank { rank: usize, width: usize },
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRow,
    PerLayer,
}

impl Granularity {
    pub fn units(self, out_features: usize) -> usize {
        match self {
            Granularity::PerRow => out_features,
            Granularity::PerLayer => 1,
        }
    }

    pub fn unit_of_row(self, row: usize) -> usize {
        match self {
            Granularity::PerRow => row,
            Granularity::PerLayer => 0,
        }
    }
}

/// The rate grid `p_d = d/D` for `d = 1..=D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRates {
    count: usize,
}

impl CandidateRates {
    pub fn with_count(count: usize) -> Result<Self, SparsityError> {
        if count < 2 {
            return Err(SparsityError::Step(1.0 / count.max(1) as f64));
        }
        Ok(Self { count })
    }

    /// Grid with spacing `step`; `1/step` must be a whole number.
    pub fn from_step(step: f64) -> Result<Self, SparsityError> {
        if !(step > 0.0 && step < 1.0) {
            return Err(SparsityError::Step(step));
        }
        let d = (1.0 / step).round();
        if ((1.0 / step) - d).abs() > 1e-6 * d {
            return Err(SparsityError::Step(step));
        }
        Self::with_count(d as usize).map_err(|_| SparsityError::Step(step))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn step(&self) -> f64 {
        1.0 / self.count as f64
    }

    /// `p_d`; `rate(0) = 0` is the implicit lower boundary.
    pub fn rate(&self, d: usize) -> f64 {
        d as f64 / self.count as f64
    }

    /// `p_1..=p_D`.
    pub fn rates(&self) -> Vec<f64> {
        (1..=self.count).map(|d| self.rate(d)).collect()
    }

    /// First rank of bin `k`: `⌊width·k/D⌋`, so `boundary(D) = width`.
    pub fn boundary(&self, k: usize, width: usize) -> usize {
        width * k / self.count
    }

    /// Bin containing `rank` (empty bins are skipped).
    pub fn bin_of(&self, rank: usize, width: usize) -> usize {
        ((rank + 1) * self.count).div_ceil(width) - 1
    }
}

/// `β` from free logits: softmax over `D − 1` slots, last slot pinned to 0.
pub fn beta_from_logits(logits: &[f64]) -> Vec<f64> {
    let mut beta = logits.to_vec();
    softmax_in_place(&mut beta);
    beta.push(0.0);
    beta
}

fn check_simplex(beta: &[f64], rates: &CandidateRates) -> Result<(), SparsityError> {
    if beta.len() != rates.count() {
        return Err(SparsityError::Simplex(format!(
            "{} coefficients for {} rates",
            beta.len(),
            rates.count()
        )));
    }
    if let Some(b) = beta.iter().find(|b| !(**b >= 0.0)) {
        return Err(SparsityError::Simplex(format!("negative or non-finite entry {b}")));
    }
    let total: f64 = beta.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SparsityError::Simplex(format!("entries sum to {total}")));
    }
    if beta[beta.len() - 1] != 0.0 {
        return Err(SparsityError::Simplex("last coefficient must be zero".into()));
    }
    Ok(())
}

/// `α = Σ β_d p_d`.
pub fn effective_sparsity(beta: &[f64], rates: &CandidateRates) -> Result<f64, SparsityError> {
    check_simplex(beta, rates)?;
    Ok(alpha_unchecked(beta, rates))
}

fn alpha_unchecked(beta: &[f64], rates: &CandidateRates) -> f64 {
    beta.iter().enumerate().map(|(i, b)| b * rates.rate(i + 1)).sum()
}

/// `Σ_{d>k} β_d` for every bin `k = 0..D`, accumulated from the top so the
/// sequence is non-increasing in floating point too.
fn tail_sums(beta: &[f64]) -> Vec<f64> {
    let mut tails = vec![0.0; beta.len()];
    let mut acc = 0.0;
    for k in (0..beta.len()).rev() {
        acc += beta[k];
        tails[k] = acc;
    }
    tails
}

/// Pruning probability of the weight at `rank` in a row of `width`.
pub fn element_prune_prob(
    beta: &[f64],
    rates: &CandidateRates,
    rank: usize,
    width: usize,
) -> Result<f64, SparsityError> {
    check_simplex(beta, rates)?;
    if rank >= width {
        return Err(SparsityError::Rank { rank, width });
    }
    let k = rates.bin_of(rank, width);
    Ok(beta[k..].iter().rev().sum())
}

/// Number of leading ranks pruned for one unit's `β`.
pub fn pruned_prefix(beta: &[f64], rates: &CandidateRates, width: usize) -> usize {
    let alpha = alpha_unchecked(beta, rates);
    let tails = tail_sums(beta);
    match tails.iter().rposition(|&t| t >= alpha) {
        Some(k) => rates.boundary(k + 1, width),
        None => 0,
    }
}

/// Bit-packed keep/prune mask of one weight matrix (1 = keep).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    layer: String,
    out_features: usize,
    in_features: usize,
    words: Vec<u64>,
}

impl PruneMask {
    pub fn ones(layer: impl Into<String>, out_features: usize, in_features: usize) -> Self {
        let n = out_features * in_features;
        let mut words = vec![u64::MAX; n.div_ceil(64)];
        if n % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (n % 64)) - 1;
            }
        }
        Self {
            layer: layer.into(),
            out_features,
            in_features,
            words,
        }
    }

    pub fn zeros(layer: impl Into<String>, out_features: usize, in_features: usize) -> Self {
        let n = out_features * in_features;
        Self {
            layer: layer.into(),
            out_features,
            in_features,
            words: vec![0; n.div_ceil(64)],
        }
    }

    /// Mask keeping every nonzero entry of `t`.
    pub fn from_tensor(layer: impl Into<String>, t: &Tensor) -> Self {
        let mut m = Self::zeros(layer, t.rows(), t.cols());
        for (i, &v) in t.data().iter().enumerate() {
            if v != 0.0 {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        m
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn set_layer(&mut self, layer: impl Into<String>) {
        self.layer = layer.into();
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn len(&self) -> usize {
        self.out_features * self.in_features
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, o: usize, i: usize) -> bool {
        let idx = o * self.in_features + i;
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn set(&mut self, o: usize, i: usize, keep: bool) {
        let idx = o * self.in_features + i;
        if keep {
            self.words[idx / 64] |= 1 << (idx % 64);
        } else {
            self.words[idx / 64] &= !(1 << (idx % 64));
        }
    }

    /// Keep flags in row-major order.
    pub fn iter_bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.words[i / 64] >> (i % 64) & 1 == 1)
    }

    pub fn zero_count(&self) -> usize {
        self.len() - self.words.iter().map(|w| w.count_ones() as usize).sum::<usize>()
    }

    pub fn row_zero_count(&self, o: usize) -> usize {
        (0..self.in_features).filter(|&i| !self.get(o, i)).count()
    }

    pub fn achieved_sparsity(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.zero_count() as f64 / self.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.iter_bits().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.out_features, self.in_features], data).expect("mask dimensions")
    }

    /// Row-major bits packed LSB-first into bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = vec![0u8; n.div_ceil(8)];
        for (i, keep) in self.iter_bits().enumerate() {
            if keep {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bytes(
        layer: impl Into<String>,
        out_features: usize,
        in_features: usize,
        bytes: &[u8],
    ) -> Option<Self> {
        let n = out_features * in_features;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        let mut m = Self::zeros(layer, out_features, in_features);
        for i in 0..n {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Some(m)
    }
}

/// Learnable allocation for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityParams {
    granularity: Granularity,
    rates: CandidateRates,
    out_features: usize,
    in_features: usize,
    /// `[units × (D − 1)]`.
    logits: Tensor,
    version: u64,
}

impl SparsityParams {
    /// Logits whose `β` is a narrow bump over the rates around `center`.
    ///
    /// With a small `width` every unit starts at the uniform allocation
    /// `center`, rounded to the grid.
    pub fn centered(
        granularity: Granularity,
        rates: CandidateRates,
        out_features: usize,
        in_features: usize,
        center: f64,
        width: f64,
    ) -> Self {
        let free = rates.count() - 1;
        let row: Vec<f64> = (1..=free)
            .map(|d| {
                let z = (rates.rate(d) - center) / width;
                -0.5 * z * z
            })
            .collect();
        let units = granularity.units(out_features);
        let data = row.iter().copied().cycle().take(units * free).collect();
        Self {
            granularity,
            rates,
            out_features,
            in_features,
            logits: Tensor::new(&[units, free], data).expect("logit dimensions"),
            version: 0,
        }
    }

    pub fn from_logits(
        granularity: Granularity,
        rates: CandidateRates,
        out_features: usize,
        in_features: usize,
        logits: Tensor,
    ) -> Result<Self, SparsityError> {
        let expect = [granularity.units(out_features), rates.count() - 1];
        if logits.shape() != expect {
            return Err(SparsityError::Usage(format!(
                "logits have shape {:?}, expected {expect:?}",
                logits.shape()
            )));
        }
        Ok(Self {
            granularity,
            rates,
            out_features,
            in_features,
            logits,
            version: 0,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn rates(&self) -> &CandidateRates {
        &self.rates
    }

    pub fn units(&self) -> usize {
        self.logits.rows()
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Mutable logits; invalidates any mask generated earlier.
    pub fn logits_mut(&mut self) -> &mut Tensor {
        self.version += 1;
        &mut self.logits
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn beta(&self, unit: usize) -> Vec<f64> {
        beta_from_logits(self.logits.row(unit))
    }

    pub fn alpha(&self, unit: usize) -> f64 {
        alpha_unchecked(&self.beta(unit), &self.rates)
    }

    /// Mean `α` weighted by the elements each unit governs.
    pub fn mean_alpha(&self) -> f64 {
        (0..self.units()).map(|u| self.alpha(u)).sum::<f64>() / self.units() as f64
    }
}

/// State captured by [`generate_mask`] for the matching backward.
#[derive(Clone, Debug)]
pub struct MaskRecord {
    version: u64,
    betas: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    /// Pruned rank prefix per output row.
    pub pruned: Vec<usize>,
}

impl MaskRecord {
    /// `β` of every unit at generation time.
    pub fn betas(&self) -> &[Vec<f64>] {
        &self.betas
    }
}

/// Binary mask from the current allocation and a fixed importance ranking.
pub fn generate_mask(
    params: &SparsityParams,
    ranking: &RowRanking,
    layer: &str,
) -> Result<(PruneMask, MaskRecord), SparsityError> {
    let (out, width) = (params.out_features, params.in_features);
    if ranking.out_features() != out || ranking.in_features() != width {
        return Err(SparsityError::Usage(format!(
            "ranking is {}x{}, allocation is {out}x{width}",
            ranking.out_features(),
            ranking.in_features()
        )));
    }
    let betas: Vec<Vec<f64>> = (0..params.units()).map(|u| params.beta(u)).collect();
    let alphas: Vec<f64> = betas.iter().map(|b| alpha_unchecked(b, &params.rates)).collect();
    let per_unit: Vec<usize> = betas
        .iter()
        .map(|b| pruned_prefix(b, &params.rates, width))
        .collect();
    let mut mask = PruneMask::ones(layer, out, width);
    let mut pruned = Vec::with_capacity(out);
    for o in 0..out {
        let k = per_unit[params.granularity.unit_of_row(o)];
        for &col in &ranking.row(o)[..k] {
            mask.set(o, col as usize, false);
        }
        pruned.push(k);
    }
    Ok((
        mask,
        MaskRecord {
            version: params.version,
            betas,
            alphas,
            pruned,
        },
    ))
}

/// Gradient with respect to `β` (all `D` slots, the pinned one zeroed)
/// from a gradient with respect to the mask bits.
///
/// Straight-through convention: `∂M/∂P = −1` and the threshold `α` is held
/// fixed, so `∂L/∂β_d = −Σ` of the upstream gradient over every weight whose
/// rank bin lies below `d`.
pub fn mask_backward_beta(
    record: &MaskRecord,
    params: &SparsityParams,
    ranking: &RowRanking,
    upstream: &Tensor,
) -> Result<Vec<Vec<f64>>, SparsityError> {
    if record.version != params.version {
        return Err(SparsityError::Usage(
            "mask backward without a forward for the current logits".into(),
        ));
    }
    let (out, width) = (params.out_features, params.in_features);
    if upstream.shape() != [out, width] {
        return Err(SparsityError::Usage(format!(
            "upstream gradient has shape {:?}, mask is [{out}, {width}]",
            upstream.shape()
        )));
    }
    let d_count = params.rates.count();
    let mut grads = vec![vec![0.0; d_count]; params.units()];
    let mut cum = vec![0.0; width + 1];
    for o in 0..out {
        let g = upstream.row(o);
        for (r, &col) in ranking.row(o).iter().enumerate() {
            cum[r + 1] = cum[r] + g[col as usize];
        }
        let unit = &mut grads[params.granularity.unit_of_row(o)];
        for d in 1..d_count {
            unit[d - 1] -= cum[params.rates.boundary(d, width)];
        }
    }
    Ok(grads)
}

/// Chains `∂L/∂β` through the softmax to the free logits.
pub fn beta_grad_to_logits(beta: &[f64], grad_beta: &[f64]) -> Vec<f64> {
    let free = beta.len() - 1;
    let dot: f64 = (0..free).map(|j| beta[j] * grad_beta[j]).sum();
    (0..free).map(|j| beta[j] * (grad_beta[j] - dot)).collect()
}

/// Gradient with respect to the logits `[units × (D − 1)]`.
pub fn mask_backward(
    record: &MaskRecord,
    params: &SparsityParams,
    ranking: &RowRanking,
    upstream: &Tensor,
) -> Result<Tensor, SparsityError> {
    let grads = mask_backward_beta(record, params, ranking, upstream)?;
    let free = params.rates.count() - 1;
    let mut data = Vec::with_capacity(grads.len() * free);
    for (beta, g) in record.betas.iter().zip(&grads) {
        data.extend(beta_grad_to_logits(beta, g));
    }
    Ok(Tensor::new(&[grads.len(), free], data).expect("logit grad dimensions"))
}

/// Squared gap between achieved and target zero fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub achieved: f64,
    /// `∂penalty/∂M` for every mask bit (zero count has slope −1 per bit).
    pub mask_grad: f64,
}

pub fn sparsity_penalty(masks: &[&PruneMask], target: f64) -> Penalty {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let zeros: usize = masks.iter().map(|m| m.zero_count()).sum();
    let achieved = zeros as f64 / total as f64;
    let gap = achieved - target;
    Penalty {
        value: gap * gap,
        achieved,
        mask_grad: -2.0 * gap / total as f64,
    }
}

/// Penalty on the soft rates `α` instead of the realized zero count.
///
/// Returns the value and, per layer, `∂/∂β` for every unit.
pub fn surrogate_penalty(params: &[&SparsityParams], target: f64) -> (f64, Vec<Vec<Vec<f64>>>) {
    let total: usize = params.iter().map(|p| p.out_features * p.in_features).sum();
    let mut soft = 0.0;
    for p in params {
        let per_unit = (p.out_features * p.in_features / p.units()) as f64;
        soft += (0..p.units()).map(|u| p.alpha(u) * per_unit).sum::<f64>();
    }
    let soft = soft / total as f64;
    let gap = soft - target;
    let grads = params
        .iter()
        .map(|p| {
            let per_unit = (p.out_features * p.in_features / p.units()) as f64;
            let row: Vec<f64> = (1..=p.rates.count())
                .map(|d| {
                    if d == p.rates.count() {
                        0.0
                    } else {
                        2.0 * gap * p.rates.rate(d) * per_unit / total as f64
                    }
                })
                .collect();
            vec![row; p.units()]
        })
        .collect();
    (gap * gap, grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub extra: usize,
    pub block_weights: usize,
    /// `extra / block_weights`.
    pub ratio: f64,
}

/// Learnable coefficients added for layers of the given `[out, in]` shapes.
pub fn count_learnable_params(shapes: &[[usize; 2]], granularity: Granularity, d: usize) -> ParamCount {
    let extra = shapes.iter().map(|[o, _]| d * granularity.units(*o)).sum();
    let block_weights = shapes.iter().map(|[o, i]| o * i).sum();
    ParamCount {
        extra,
        block_weights,
        ratio: extra as f64 / block_weights as f64,
    }
}
