//! Per-channel Min-Max fake quantization with learnable clipping strengths.
//!
//! For output channel `o` with row minimum `lo` and maximum `hi`:
//!
//! ```text
//! h    = (γ1·hi − γ0·lo) / (2^N − 1)
//! z    = −round(γ0·lo / h)                 clamped to [0, 2^N − 1]
//! code = clamp(round(W/h) + z, 0, 2^N − 1)
//! Ŵ    = (code − z)·h
//! ```
//!
//! Rounding is half-to-even. A channel with `h = 0` is passed through
//! unchanged and flagged.

use serde::{Deserialize, Serialize};

use crate::tensor::{CustomBackward, Tape, Tensor, TensorError, Var};

/// Clipping strengths and bit width of one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
}

impl QuantParams {
    /// Plain Min-Max quantization (`γ0 = γ1 = 1`).
    pub fn unclipped(bits: u32, out_features: usize) -> Self {
        Self {
            bits,
            gamma0: vec![1.0; out_features],
            gamma1: vec![1.0; out_features],
        }
    }

    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// `[out × 2]` tensor of `(γ0, γ1)` rows.
    pub fn gamma_tensor(&self) -> Tensor {
        let data = self.gamma0.iter().zip(&self.gamma1).flat_map(|(a, b)| [*a, *b]).collect();
        Tensor::new(&[self.gamma0.len(), 2], data).expect("gamma dimensions")
    }
}

/// Fake-quantized weights and the integer representation behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub dequantized: Tensor,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    /// Row-major integer codes; zero on pass-through channels.
    pub codes: Vec<u32>,
    /// Channels left unquantized because their scale is zero.
    pub passthrough: Vec<bool>,
}

struct ChannelGrad {
    /// `∂Ŵ/∂γ0`, `∂Ŵ/∂γ1`, row-major.
    d_gamma0: Vec<f64>,
    d_gamma1: Vec<f64>,
    /// Whether the clamp on the code was inactive (straight-through for `W`).
    in_range: Vec<bool>,
}

fn check_inputs(w: &Tensor, q: &QuantParams) -> Result<(), TensorError> {
    if !(2..=8).contains(&q.bits) {
        return Err(TensorError::Usage(format!("bit width {} outside 2..=8", q.bits)));
    }
    if w.shape().len() != 2 || q.gamma0.len() != w.rows() || q.gamma1.len() != w.rows() {
        return Err(TensorError::Shape {
            op: "quantize",
            lhs: w.shape().to_vec(),
            rhs: vec![q.gamma0.len(), q.gamma1.len()],
        });
    }
    Ok(())
}

fn quantize_full(w: &Tensor, q: &QuantParams) -> Result<(Quantized, ChannelGrad), TensorError> {
    check_inputs(w, q)?;
    let (out, inn) = (w.rows(), w.cols());
    let qmax = q.levels() as f64;
    let mut deq = vec![0.0; out * inn];
    let mut codes = vec![0u32; out * inn];
    let mut scales = vec![0.0; out];
    let mut zero_points = vec![0i32; out];
    let mut passthrough = vec![false; out];
    let mut grad = ChannelGrad {
        d_gamma0: vec![0.0; out * inn],
        d_gamma1: vec![0.0; out * inn],
        in_range: vec![true; out * inn],
    };
    for o in 0..out {
        let row = w.row(o);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (g0, g1) = (q.gamma0[o], q.gamma1[o]);
        let h = (g1 * hi - g0 * lo) / qmax;
        let base = o * inn;
        if !(h > 0.0) || !h.is_finite() {
            passthrough[o] = true;
            deq[base..base + inn].copy_from_slice(row);
            continue;
        }
        let z_raw = -(g0 * lo / h).round_ties_even();
        let z = z_raw.clamp(0.0, qmax);
        scales[o] = h;
        zero_points[o] = z as i32;
        let dh_dg0 = -lo / qmax;
        let dh_dg1 = hi / qmax;
        let (dz_dg0, dz_dg1) = if z_raw == z {
            let t = g0 * lo / (h * h);
            (-lo / h + t * dh_dg0, t * dh_dg1)
        } else {
            (0.0, 0.0)
        };
        for (i, &v) in row.iter().enumerate() {
            let u = v / h;
            let r = u.round_ties_even();
            let code_raw = r + z;
            let code = code_raw.clamp(0.0, qmax);
            codes[base + i] = code as u32;
            deq[base + i] = (code - z) * h;
            if code == code_raw {
                let dq_dh = r - u;
                grad.d_gamma0[base + i] = dq_dh * dh_dg0;
                grad.d_gamma1[base + i] = dq_dh * dh_dg1;
            } else {
                grad.in_range[base + i] = false;
                grad.d_gamma0[base + i] = (code - z) * dh_dg0 - h * dz_dg0;
                grad.d_gamma1[base + i] = (code - z) * dh_dg1 - h * dz_dg1;
            }
        }
    }
    Ok((
        Quantized {
            dequantized: Tensor::new(w.shape(), deq)?,
            scales,
            zero_points,
            codes,
            passthrough,
        },
        grad,
    ))
}

pub fn quantize(w: &Tensor, q: &QuantParams) -> Result<Quantized, TensorError> {
    quantize_full(w, q).map(|(out, _)| out)
}

struct QuantizeBackward {
    grad: ChannelGrad,
}

impl CustomBackward for QuantizeBackward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Option<Tensor>> {
        let (out, inn) = (grad_out.rows(), grad_out.cols());
        let g = grad_out.data();
        let dw: Vec<f64> = g
            .iter()
            .zip(&self.grad.in_range)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        let mut dgamma = vec![0.0; out * 2];
        for o in 0..out {
            let (mut a, mut b) = (0.0, 0.0);
            for i in o * inn..(o + 1) * inn {
                a += g[i] * self.grad.d_gamma0[i];
                b += g[i] * self.grad.d_gamma1[i];
            }
            dgamma[2 * o] = a;
            dgamma[2 * o + 1] = b;
        }
        vec![
            Some(Tensor::new(inputs[0].shape(), dw).expect("weight shape")),
            Some(Tensor::new(inputs[1].shape(), dgamma).expect("gamma shape")),
        ]
    }
}

/// Records fake quantization of `w` with clipping strengths `gammas`
/// (`[out × 2]`, columns γ0 and γ1).
///
/// Rounding is straight-through: the gradient to `W` passes unchanged where
/// the code is not clamped, and the gradient to the strengths flows through
/// the scale and zero point.
pub fn record_quantize(tape: &mut Tape, w: Var, gammas: Var, bits: u32) -> Result<Var, TensorError> {
    let g = tape.value(gammas);
    if g.shape().len() != 2 || g.cols() != 2 {
        return Err(TensorError::Shape {
            op: "record_quantize",
            lhs: tape.value(w).shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let params = QuantParams {
        bits,
        gamma0: (0..g.rows()).map(|o| g.at(o, 0)).collect(),
        gamma1: (0..g.rows()).map(|o| g.at(o, 1)).collect(),
    };
    let (q, grad) = quantize_full(tape.value(w), &params)?;
    Ok(tape.custom(q.dequantized, &[w, gammas], Box::new(QuantizeBackward { grad })))
}
