#![allow(dead_code)]

use besa::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Worst per-input relative error between tape gradients and central
/// differences of `f` (step 1e-5).
pub fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        let mut xs = inputs.to_vec();
        for i in 0..input.numel() {
            let orig = input.data()[i];
            xs[k].data_mut()[i] = orig + step;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - step;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.sum_sq().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: LossFn,
}

/// `Σ x ⊙ c` for a fixed random `c`, so gradients are not trivially uniform.
fn weighted_sum(tape: &mut Tape, x: Var, c: &Tensor) -> Var {
    let cv = tape.constant(c.clone());
    let p = tape.mul(x, cv).unwrap();
    tape.sum(p)
}

/// One random instance of every differentiable tape operation.
pub fn grad_cases(r: &mut ChaCha8Rng) -> Vec<GradCase> {
    use besa::model::{record_block, BlockConfig, BlockVars, LayerName, Layers};

    let mut cases = Vec::new();
    let c34 = random_tensor(r, &[3, 4], 1.0);
    let c35 = random_tensor(r, &[3, 5], 1.0);

    cases.push(GradCase {
        name: "matmul",
        inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4, 5], 1.0)],
        loss: Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.sum(y)
        }),
    });
    let c = c35.clone();
    cases.push(GradCase {
        name: "matmul_t",
        inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[5, 4], 1.0)],
        loss: Box::new(move |t, v| {
            let y = t.matmul_t(v[0], v[1]).unwrap();
            weighted_sum(t, y, &c)
        }),
    });
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let c = c34.clone();
        cases.push(GradCase {
            name,
            inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[3, 4], 1.0)],
            loss: Box::new(move |t, v| {
                let y = match which {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }
                .unwrap();
                weighted_sum(t, y, &c)
            }),
        });
    }
    let c = c34.clone();
    cases.push(GradCase {
        name: "mul_scalar_broadcast",
        inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[], 1.0)],
        loss: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, &c)
        }),
    });
    for (name, which) in [("scale", 0), ("silu", 1), ("square", 2)] {
        let c = c34.clone();
        cases.push(GradCase {
            name,
            inputs: vec![random_tensor(r, &[3, 4], 2.0)],
            loss: Box::new(move |t, v| {
                let y = match which {
                    0 => t.scale(v[0], -1.7),
                    1 => t.silu(v[0]),
                    _ => t.square(v[0]),
                };
                weighted_sum(t, y, &c)
            }),
        });
    }
    let c = c34.clone();
    cases.push(GradCase {
        name: "softmax_rows",
        inputs: vec![random_tensor(r, &[3, 4], 2.0)],
        loss: Box::new(move |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            weighted_sum(t, y, &c)
        }),
    });
    let c = c34.clone();
    cases.push(GradCase {
        name: "rms_norm",
        inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4], 1.0)],
        loss: Box::new(move |t, v| {
            let y = t.rms_norm(v[0], v[1]).unwrap();
            weighted_sum(t, y, &c)
        }),
    });
    cases.push(GradCase {
        name: "frobenius_sq",
        inputs: vec![random_tensor(r, &[3, 4], 1.0)],
        loss: Box::new(|t, v| t.frobenius_sq(v[0])),
    });
    let c = random_tensor(r, &[6, 4], 1.0);
    cases.push(GradCase {
        name: "causal_attention",
        inputs: (0..3).map(|_| random_tensor(r, &[6, 4], 1.0)).collect(),
        loss: Box::new(move |t, v| {
            let y = t.causal_attention(v[0], v[1], v[2], 2, 3).unwrap();
            weighted_sum(t, y, &c)
        }),
    });
    let c = c35;
    cases.push(GradCase {
        name: "matmul_softmax_chain",
        inputs: vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4, 5], 1.0)],
        loss: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let s = t.softmax_rows(y).unwrap();
            let q = t.square(s);
            weighted_sum(t, q, &c)
        }),
    });

    let cfg = BlockConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        seq_len: 3,
    };
    let x = random_tensor(r, &[6, 4], 1.0);
    let dense = Layers::from_fn(|l| {
        let [o, i] = cfg.layer_shape(l);
        random_tensor(r, &[o, i], 0.8)
    });
    let masks = dense.map(|_, w| {
        let data = (0..w.numel()).map(|_| if r.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
        Tensor::new(w.shape(), data).unwrap()
    });
    let gain = Tensor::ones(&[4]);
    let mut inputs: Vec<Tensor> = dense.0.to_vec();
    inputs.push(x);
    let target = {
        let mut t = Tape::new();
        let vars = BlockVars {
            layers: dense.map(|_, w| t.constant(w.clone())),
            attn_norm: t.constant(gain.clone()),
            mlp_norm: t.constant(gain.clone()),
        };
        let xv = t.constant(inputs[7].clone());
        let tr = record_block(&mut t, &cfg, &vars, xv).unwrap();
        t.value(tr.output).clone()
    };
    cases.push(GradCase {
        name: "block_reconstruction",
        inputs,
        loss: Box::new(move |t, v| {
            let layers = Layers::try_from_fn(|l: LayerName| {
                let m = t.constant(masks[l].clone());
                t.mul(v[l.index()], m)
            })
            .unwrap();
            let vars = BlockVars {
                layers,
                attn_norm: t.constant(gain.clone()),
                mlp_norm: t.constant(gain.clone()),
            };
            let tr = record_block(t, &cfg, &vars, v[7]).unwrap();
            let tv = t.constant(target.clone());
            let d = t.sub(tv, tr.output).unwrap();
            let e = t.frobenius_sq(d);
            t.scale(e, 1.0 / target.sum_sq())
        }),
    });
    cases
}
