mod common;

use besa::tensor::{Tape, Tensor};
use common::{fd_check, grad_cases, rng};

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(11);
    for instance in 0..20 {
        for case in grad_cases(&mut r) {
            let err = fd_check(&case.inputs, &case.loss);
            assert!(err <= 1e-6, "{} instance {instance}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn op_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let s = t.silu(z);
    assert_eq!(t.value(s).data(), &[0.0]);
    let three = t.constant(Tensor::new(&[1], vec![3.0]).unwrap());
    let sq = t.square(three);
    assert_eq!(t.value(sq).data(), &[9.0]);
    let row = t.constant(Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let sm = t.softmax_rows(row).unwrap();
    let v = t.value(sm).data();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    let flat = t.constant(Tensor::full(&[2, 5], 1.3));
    let sm = t.softmax_rows(flat).unwrap();
    assert!(t.value(sm).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn rms_norm_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2, 3], vec![2.0, 2.0, 2.0, -5.0, -5.0, -5.0]).unwrap());
    let g = t.constant(Tensor::ones(&[3]));
    let y = t.rms_norm(x, g).unwrap();
    for (v, s) in t.value(y).data().iter().zip([1.0, 1.0, 1.0, -1.0, -1.0, -1.0]) {
        assert!((v - s).abs() < 1e-6);
    }
    let g0 = t.constant(Tensor::zeros(&[3]));
    let y = t.rms_norm(x, g0).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn frobenius_gradient_is_exactly_twice_input() {
    let a = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
    let mut t = Tape::new();
    let v = t.leaf(a.clone(), true);
    let f = t.frobenius_sq(v);
    assert_eq!(t.value(f).item(), 25.0);
    let g = t.backward(f).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[6.0, 8.0]);
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[2, 2]));
    let f = t.frobenius_sq(z);
    assert_eq!(t.value(f).item(), 0.0);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(5);
        grad_cases(&mut r)
            .into_iter()
            .map(|c| {
                let mut t = Tape::new();
                let vs: Vec<_> = c.inputs.iter().map(|x| t.constant(x.clone())).collect();
                let l = (c.loss)(&mut t, &vs);
                t.value(l).item().to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
