//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! tracking lives on a [`Tape`], which records operations on [`Var`] handles
//! and replays them backwards once.
//!
//! ```
//! use besa::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(), true);
//! let loss = tape.frobenius_sq(w);
//! assert_eq!(tape.value(loss).item(), 25.0);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[6.0, 8.0]);
//! ```

pub mod kernels;
mod tape;

pub use tape::{CustomBackward, Gradients, Tape, Var};
pub(crate) use tape::{sigmoid, softmax_in_place};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("tape usage: {0}")]
    Usage(String),
}

/// Dense tensor with contiguous row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..end` of a matrix as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![1];
        }
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks matrices with equal column count along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Usage("concat of nothing".into()))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, cols], data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_matmul("matmul", self, other, false)?;
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::gemm_nn(&self.data, &other.data, m, k, n),
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        check_matmul("matmul_t", self, other, true)?;
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::gemm_nt(&self.data, &other.data, m, k, n),
        })
    }
}

fn check_matmul(op: &'static str, a: &Tensor, b: &Tensor, transposed: bool) -> Result<(), TensorError> {
    let inner_b = if transposed { b.shape.get(1) } else { b.shape.first() };
    if a.shape.len() != 2 || b.shape.len() != 2 || Some(&a.shape[1]) != inner_b {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = Tensor::new(&[2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let b = Tensor::new(&[4, 3], (0..12).map(|x| (x as f64).sin()).collect()).unwrap();
        let direct = a.matmul_t(&b).unwrap();
        let via = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&via) < 1e-15);
    }
}
