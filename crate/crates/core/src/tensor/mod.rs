//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`], a plain row-major array. Differentiable
//! computation is recorded on a [`Tape`]; model weights live in a
//! [`ParamSet`] and are pulled onto the tape as leaves once per tape.

mod optim;
mod params;
mod tape;

pub use optim::{
    optimizer_names, warmup_lr, Adam, AdamState, OptimConfig, Optimizer, OptimizerState, Sgd,
};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major n-dimensional array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
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

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::InvalidShape {
                op: "dims2",
                detail: format!("expected a 2-D tensor, got {other:?}"),
            }),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Which elementwise reduction [`reduce_metric`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Mae,
}

/// Mean squared or absolute error between two equally shaped tensors.
pub fn reduce_metric(a: &Tensor, b: &Tensor, kind: Metric) -> Result<f64> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "reduce_metric",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let n = a.numel() as f64;
    let total: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| match kind {
            Metric::Mse => (x - y) * (x - y),
            Metric::Mae => (x - y).abs(),
        })
        .sum();
    Ok(total / n)
}

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > len + 2 * padding {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

/// "Same-style" padding used by every conv layer.
pub fn same_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn metric_examples() {
        let a = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(reduce_metric(&a, &b, Metric::Mse).unwrap(), 5.0);
        assert_eq!(reduce_metric(&a, &b, Metric::Mae).unwrap(), 2.0);
        let c = Tensor::new(vec![1], vec![2.0]).unwrap();
        let d = Tensor::new(vec![1], vec![-2.0]).unwrap();
        assert_eq!(reduce_metric(&c, &d, Metric::Mse).unwrap(), 16.0);
        assert_eq!(reduce_metric(&c, &d, Metric::Mae).unwrap(), 4.0);
        assert_eq!(reduce_metric(&a, &a, Metric::Mse).unwrap(), 0.0);
        assert_eq!(reduce_metric(&b, &b, Metric::Mae).unwrap(), 0.0);
    }

    #[test]
    fn metric_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(
            reduce_metric(&a, &b, Metric::Mse),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_length_examples() {
        assert_eq!(conv1d_out_len(80, 5, 2, 2), Some(40));
        assert_eq!(conv1d_out_len(80, 3, 1, 1), Some(80));
        assert_eq!(conv1d_out_len(2, 5, 1, 1), None);
    }
}
