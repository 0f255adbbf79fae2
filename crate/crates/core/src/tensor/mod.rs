//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Every learnable operation in the model is recorded on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar loss fills in gradients for every tensor
//! that was created with `requires_grad`. A finite-difference checker
//! ([`grad_check`]) verifies the analytic rules.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi};
pub use tape::{BnMode, BnStats, Tape, TensorId};

use crate::error::{Error, Result};

/// Dense n-dimensional value, row-major, with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![m, n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// (rows, cols) when the tensor is a matrix.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.dims2().expect("row() needs a matrix");
        &self.data[i * n..(i + 1) * n]
    }
}

/// Pointwise activation recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Elu,
}

impl UnaryFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Relu => x.max(0.0),
            UnaryFn::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryFn::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// d(apply)/dx expressed with the input `x` and output `y` at hand.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryFn::Sigmoid => y * (1.0 - y),
            UnaryFn::Tanh => 1.0 - y * y,
            UnaryFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryFn::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
        assert_eq!(t.dims2(), Some((2, 2)));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn relu_and_leaky_relu_definitions() {
        assert_eq!(UnaryFn::Relu.apply(-1.0), 0.0);
        assert_eq!(UnaryFn::Relu.apply(2.0), 2.0);
        assert_eq!(UnaryFn::LeakyRelu(0.2).apply(-1.0), -0.2);
        assert_eq!(UnaryFn::LeakyRelu(0.2).apply(3.0), 3.0);
    }

    #[test]
    fn elu_matches_definition() {
        assert_eq!(UnaryFn::Elu.apply(1.5), 1.5);
        let y = UnaryFn::Elu.apply(-2.0);
        assert!((y - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
    }
}
