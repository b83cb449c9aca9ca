//! Dense tensors and define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles. After
//! the forward pass, [`Graph::backward`] walks the record in reverse and
//! returns exact derivatives of a scalar with respect to every recorded
//! value. Trainable state lives outside the graph in [`Variable`]s, which are
//! copied in as leaves for each unit of work and receive accumulated
//! gradients afterwards.
//!
//! ```
//! use ssm_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(&[1.0, 2.0]));
//! let loss = g.sum_squares(x).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod graph;
mod tensor;

pub use graph::{reduce_loss, Activation, Gradients, Graph, LossKind, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("rank-{0} tensors are not supported by this operation")]
    Rank(usize),
    #[error("index {index} out of range for dimension of size {size}")]
    Index { index: usize, size: usize },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Trainable tensor with a gradient slot of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Tensor,
}

impl Variable {
    pub fn new(value: Tensor, requires_grad: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            requires_grad,
            grad,
        }
    }

    pub fn trainable(value: Tensor) -> Self {
        Self::new(value, true)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// `grad += g`.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<(), AutodiffError> {
        if g.shape() != self.grad.shape() && g.numel() != self.grad.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.grad.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        self.grad.add_assign(g)
    }
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest relative discrepancy between two gradients, with `floor` guarding
/// the denominator for near-zero entries.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
