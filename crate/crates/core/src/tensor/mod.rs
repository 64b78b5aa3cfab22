//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] through [`Var`] handles. Calling [`Var::backward`] replays the
//! tape in reverse and returns a [`Gradients`] table keyed by node id.
//!
//! ```
//! use causalseg::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
//! let loss = x.mul(x).unwrap().sum_all();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod conv;
mod gemm;
mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::channel_moments;

use std::fmt;

use thiserror::Error;

/// Floor applied to `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;
/// Norms below this make [`Var::l2_normalize`] fail instead of dividing.
pub const NORM_EPS: f64 = 1e-8;
/// Lower bound for instance standard deviations.
pub const STD_FLOOR: f64 = 1e-6;
/// `exp` arguments are clamped into this range so results stay finite.
pub const EXP_CLAMP: (f64, f64) = (-745.0, 709.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: dimension mismatch on axis {axis}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shapes {left:?} and {right:?} cannot be broadcast")]
    Broadcast {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("l2_normalize: vector norm {norm:e} is below {NORM_EPS:e}")]
    DegenerateVector { norm: f64 },
    #[error("instance_stats: spatial size {0} is too small (need at least 2 pixels)")]
    DegenerateSpatial(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("reshape: cannot view {from:?} as {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("variables belong to different tapes")]
    ForeignTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape.clone(),
                to: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Slice along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().map(|t| t.shape.clone()).unwrap_or_default();
        let mut data = Vec::with_capacity(items.len() * first.iter().product::<usize>());
        for t in items {
            if t.shape != first {
                return Err(TensorError::Broadcast {
                    op: "stack",
                    left: first,
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(first);
        Ok(Tensor { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, .. {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

/// How a binary op aligns its two operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand is a single value.
    ScalarRhs,
    ScalarLhs,
    /// Right operand is a `[C]` vector applied along axis 1 of the left.
    ChannelRhs { channels: usize, inner: usize },
    ChannelLhs { channels: usize, inner: usize },
}

impl Broadcast {
    pub(crate) fn resolve(op: &'static str, left: &[usize], right: &[usize]) -> Result<Self> {
        let numel = |s: &[usize]| s.iter().product::<usize>();
        if left == right {
            return Ok(Broadcast::Same);
        }
        if numel(right) == 1 && right.len() <= 1 {
            return Ok(Broadcast::ScalarRhs);
        }
        if numel(left) == 1 && left.len() <= 1 {
            return Ok(Broadcast::ScalarLhs);
        }
        let channel = |big: &[usize], vec: &[usize]| {
            (vec.len() == 1 && big.len() >= 2 && big[1] == vec[0])
                .then(|| (vec[0], big[2..].iter().product::<usize>()))
        };
        if let Some((channels, inner)) = channel(left, right) {
            return Ok(Broadcast::ChannelRhs { channels, inner });
        }
        if let Some((channels, inner)) = channel(right, left) {
            return Ok(Broadcast::ChannelLhs { channels, inner });
        }
        Err(TensorError::Broadcast {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        })
    }

    /// Output shape given the operand shapes.
    pub(crate) fn out_shape(self, left: &[usize], right: &[usize]) -> Vec<usize> {
        match self {
            Broadcast::Same | Broadcast::ScalarRhs | Broadcast::ChannelRhs { .. } => left.to_vec(),
            Broadcast::ScalarLhs | Broadcast::ChannelLhs { .. } => right.to_vec(),
        }
    }

    /// Index into the (left, right) operands for output position `i`.
    #[inline]
    pub(crate) fn index(self, i: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::ScalarRhs => (i, 0),
            Broadcast::ScalarLhs => (0, i),
            Broadcast::ChannelRhs { channels, inner } => (i, (i / inner) % channels),
            Broadcast::ChannelLhs { channels, inner } => ((i / inner) % channels, i),
        }
    }
}
