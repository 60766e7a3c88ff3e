//! Small f64 training engine with a fixed layer vocabulary.
//!
//! Every layer exposes a forward function that returns what its backward pass
//! needs and a backward function that maps an output gradient to input and
//! parameter gradients. Models chain these by hand; there is no graph.

mod adam;
mod attention;
mod gradcheck;
mod gru;
mod layers;
mod loss;
pub mod serial;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::{causal_attention, causal_attention_backward, AttentionCache, AttentionGrads};
pub use gradcheck::grad_check;
pub use gru::{gru_cell, gru_cell_backward, gru_sequence, gru_sequence_backward, GruCache, GruParams};
pub use layers::{leaky_relu, leaky_relu_backward, linear, linear_backward, Linear, LinearGrads};
pub use loss::huber_loss;
pub use tensor::Tensor;

pub(crate) use attention::attend_row;
pub(crate) use layers::{axpy, dot, leaky_backward_inplace, leaky_inplace, linear_back_into, linear_into};
pub(crate) use loss::huber_slices;

use thiserror::Error;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

pub(crate) fn expect_shape(op: &'static str, t: &Tensor, expected: &[usize]) -> Result<(), NnError> {
    if t.shape() != expected {
        return Err(NnError::ShapeMismatch { op, expected: expected.to_vec(), got: t.shape().to_vec() });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
