//! Layer forward/backward implementations.
//!
//! Each operation returns its output together with a cache holding exactly
//! the forward values its backward needs. Caches are consumed by value, so a
//! cache produced by one forward call feeds at most one backward call.
//! Backward passes compute exact gradients of the forward map; the
//! [`crate::gradcheck`] suite holds them to central finite differences.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod lstm;
mod pool;

pub use batchnorm::{
    batchnorm_forward, batchnorm_backward, BatchNormCache, BatchNormParams, RunningStatsUpdate,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dCache, ConvParams, CONV_KERNEL};
pub use dense::{dense_backward, dense_forward, DenseActivation, DenseCache, DenseParams};
pub use dropout::{dropout_backward, dropout_forward, DropoutCache};
pub use lstm::{
    lstm_backward, lstm_forward, lstm_step, LstmCache, LstmParams, LstmState, LstmStepCache,
};
pub use pool::{maxpool_backward, maxpool_forward, MaxPoolCache};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Whether a pass runs with training behavior (batch statistics, dropout
/// masks) or inference behavior (running statistics, identity dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Collapse `[N,H,W,C]` to `[N, H*W*C]` (row-major, so purely a reshape).
pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape_mismatch(
            "flatten",
            "rank-4 tensor",
            format!("rank {}", x.rank()),
        ));
    }
    let d = x.dims();
    x.reshape(Shape::new([d[0], d[1] * d[2] * d[3]])?)
}

/// Inverse of [`flatten_forward`] for the gradient.
pub fn flatten_backward(dy: &Tensor, input_dims: &[usize]) -> Result<Tensor> {
    dy.reshape(Shape::new(input_dims.to_vec())?)
}
