//! Differentiable operations, implemented as methods on [`Graph`](crate::Graph).

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod resize;

pub use conv::Conv3d;
pub use norm::{NormMode, BN_EPS, BN_MOMENTUM};

use crate::TensorError;

pub(crate) fn dims5(shape: &[usize], what: &str) -> Result<[usize; 5], TensorError> {
    <[usize; 5]>::try_from(shape).map_err(|_| {
        TensorError::ShapeMismatch(format!("{what} expects a 5-D [N,C,D,H,W] tensor, got {shape:?}"))
    })
}

pub(crate) fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}
