// SPDX-License-Identifier: Apache-2.0

//! A small differentiable-layer engine: forward/backward for the layers the
//! encoder-decoder networks use, pixelwise MSE and ADAM.
//!
//! Every layer is generic over [`Scalar`] so training can run in `f32` while
//! gradient checks run in `f64`. Layers are stateless with respect to
//! activations: forward passes return whatever the backward pass needs and
//! callers keep those records, which makes time-unrolling straightforward.

mod adam;
mod conv;
mod layers;
mod loss;
mod lstm;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, PoolRecord,
};
pub use loss::{l2_penalty, mse_loss};
pub use lstm::{ConvLstmCell, LstmState, LstmStepCache};
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Shape {
        op,
        detail: detail.into(),
    })
}

/// Anything holding trainable parameters in a fixed order.
pub trait Network<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

#[cfg(test)]
mod gradcheck;
