//! Minimal deterministic numeric core.
//!
//! Dense row-major tensors plus hand-written forward/backward kernels for the
//! layers a small sequential CNN needs. There is no autodiff tape: each layer
//! exposes an explicit backward function and the model stack chains them.
//!
//! All reductions run in a fixed loop order so that identical inputs produce
//! bitwise identical outputs. For convolutions the reduction order is input
//! channel, then kernel row, then kernel column.

pub(crate) mod conv;
mod layers;
mod tensor;

pub use conv::{col2im, conv2d_backward, conv2d_forward, im2col, ConvGeometry};
pub use layers::{
    batchnorm_backward, batchnorm_forward, hardtanh_backward, hardtanh_forward, linear_backward, linear_forward,
    softmax_xent, BatchNormCache, BatchNormGrads, BatchNormParams, LinearGrads,
};
pub use tensor::{Scalar, Tensor};

/// Gradients produced by a parameterised layer's backward pass.
///
/// For binary layers `d_weight` is taken with respect to the binarized
/// weight `ŵ = α ∘ sign(w)`; the optimizer maps it onto the latent weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T: Scalar = f32> {
    pub d_weight: Tensor<T>,
    pub d_input: Tensor<T>,
    pub d_alpha: Option<Vec<T>>,
}
