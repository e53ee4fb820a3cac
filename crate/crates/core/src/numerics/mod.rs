//! Dense f32 tensors, the layer kernels the predictor is built from (each
//! with an explicit backward pass), He initialization, Adam, and the binary
//! parameter checkpoint format.

pub mod checkpoint;
mod init;
pub mod kernels;
mod layers;
mod params;
mod tensor;

pub use init::{he_init, zeros_bias};
pub use layers::{
    conv2d_backward, conv2d_layer, conv_output_extent, dense_backward, dense_layer, leaky_relu,
    leaky_relu_backward, masked_mse_backward, masked_mse_loss,
};
pub use params::{adam_step, AdamConfig, Gradients, ParamId, ParameterStore};
pub use tensor::Tensor;

/// Negative-side slope of the leaky ReLU used after every non-terminal layer.
pub const LEAKY_SLOPE: f32 = 0.2;
