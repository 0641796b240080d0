//! Dense tensors, layer kernels, reverse-mode differentiation and Adam.

pub mod adam;
pub mod graph;
pub mod kernels;
pub mod layer;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{
    batchnorm, conv2d, conv_transpose2d, depthwise_conv2d, relu6, sigmoid, BnMode,
};
pub use layer::{
    inverted_residual, Forward, Init, InvertedResidual, LayerKind, LayerSpec, ParamId, ParamStore,
};
pub use tensor::{Scalar, Tensor};
