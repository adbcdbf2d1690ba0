//! Layers and the multi-output model.

pub mod layers;
pub mod model;

pub use layers::{
    conv2d_backward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, ConvGrads, ConvLayer, DenseGrads, DenseLayer,
};
pub use model::{
    argmax, ActivationPattern, ArchConfig, BatchForward, ForwardTrace, Gradients, Layer, LayerSpec,
    MultiOutputModel,
};
