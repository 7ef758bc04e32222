//! Small numeric kernel: tensors, causal convolutions, activations, losses,
//! a gradient tape and the Adam optimizer.

pub mod adam;
pub(crate) mod linalg;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{
    causal_conv1d, causal_conv1d_backward, gated_activation, gated_activation_backward,
    gated_activation_cached, gated_backward_from_cache, gated_conv_backward, gated_conv_forward, mse_loss,
    pointwise_conv, pointwise_conv_backward, relu, relu_backward, sigmoid, ConvLayerParams,
    GateCache, GatedConvCache, LayerGrads, PointwiseParams,
};
pub use tape::{LeafGrads, NodeId, ParamSlot, Tape};
pub use tensor::Tensor;

/// Anything with an ordered list of trainable tensors.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.params().into_iter().map(Tensor::zeros_like).collect()
    }
}
