//! Dense tensors, a small feed-forward classifier family, parameter
//! gradients and the second-order input gradient used by gradient matching.

mod model;
mod params;
mod tensor;

pub use model::{
    forward, grad_match_batch, grad_match_input_grad, loss_and_param_grad, per_example_grads, predict, Activation,
    ModelSpec,
};
pub use params::{GradVector, Layout, ParamVector, Segment, SegmentKind};
pub(crate) use tensor::{dot, plane_of};
pub use tensor::{l2_norm, Tensor};
