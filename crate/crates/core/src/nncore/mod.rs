//! Minimal differentiable-operation substrate: tensors, a reverse-mode tape,
//! Adam, multi-head attention and a finite-difference gradient checker.

mod adam;
mod attention;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{
    init_mha, multi_head_attention, read_weights, self_attention, AttentionRecord, AttentionRecorder,
    AttentionStage, AttentionWeights, MhaOutput,
};
pub use gradcheck::{grad_check, grad_check_with_params, relative_error, GradCheckReport, DEFAULT_EPS};
pub use graph::{bce, sigmoid, softmax_in_place, Gradients, Graph, Var, LAYER_NORM_EPS, PROB_CLAMP};
pub use kernels::ConvGeom;
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
