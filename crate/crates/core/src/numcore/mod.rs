//! Dense numerics, feed-forward networks and differentiation.

mod grad;
mod linalg;
mod mlp;
mod optim;
pub mod tape;

pub use grad::{
    loss_and_param_grad, matching_loss_input_grad, matching_loss_value, param_grad, tape_forward,
    GradMode, Loss, MatchingGrad, TapeParams,
};
pub use linalg::{all_finite, dot, squared_distance, Matrix, Vector};
pub use mlp::{Activation, ForwardCache, Layer, LayerOffsets, MlpSpec, QNetwork};
pub use optim::{Optimizer, OptimizerConfig};

pub(crate) use linalg::check_len;
