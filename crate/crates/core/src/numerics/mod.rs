//! Dense tensors, reverse-mode autodiff, Adam and seeded randomness.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_param_grads, finite_diff_check, GradCheckReport, Objective};
pub use optim::{adam_step, clip_grad_norm, grad_norm, AdamConfig, OptState};
pub use params::{ParamId, ParamStore};
pub use rng::{gaussian, RngStream};
pub use scalar::{gemm, Scalar};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
