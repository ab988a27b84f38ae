//! Primitive tensor kernels: forward computation plus the matching
//! vector-Jacobian product for every differentiable operation.
//!
//! Kernels are pure functions, generic over the element type so the gradient
//! checker can run them at `f64`. The tape (`crate::tape`) records which
//! kernel produced which node and replays the VJPs in reverse.

pub mod conv;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod pointwise;
pub mod resize;
pub mod softmax;

pub use conv::{conv2d, conv2d_vjp, conv_out_dim};
pub use loss::{cross_entropy, cross_entropy_vjp};
pub use matmul::{bmm, bmm_vjp, linear, linear_vjp, transpose12, transpose12_vjp};
pub use norm::{batchnorm_eval, batchnorm_eval_vjp, batchnorm_train, batchnorm_train_vjp, BnTrainSaved};
pub use pointwise::*;
pub use resize::{avg_pool2, avg_pool2_vjp, bilinear_resize, bilinear_resize_vjp};
pub use softmax::{softmax_axis, softmax_axis_vjp};
