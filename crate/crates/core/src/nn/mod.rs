//! Minimal convolutional network engine: layers, loss, optimiser and
//! gradient verification.

pub mod conv;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod pool;
pub mod upsample;

pub use conv::{conv2d, conv2d_backward};
pub use gradcheck::{gradcheck, GradcheckReport, Objective};
pub use layer::{
    flatten_grads, toyfcn, toyfcn_head, toyfcn_trunk, DropoutMode, Init, Layer, LayerKind, LayerSpec, Stack,
    StackTrace, ToyFcnWidths, TOYFCN_STRIDE,
};
pub use loss::{softmax2, softmax_xent_sum, LossOutput, NON_TRIP, TRIP};
pub use optim::{sgd_momentum_step, OptimState, ParamMut};
pub use pool::{maxpool, maxpool_backward};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};
