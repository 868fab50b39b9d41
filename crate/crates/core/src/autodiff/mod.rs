//! Reverse-mode differentiation over [`Tensor`](crate::Tensor) values.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles together with a
//! hand-written backward rule. [`Tape::backward`] sweeps the record in reverse
//! and accumulates gradients into trainable leaves.

mod conv;
mod dropout;
mod elementwise;
pub(crate) mod gemm;
mod norm;
mod tape;
mod upsample;

use serde::{Deserialize, Serialize};

pub use conv::{conv3d_backward, conv3d_forward, conv3d_output_shape, conv_output_extent, ConvAlgo, ConvGrads};
pub use norm::RunningStats;
pub use tape::{Backward, BackwardCtx, Tape, Var};
pub use upsample::upsample_trilinear2x_forward;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}
