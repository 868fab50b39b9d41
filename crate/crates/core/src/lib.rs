//! Volumetric segmentation engine: a residual encoder-decoder trained with a
//! soft dice, focal and active-contour loss, built on a small reverse-mode
//! tensor library.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
