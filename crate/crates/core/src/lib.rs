//! MugenNet: a hybrid Transformer + CNN polyp segmentation network built on
//! a small dense-tensor engine with reverse-mode autodiff.

pub mod autodiff;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
