//! Multimodal visual encoding: predicts voxel responses from a stimulus
//! image and its caption with a single-stream transformer, trained on a
//! Pearson-correlation objective.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense tensors and a taped reverse-mode graph
//! * [`encoder`] the network, its parameters and checkpoints
//! * [`objective`], [`optim`] and [`train`] the loss, AdamW and the training loop
//! * [`data`] dataset container, preprocessing, folds and the synthetic generator
//! * [`eval`] per-ROI reports, run comparison and the ablation harness

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
