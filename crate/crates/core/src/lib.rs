//! Super-resolution of wireless channel-characteristic maps.
//!
//! The crate synthesizes urban propagation rasters ([`scene`]), prepares them
//! for learning ([`dataset`]), and trains a deep–shallow residual CNN with
//! multi-kernel attention ([`model`], [`train`]) using its own reverse-mode
//! differentiation engine ([`autodiff`]). [`loss`] holds the masked losses and
//! evaluation metrics, [`export`] writes rasters as PGM or CSV, and [`cli`]
//! backs the `chansr` binary.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod export;
pub mod loss;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
