//! Mask-classification segmentation at desk scale.
//!
//! The crate contains a small reverse-mode tensor engine ([`graph`]), a
//! MaskFormer-style network and a per-pixel baseline ([`model`]), the
//! set-prediction training objective ([`losses`], [`matching`]), both
//! inference strategies ([`inference`]), evaluation ([`metrics`]), a synthetic
//! many-class scene generator ([`data`]), the optimizer and training loop
//! ([`train`]), and the batch command-line surface ([`cli`]).

pub mod ablation;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod segment;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
