//! Blind-spot image denoising with dilated convolutions.
//!
//! A donut-shaped first layer followed by sufficiently dilated `3 x 3`
//! convolutions yields a network whose output at a pixel never depends on the
//! input at that same pixel, so it can be trained directly against the noisy
//! image. The crate bundles the numeric engine, the architecture, a static
//! receptive-field prover for that property, noise synthesis, the adaptive
//! self-supervised losses, evaluation metrics, image I/O and the `n2k` CLI.

pub mod activation;
pub mod analyzer;
pub mod cli;
pub mod config;
pub mod conv;
pub mod dihedral;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod optim;
pub mod patches;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{N2kError, Result};
pub use tensor::{Shape, Tensor};
