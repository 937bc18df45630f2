//! picr: a prompt-conditioned transformer image codec.
//!
//! A single autoencoder performs variable-rate compression and spatially
//! adaptive (ROI) quality control. Two conditioning planes (a uniform lambda
//! map carrying a scalar rate parameter, and a per-pixel ROI mask) drive
//! prompt-generation networks whose feature pyramids become prompt tokens
//! inside windowed attention blocks. Latents are entropy-coded with a
//! hyperprior (factorized prior for the hyper-latent, mean-scale Gaussian for
//! the image latent) into a decodable container.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! `make_dataset`, `train_toy`, `roundtrip`, `rd_sweep`, `masks`,
//! `attention_maps`, `profile`. The `picr` binary wraps the same entry points
//! as subcommands (`train`, `encode`, `decode`, `eval`, `profile`).

pub mod attention;
pub mod autodiff;
pub mod bitstream;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod conditioning;
pub mod data;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
