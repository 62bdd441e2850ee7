//! Desk-scale brain-to-image reconstruction.
//!
//! Linear decoders map synthetic voxel responses to three feature spaces (text
//! embedding `c`, autoencoder latent `z`, low-level visual features). A toy
//! latent diffusion model turns `(c, z)` into a draft image, and a gradient
//! loop then adjusts `(c, z)` until the draft's low-level features match the
//! decoded ones.

pub mod aligner;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod generator;
pub mod image_io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
