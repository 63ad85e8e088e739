//! Contrastive encoding and dynamic-time-warping alignment of 3D pose sequences.
//!
//! The pipeline: load point sequences ([`pose_io`]), cut them into
//! body-centric normalized windows ([`normalize`]), embed each window with a
//! shallow convolutional [`encoder`] trained by [`training`], and align whole
//! performances with cosine-distance DTW ([`alignment`]). [`evaluation`]
//! scores alignments; [`cli`] exposes everything as subcommands.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, the CLI default.

pub mod alignment;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fmt;
pub mod normalize;
pub mod pose_io;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder = encoder::EncoderParams<f64>;
pub type Encoder32 = encoder::EncoderParams<f32>;
pub type CostMatrix = alignment::CostMatrix<f64>;
pub type AlignmentPath = alignment::AlignmentPath<f64>;
pub type Embeddings = alignment::Embeddings<f64>;
