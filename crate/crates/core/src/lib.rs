//! Core library for a desk-scale cascaded latent video super-resolution lab.
//!
//! Tensors and a gradient tape, attention kernels, clip I/O, the latent
//! codec, rectified-flow math, flow-guided degradation and curation filters.

pub mod attention;
pub mod autodiff;
pub mod codec;
pub mod conv;
pub mod curation;
pub mod dct;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod media;
pub mod resample;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
