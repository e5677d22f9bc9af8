//! A toy cascaded latent video upsampler.
//!
//! The low-resolution latent passes through a 3D convolution, bilinear
//! upsampling and a second 3D convolution, is concatenated with the noisy
//! high-resolution latent and runs through DiT blocks whose attention
//! follows the configured mode and temporal units. Training regresses the
//! rectified-flow velocity; inference integrates it from noise.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod extend;
pub mod infer;
pub mod net;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{GvrConfig, OptimizerKind, SamplerChoice, TrainConfig};
pub use data::{synthetic_pairs, DatasetSpec, PairDegradation, TrainPair};
pub use extend::{extend_temporal, ExtensionPlan};
pub use infer::{collect_trace, infer, infer_clip};
pub use net::{Conditioning, GvrModel};
pub use params::ParamSet;
pub use train::{train, TrainReport};
