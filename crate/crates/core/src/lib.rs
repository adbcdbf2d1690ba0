//! Multi-output CNN engine for reading `base^exponent` expressions from images.
//!
//! The crate contains everything from tensors up: convolution kernels, a
//! shared-trunk network with two softmax heads, Adam, a deterministic
//! synthetic dataset generator, the training/evaluation harness, and the
//! binary dataset and checkpoint formats.

pub mod conv;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use datagen::{generate_dataset, Dataset, GenConfig, Sample, SampleMeta};
pub use error::{Error, Result};
pub use eval::{evaluate, histogram, robustness_sweep, Attribute, Bins, Bucket, EvalReport};
pub use io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset, Checkpoint};
pub use nn::{ArchConfig, Gradients, MultiOutputModel};
pub use optim::{AdamConfig, AdamState, HeadWeights, LossBreakdown};
pub use rng::Rng;
pub use tensor::{matmul, Scalar, Tensor};
pub use train::{train, EpochRecord, ResumeState, TrainConfig, TrainOutcome, Trainer};
