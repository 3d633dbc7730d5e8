//! Audio tagging and weakly-supervised sound event detection with a gated
//! convolutional recurrent network.
//!
//! The crate is self-contained: it brings its own tape-based autodiff
//! ([`graph`]), Adam optimizer, log-mel / MFCC feature extraction, a
//! class-balanced sampler, training loop, and DCASE-style tagging and event
//! metrics. Training needs only clip-level labels; per-frame localization
//! falls out of the attention head.
//!
//! Everything is deterministic for a fixed seed: same corpus, same seed,
//! same thread count or not — checkpoints and score reports match bit for
//! bit.

pub mod adam;
pub mod audio;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
mod hash;
mod kernels;
pub mod model;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use dataset::{BalancedSampler, ClipRecord, LabelMap};
pub use error::{Error, Result};
pub use eval::{ClipEvents, EventInterval, PostProcess, SedScores, TagPrediction, TagScores};
pub use graph::{Gradients, Graph, NodeId};
pub use model::{ClipPooling, FramePosteriors, ModelConfig, ModelParams, TaskMode};
pub use tensor::{Tensor, TensorError};
