//! Multi-granularity vision flow on a small, deterministic substrate.
//!
//! Two synthetic vision encoders see the same image at low and high
//! resolution; a convolutional gate folds the high-resolution context into
//! the low-resolution tokens. Boxes from a tag-then-detect pipeline pool
//! object features from a multi-scale pyramid. Fused tokens, object tokens
//! and text are projected into one sequence and scored by a toy causal model
//! trained in two stages.

pub mod autodiff;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod objects;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, SamplePlan, Tape, Var};
pub use boxes::{BoxConfig, Detection, DetectionSet};
pub use config::RunConfig;
pub use encoders::{EncoderConfig, FeatureGrid, SyntheticEncoders};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionStrategy, GateMode, MergeMethod};
pub use image::{SceneDescriptor, SyntheticImage};
pub use model::{ModelConfig, ModelParams, Segment, TokenSequence};
pub use nn::{FreezeMask, Group, Stage};
pub use objects::{MultiScalePyramid, RoiConfig};
pub use rng::SeedTree;
pub use tensor::Tensor;
