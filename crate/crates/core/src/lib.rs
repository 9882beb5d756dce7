//! Cross-modal meta-concept graphs for video captioning.
//!
//! The pipeline learns word-aligned visual regions from captions alone,
//! trains a concept localizer on them, encodes the localized concepts with a
//! dynamic kNN graph, encodes detected scene graphs per frame and across
//! frames, and decodes captions with an LSTM trained by cross-entropy or
//! self-critical reinforcement.

pub mod autograd;
pub mod captioner;
pub mod cmgf;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod localizer;
pub mod metagraph;
pub mod metalearner;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod scenegraph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Mat;
