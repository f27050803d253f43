//! Decoding visual stimuli from MEG recordings.
//!
//! The pipeline turns raw multichannel recordings into stimulus-locked epochs,
//! trains a convolutional brain module to regress pretrained image embeddings
//! under a contrastive (CLIP-style) objective, and evaluates the result with
//! retrieval and image-reconstruction metrics. Everything is deterministic
//! given a seed, runs on a single core, and computes in f64 (files store f32).

pub mod baselines;
pub mod brain;
pub mod datastore;
pub mod embeddings;
pub mod error;
pub mod genmetrics;
pub mod linalg;
pub mod losses;
pub mod preprocess;
pub mod report;
pub mod retrieval;
pub mod splits;
pub mod synth;
pub mod trainer;
pub mod windows;

pub use error::{MegError, Result};
