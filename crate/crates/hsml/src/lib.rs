//! Hierarchically structured meta-learning for few-shot regression.
//!
//! The crate couples a gradient-based meta-learner (a MAML-style learned
//! initialization) with a differentiable hierarchical task-clustering
//! pipeline: support sets are embedded by an autoencoder aggregator, softly
//! clustered level by level against learnable centers, and the resulting
//! cluster representation drives a sigmoid gate that customizes the shared
//! initialization per task before inner-loop adaptation. Training, a pure
//! MAML mode, continual cluster expansion, evaluation, and analysis exports
//! are driven by the `hsml` command-line binary.

pub mod aggregator;
pub mod autodiff;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod harness;
pub mod learner;
pub mod params;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
