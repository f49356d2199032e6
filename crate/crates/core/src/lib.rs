//! Trajectory-vocabulary planning with a sparse mixture-of-experts scorer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape and a gradient checker.
//! - [`vocab`]: trajectories, kinematic sampling and k-means vocabularies.
//! - [`world`]: seeded synthetic driving scenarios and their geometric oracle.
//! - [`model`]: the transformer scorer with sparse MoE feed-forward layers.
//! - [`grpo`]: group-relative policy optimisation of the Gaussian score heads.
//! - [`ensemble`]: weighted trajectory averaging across checkpoints.
//! - [`cli`]: the `trajmoe` command-line pipeline.

pub mod numerics;
pub mod geometry;
pub mod sig17;
pub mod vocab;
pub mod world;
pub mod model;
pub mod grpo;
pub mod ensemble;
pub mod cli;
