//! Experiment plumbing: datasets, synthetic data, manifests and the run pipeline.

pub mod dataset;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod synthetic;
