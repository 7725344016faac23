//! Fairness-aware spam detection on tripartite review graphs.

pub mod augmentation;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod nn;
pub mod metrics;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
