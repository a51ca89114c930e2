//! Point-cloud semantic segmentation with a dual-stream network
//! (EdgeConv + residual pointwise convolutions), a procedural scene
//! generator with simulation-style and real-style domain profiles,
//! selective fine-tuning, IoU-family metrics, and a streaming pipeline.

pub mod cloud;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod train;

pub use cloud::{LabeledCloud, SemanticClass};
pub use error::{Error, Result};
pub use scalar::Real;
