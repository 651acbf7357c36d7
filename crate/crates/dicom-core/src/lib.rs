//! Core library for self-distilled masked pre-training on grayscale images:
//! data pipeline, ViT backbone, grouped masking, projection/decoder heads,
//! the combined training objective, downstream evaluation (probing,
//! fine-tuning, segmentation transfer), and representation analysis.

pub mod analysis;
pub mod checkpoint;
pub mod classify;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod objective;
pub mod rng;
pub mod segment;
pub mod trainer;
pub mod vit;

pub use config::RunConfig;
pub use data::{Dataset, ImageBatch, Split, ViewPair};
pub use error::{Error, Result};
