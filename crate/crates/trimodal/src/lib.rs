//! Tri-modal contrastive alignment toolkit.
//!
//! Three encoders (image, schematic symbol, text prompt) are trained so that
//! matching triples land close together in one embedding space. Training runs
//! in two stages: a warm-up where images and symbols share a single encoder
//! aligned against text, followed by a joint stage where the symbol encoder is
//! split off (initialized by copying the shared weights) and all three
//! encoders are fine-tuned over the three modality pairs.
//!
//! The crate ships desk-scale toy backbones, a deterministic synthetic shape
//! dataset, loaders for the Galaxy10 DECaLS and GalaxyMNIST containers, the
//! contrastive losses with exact analytic gradients, a training orchestrator
//! with ablation variants, and a retrieval/classification evaluation suite.

pub mod contrastive;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod raster;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
