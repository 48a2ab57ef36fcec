//! Incremental object detection toolkit.
//!
//! Implements a detection-transformer style training pipeline for
//! incremental object detection: bipartite set-prediction matching and
//! loss, detector knowledge distillation through merged pseudo labels,
//! distribution-preserving exemplar replay, the strict and traditional
//! phase protocols and COCO-style evaluation. A small per-query linear
//! detector over synthetic features exercises the whole loop.

pub mod distillation;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod exemplar;
pub mod fsutil;
pub mod geometry;
pub mod ingestion;
pub mod losses;
pub mod labels;
pub mod matching;
pub mod metrics;
pub mod prediction;
pub mod protocol;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
