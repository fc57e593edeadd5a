//! Layer-selective forensic and quality evaluation of edited images from
//! per-layer model features.
//!
//! The pipeline reads per-layer feature stacks, scores every layer for how well
//! it separates real from edited samples, tunes a low-rank adapter on the chosen
//! layer with a contrastive objective, trains detection and quality decoders on
//! top, and reports detection, quality-correlation and editor-ranking metrics.

pub mod adapter;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod io;
pub mod lsa;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
