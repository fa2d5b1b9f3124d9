//! Average-image auditing of image-age classifiers.
//!
//! The crate answers one question about a trained age classifier: does it
//! decide from genuine age traces (for example in-field sensor defects) or
//! from image content that happens to correlate with capture time? It does
//! so by classifying four variants of class-average images and comparing
//! the resulting accuracies with the accuracy on ordinary inputs.
//!
//! Module overview:
//!
//! - [`image`], [`io`], [`rng`], [`dataset`]: pixel container, PNG and
//!   `AVGI` raster I/O, seeded random streams, labeled datasets and splits.
//! - [`avg`]: the four average-image variants and balanced averaging sets.
//! - [`filters`]: median filters, median residuals, the fixed high-pass bank
//!   and the constrained-kernel projection.
//! - [`sensor`]: dark-frame simulation, age-signal estimation and embedding,
//!   defect detection and a synthetic dataset generator.
//! - [`learn`]: a small trainable CNN, optimizers, patching and fusion, and
//!   the external-process classifier adapter.
//! - [`audit`]: the audit protocol, separability metrics and reports.

pub mod audit;
pub mod avg;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod image;
pub mod io;
pub mod learn;
pub mod rng;
pub mod sensor;

pub use error::{Error, ErrorCategory, Result};
pub use image::Image;
pub use rng::Rng;
