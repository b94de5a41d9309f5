//! Landmine risk estimation on gridded tabular data.
//!
//! The crate bundles everything needed to train and evaluate an interpretable
//! risk model over 500 m grid cells:
//!
//! - [`dataset`]: the cell/dataset model, CSV ingestion, easy/hard environment
//!   tagging and a seeded synthetic spatial generator.
//! - [`tensor`]: a small dense kernel (FC, batch norm, SparseMax, Adam) with
//!   hand-written backward passes, all in `f64`.
//! - [`losses`]: cross-entropy, the invariant-risk penalty with its micro-batch
//!   environment scheme, the p-push ranking norm and the pushed tree kernels.
//! - [`models`]: the masked sequential network and its LR/MLP baselines.
//! - [`metrics`]: ROC-AUC, PR-AUC, mean-Height and mean-rHeight.
//! - [`protocols`]: the training loop and the spatial validation protocols
//!   (leave-one-municipality-out, region transfer, fine-tuned transfer).
//! - [`spatial`]: contiguity weights, local Moran's I clusters and GeoJSON/HTML
//!   risk map export.
//! - [`cli`]: the `reland` command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod protocols;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
