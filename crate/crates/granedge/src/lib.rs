//! File formats, dataset IO, training driver and command line for the
//! `granedge-core` edge detector.
//!
//! - [`pngio`]: 8-bit PNG images, masks and maps.
//! - [`dataset`]: manifests and the `images/` + `annotations/` layout.
//! - [`features`]: `.feat` bundle files, the feature cache and the adapter
//!   for features exported from a pretrained model.
//! - [`checkpoint`]: versioned network + optimiser snapshots.
//! - [`config`]: flat `key=value` configuration files.
//! - [`report`]: parallel evaluation, JSON reports and PR curves.
//! - [`run`]: training, inference and label export on files.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod features;
pub mod pngio;
pub mod report;
pub mod run;

pub use error::{Error, Result};
pub use granedge_core as core;
