//! Multi-granularity edge detection on top of a frozen feature provider.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! piece of the pipeline:
//!
//! - [`backbone`]: the frozen feature-provider contract, a deterministic toy
//!   provider and the mask-edge guidance maps.
//! - [`stn`]: the trainable side transfer network producing coarse, medium,
//!   fine and final edge maps.
//! - [`granularity`]: pseudo-label ladders, consensus sampling and
//!   arbitrary-granularity blending.
//! - [`losses`]: balanced BCE, side, diversity, guide and total losses with
//!   analytic gradients.
//! - [`eval`]: edge thinning, tolerance matching and ODS/OIS/AP reports.
//! - [`data`]: samples, augmentation and batch preparation.
//! - [`train`]: Adam, learning-rate schedule and the training step.
//! - [`synthetic`]: generated multi-annotator scenes for tests and demos.
//!
//! File formats, PNG IO and the command line live in the companion
//! `granedge` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod backbone;
pub mod data;
mod error;
pub mod eval;
pub mod granularity;
mod grid;
pub mod losses;
pub mod math;
pub mod nn;
pub mod params;
pub mod stn;
pub mod synthetic;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Map, Mask};
pub use tensor::Tensor;
