//! Depth-map-assisted face manipulation detection.
//!
//! A patch-wise depth transformer ([`fdmt`]) estimates per-patch face depth
//! from an RGB image, supervised by ground truth composed from a depth
//! oracle and the fake-region mask ([`depth_gt`]). Its features enhance a
//! convolutional classifier ([`backbone`]) at an injection point through
//! multi-head depth attention ([`mda`]). Everything trains jointly under the
//! objective in [`losses`].

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod depth_gt;
pub mod error;
pub mod fdmt;
pub mod gt_io;
pub mod losses;
pub mod mda;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod seeding;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
