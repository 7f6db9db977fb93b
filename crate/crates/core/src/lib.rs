//! Threshold-free coronary artery calcium scoring.
//!
//! The crate covers the whole chain: volume handling, a synthetic phantom
//! generator with exact calcium truth, a patch-based 3D heart segmentation
//! network, a 2D slice classifier, a CycleGAN that decomposes a slice into a
//! calcium-free image plus a calcium map, calcium scoring, and the agreement
//! statistics used to compare scan pairs.

pub mod cacslice;
pub mod calgan;
pub mod error;
pub mod filters;
pub mod heartseg;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod scoring;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
