//! 6D object pose estimation from depth point clouds.
//!
//! The pipeline refines an incomplete, noisy object point cloud with an
//! encoder-decoder completion network, fuses per-point texture and geometry
//! features through EdgeConv graph convolutions, regresses per-point pose
//! hypotheses with confidence scores, and evaluates with the standard
//! ADD / ADD-S / AUC metrics. Everything runs on a from-scratch reverse-mode
//! autodiff engine in double precision.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod mmf;
pub mod nn;
pub mod pointcloud;
pub mod pose;
pub mod prn;

pub use error::{Error, Result};
