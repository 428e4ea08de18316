//! Cascaded 6D pose refinement from feature pyramids.
//!
//! The crate is organized around a single pipeline: a coarse pose estimate is
//! repeatedly corrected by transformer-style refinement stages that sample
//! image features at the projected positions of object surface keypoints.
//! Everything needed to exercise that pipeline end to end on synthetic data —
//! pose parameterizations, keypoint selection, feature pyramids, the refiner
//! itself, losses, evaluation metrics, and a toy training loop — lives here.

pub mod geometry;
pub mod keypoints;
pub mod losses;
pub mod metrics;
pub mod pyramid;
pub mod refiner;
pub mod synth;
pub mod tape;
pub mod tensor;
