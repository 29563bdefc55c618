//! Inverse-compositional Lucas-Kanade alignment on learned feature maps.
//!
//! A two-branch convolutional network turns a template and an input image
//! into three-level pyramids of single-channel feature maps. A damped
//! Gauss-Newton solver then estimates the homography mapping the template
//! into the input, coarse to fine.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod feature;
pub mod geometry;
pub mod loss;
pub mod network;
pub mod solver;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use feature::{FeatureMap, FeaturePyramid, Scale};
pub use geometry::{corner_error, dlt_from_corners, CornerSet, HomographyParams, Point};
pub use network::{Architecture, BlockSpec, Branch, Checkpoint, NetworkParams};
pub use tensor::{Real, Tensor};
