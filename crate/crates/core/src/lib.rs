//! Articulated blendshape body fitting from 2D keypoints and silhouettes.
//!
//! The crate fits the pose, shape and global transform of a procedural
//! 16-joint blendshape body to image-domain constraints: robustly weighted
//! 2D keypoints (optionally re-expressed through calibrated virtual
//! joints), an L1 silhouette overlay and an asymmetric distance-field
//! boundary term. Optimization is staged block L-BFGS with strong Wolfe
//! line search; a synthetic scene harness and metric suite make every
//! piece verifiable.

pub mod camera;
pub mod cli;
pub mod energy;
pub mod error;
pub mod field;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
