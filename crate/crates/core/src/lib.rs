//! Point-cloud registration with rectified virtual corresponding points.
//!
//! The pipeline extracts per-point features with a dynamic-graph edge
//! convolution network, conditions them across the two clouds with a small
//! attention block, builds virtual corresponding points (VCPs) from a soft
//! matching matrix, rectifies them with a learned per-point offset (the
//! correction walk) and finally solves the rigid pose in closed form.
//!
//! Everything runs on a small reverse-mode autodiff tape in [`autodiff`], so
//! the losses in [`loss`] backpropagate through the Procrustes solve.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geom;
pub mod gradsuite;
pub mod icp;
pub mod loss;
pub mod matching;
pub mod model;
pub mod procrustes;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geom::{PointCloud, RigidTransform};
