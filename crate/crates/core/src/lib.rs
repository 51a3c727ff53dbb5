//! Ground-marker SLAM for parking lots.
//!
//! Painted ground markers are reduced to confidence-weighted line features,
//! registered with contour-normal-assisted point-to-line ICP, fused into a
//! compact vector map and kept up to date during later localization runs.
//! A deterministic simulator stands in for the camera and segmentation stack.

pub mod camera;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod localization;
pub mod mapping;
pub mod pipeline;
pub mod registration;
pub mod sim;

pub use exec::Execution;
pub use geometry::{Line2, Point2, Pose2, TrajectoryStats};
