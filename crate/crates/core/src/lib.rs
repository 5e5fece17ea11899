//! Pseudo-label generation for open-vocabulary 3D detection.
//!
//! The crate is organised as a pipeline:
//!
//! * [`geom`]: projection, rotated-box IoU and oriented box fitting.
//! * [`scene`]: synthetic LiDAR/camera scenes and an oracle 2D seeker.
//! * [`proposal`]: lifting 2D detections to scored 3D box proposals.
//! * [`nn`]: a small float64 layer library with explicit backward passes.
//! * [`denoiser`]: the conditional diffusion refiner and its confidence head.
//! * [`eval`]: matching, average precision and box error statistics.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod proposal;
pub mod scene;

pub use error::{Error, Result};
pub use geom::{Box2D, Box3D, CameraModel, Point3};
pub use scene::{Category, Detection2D, Scene, SeekerNoiseConfig};

pub use proposal::{ImcvConfig, Proposal};
