//! Registration-aided point-cloud place recognition.
//!
//! The crate is organised along the processing pipeline:
//!
//! - [`geometry`], [`numeric`], [`spatial`]: shared types (point clouds, rigid
//!   transforms), small numeric kernels and exact k-nearest-neighbour search.
//! - [`synthgen`]: procedural multi-environment LiDAR traverses with exact poses.
//! - [`features`]: point-wise features, the per-point network and GeM aggregation.
//! - [`regnet`]: light-weight attention, matching matrix, outlier removal,
//!   soft correspondences and weighted Procrustes.
//! - [`icp`]: point-to-point ICP baseline.
//! - [`losses`], [`optim`], [`train`]: metric learning, adversarial objectives
//!   and the alternating training loop.
//! - [`retrieval`]: descriptor index, recall and registration metrics.
//! - [`io`]: file formats.

pub mod error;
pub mod features;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod optim;
pub mod regnet;
pub mod retrieval;
pub mod spatial;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Environment, PointCloud, RigidTransform};
