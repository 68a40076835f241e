//! Semi-supervised point-cloud segmentation with pseudo-label guided point
//! contrastive learning.

pub mod augment;
pub mod cloud;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod scene_io;
pub mod seed;
pub mod split;
pub mod synth;
pub mod trainer;

pub use cloud::{voxelize, PointCloud, SceneSet, VoxelGrid, IGNORE};
pub use error::{Error, Result};
