//! Multiple multi-plane image (MMPI) radiance fields on the CPU.
//!
//! A scene is encoded as several NDC-warped multi-plane images facing different
//! directions, optionally accompanied by a centered world-space voxel cube. Rays
//! are sampled independently in every field, merged by distance from the camera
//! and alpha-composited with learned per-voxel reliability weights. Every stage
//! of the pipeline has an exact reverse-mode counterpart so that all grids, the
//! shared color head and the reliability logits can be optimized with Adam.

pub mod appearance;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grids;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reliability;
pub mod renderer;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Camera, MpiFrustum, NdcRay, Pose, Ray, Vec3};
pub use model::{CubeField, FieldId, MmpiModel, MpiField};
