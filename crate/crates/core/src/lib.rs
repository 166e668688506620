//! Reconstruction of per-frame deforming head-like surfaces from a monocular
//! frame sequence: a canonical signed-distance field plus a two-part dynamic
//! deformation field, optimized under prior-guided differentiable volumetric
//! rendering, with a synthetic-data generator that makes the whole pipeline
//! verifiable at desk scale.

pub mod deform;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod loss;
pub mod proxy;
pub mod render;
pub mod tape;

pub use error::{Error, Result};
pub use geometry::{euler_to_rotation, project, ray_through_pixel, CameraPose, Intrinsics, Ray};
