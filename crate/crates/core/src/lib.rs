// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod geometry;
pub mod mesh;
pub mod phantom;
pub mod planner;
pub mod voxel;

pub use nalgebra::{Isometry3, Point3, Vector3};

/// Engine version embedded in persisted plans.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Cubic millimetres per litre.
pub const MM3_PER_LITRE: f64 = 1.0e6;
