//! Learned rigid registration of partial point clouds.
//!
//! The crate provides a dual-branch (rotation / translation) point encoder
//! with cross-cloud feature exchange, the regression heads that iteratively
//! refine a rigid transform, its training objectives, a synthetic data
//! pipeline, evaluation metrics and a point-to-point ICP baseline.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the precision used by the command line tools: training
//! and inference run in `f32`, gradient checks in `f64`.

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod icp;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Quaternion32 = geometry::Quaternion<f32>;
pub type Quaternion64 = geometry::Quaternion<f64>;
pub type RigidTransform32 = geometry::RigidTransform<f32>;
pub type RigidTransform64 = geometry::RigidTransform<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type RegistrationNet32 = model::RegistrationNet<f32>;
pub type RegistrationNet64 = model::RegistrationNet<f64>;
pub type RegistrationPair32 = data::RegistrationPair<f32>;
pub type RegistrationPair64 = data::RegistrationPair<f64>;
