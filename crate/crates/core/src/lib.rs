//! LiDAR-guided 2D Gaussian surfel reconstruction.
//!
//! A global LiDAR cloud is colorized per image, compressed into a voxelized
//! map of planar 4D (position + gray) Gaussian mixtures, and used both to
//! initialize and to regularize a set of textured surfels trained by
//! differentiable ray-intersection rendering.

pub mod config;
pub mod density;
pub mod geometry;
pub mod gmm;
pub mod mesh;
pub mod pipeline;
pub mod pointcloud;
pub mod raster;
pub mod render;
pub mod scene;
pub mod spatial;
pub mod supervision;
pub mod surfel;
pub mod trainer;
