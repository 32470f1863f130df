//! Dense 3D fully convolutional vehicle detection on voxelized lidar point clouds.
//!
//! The pipeline: read a lidar scan ([`io_kitti`]), discretize it onto a binary
//! occupancy grid ([`voxel`]), push the grid through a dual-head 3D conv/deconv
//! network ([`fcn3d`] on top of [`tensor_nn`]), decode corner-offset candidates
//! and suppress overlaps ([`inference`]), and score the result with KITTI-style
//! AP/AOS metrics ([`eval`]). [`synth`] generates deterministic synthetic scenes
//! in the same on-disk format so the whole loop runs at desk scale.

pub mod config;
pub mod eval;
pub mod fcn3d;
pub mod inference;
pub mod io_kitti;
pub mod pipeline;
pub mod synth;
pub mod tensor_nn;
pub mod voxel;
