//! Weakly supervised 3D detection toolkit for lidar scans.
//!
//! The crate is organised around the stages of a label-free proposal and
//! evaluation pipeline:
//!
//! - [`cloudio`]: Velodyne `.bin` ingestion, synthetic scenes, detection files.
//! - [`frontview`]: azimuth/elevation projection into a dense XYZ front-view map.
//! - [`geometry`]: rotated box algebra, IoU kernels and NMS.
//! - [`uvpm`]: anchor grid, density filtering, voting and proposal refinement.
//! - [`micronet`]: a small reverse-mode autodiff tensor library with attention,
//!   RoIAlign, point set layers and the distillation loss.
//! - [`eval`]: matching and average precision in the KITTI style.
//! - [`config`]: flat `key = value` run configuration.

pub mod cloudio;
pub mod config;
pub mod eval;
pub mod frontview;
pub mod geometry;
pub mod micronet;
pub mod spatial;
pub mod uvpm;

pub use cloudio::{Point, PointCloud, SceneSpec, SyntheticScene, TruthBox};
pub use frontview::{FrontViewMap, ProjectionConfig};
pub use geometry::{Box3D, Rect2D};
pub use uvpm::{Proposal, UvpmConfig};
