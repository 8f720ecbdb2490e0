//! Self-supervised active-stereo depth completion toolkit.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`scene_sim`]: ray-cast scenes, projected blob patterns and interleaved
//!   active/passive stereo sequences with ground truth;
//! - [`sgm`]: census-cost semi-global matching for semi-dense initial depth;
//! - [`landmarks`]: sparse landmark detection, triangulation, tracking and rasterization;
//! - [`losses`]: the interleaved-mode photometric, consistency, smoothness and
//!   sparsity losses, differentiable through [`autodiff`];
//! - [`channel_exchange`]: batch-norm channel exchange with mean and max routing;
//! - [`refine`]: coarse-to-fine variational depth completion driven by the losses;
//! - [`metrics`] and [`io`]: evaluation and file formats.

pub mod autodiff;
pub mod channel_exchange;
pub mod detect;
pub mod geometry;
pub mod image;
pub mod io;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod scene_sim;
pub mod sgm;

pub use autodiff::{Tape, Tensor, Var};
pub use geometry::{DepthMap, DisparityMap, Intrinsics, Pose, StereoRig};
pub use image::{Image, Mask};
