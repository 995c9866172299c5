//! Spatio-temporal guidance toolkit for hierarchical robot manipulation.
//!
//! The crate turns RGB-D observations and tracked keypoints into the guidance
//! a low-level manipulation policy consumes: canonical 8-waypoint 3D
//! trajectories, a spatial tube around them, task-relevance masks with smooth
//! falloff, cross-modal (RGB + depth) inpainting of distractors, and a depth
//! gradient overlay. Around that core sit a training-sample generator for
//! 2D/3D/4D supervision, the matching evaluation metrics, and a deterministic
//! kinematic simulator that exercises planner/policy hierarchies with periodic
//! replanning.
//!
//! Every operation is a pure function of its inputs. Data-parallel loops go
//! through [`exec`], which dispatches to rayon when the `parallel` feature is
//! enabled and produces bit-identical results either way.

// `!(x > 0.0)` guards are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod exec;
pub mod geometry;
pub mod guidance;
pub mod metrics;
pub mod raster;
pub mod sim;
pub mod trajectory;

pub use exec::ExecMode;
pub use geometry::{
    CameraIntrinsics, DepthMap, Frame, Gripper, Keypose, Mask, Pixel, Point3, PointCloud,
    RigidTransform,
};
pub use trajectory::{CanonicalTrajectory, Track2D, Trajectory3D, CANONICAL_LEN};
