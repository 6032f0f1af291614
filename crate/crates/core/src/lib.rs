//! Correspondence hallucination at desk scale.
//!
//! A small attention network predicts, for every source keypoint, a
//! probability map over where its correspondent lies in the target view,
//! whether that correspondent is visible, occluded or outside the target
//! frame. The maps are scored with the Neural Reprojection Error (NRE) and
//! consumed by a robust absolute pose estimator (P3P inside MSAC, followed
//! by graduated non-convexity refinement). Synthetic textured-plane scenes
//! supply exact ground truth for training and evaluation.
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar for the common cases.

pub mod autodiff;
pub mod corrmap;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gridio;
pub mod net;
pub mod pose;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Camera = geometry::CameraModel<f64>;
pub type Pose = geometry::RigidPose<f64>;
pub type CorrMap = corrmap::CorrespondenceMap<f64>;
