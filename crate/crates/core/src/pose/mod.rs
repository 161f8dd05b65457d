//! Camera pose from 2D-3D scene-coordinate correspondences.

mod ransac;
mod solver;

pub use ransac::{
    build_correspondences, predict_pixels, sample_pixels,
    localize_frame, ransac_pose, CoordPredictor, GroundTruthPredictor, LocalizationResult, RansacConfig,
    RoundDiagnostics,
};
pub use solver::{
    nearly_collinear, refine_pose, reprojection_cost, reprojection_errors, solve_p4p, BEHIND_CAMERA_PX,
    MINIMAL_MAX_RESIDUAL_PX,
};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no hypothesis reached the inlier quorum")]
    NoValidHypothesis,
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error("scene-coordinate prediction failed: {0}")]
    Predictor(String),
}

/// A pixel and the scene point predicted to be imaged there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub scene_point: Vector3<f64>,
}
