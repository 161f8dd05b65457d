//! Scene-coordinate and camera-pose accuracy.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::CameraPose;

/// A scene-coordinate prediction is an inlier strictly below this distance.
pub const INLIER_THRESHOLD_M: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid prediction/ground-truth pairs")]
    EmptyInput,
    #[error("scene {0:?} has no frames")]
    EmptyScene(String),
    #[error("{predictions} predictions but {ground_truth} ground-truth entries")]
    LengthMismatch { predictions: usize, ground_truth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordMetrics {
    pub count: usize,
    pub inliers: usize,
    pub inlier_fraction: f64,
    /// Mean distance of the inliers; `None` without inliers.
    pub mean_inlier_distance: Option<f64>,
}

/// Inlier statistics over pairs whose ground truth is known.
pub fn coord_metrics(
    predictions: &[Vector3<f64>],
    ground_truth: &[Option<Vector3<f64>>],
) -> Result<CoordMetrics, MetricsError> {
    if predictions.len() != ground_truth.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let dists: Vec<f64> = predictions
        .iter()
        .zip(ground_truth)
        .filter_map(|(p, g)| g.map(|g| (p - g).norm()))
        .collect();
    if dists.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let inl: Vec<f64> = dists.iter().copied().filter(|d| *d < INLIER_THRESHOLD_M).collect();
    Ok(CoordMetrics {
        count: dists.len(),
        inliers: inl.len(),
        inlier_fraction: inl.len() as f64 / dists.len() as f64,
        mean_inlier_distance: (!inl.is_empty()).then(|| inl.iter().sum::<f64>() / inl.len() as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    /// Mean of the per-frame inlier fractions.
    pub frame_mean_inlier_fraction: f64,
    /// Inliers over predictions, pooled across frames.
    pub pooled_inlier_fraction: f64,
    pub mean_inlier_distance: Option<f64>,
}

pub fn aggregate_coords(frames: &[CoordMetrics]) -> Result<CoordSummary, MetricsError> {
    let count: usize = frames.iter().map(|f| f.count).sum();
    if frames.is_empty() || count == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let inliers: usize = frames.iter().map(|f| f.inliers).sum();
    let dist_sum: f64 = frames
        .iter()
        .filter_map(|f| f.mean_inlier_distance.map(|d| d * f.inliers as f64))
        .sum();
    Ok(CoordSummary {
        frame_mean_inlier_fraction: frames.iter().map(|f| f.inlier_fraction).sum::<f64>() / frames.len() as f64,
        pooled_inlier_fraction: inliers as f64 / count as f64,
        mean_inlier_distance: (inliers > 0).then(|| dist_sum / inliers as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseThresholds {
    pub translation_m: f64,
    pub rotation_deg: f64,
    /// When set, an error exactly at a threshold is a failure.
    pub strict: bool,
}

impl Default for PoseThresholds {
    fn default() -> Self {
        Self {
            translation_m: 0.05,
            rotation_deg: 5.0,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub translation_error: f64,
    /// Degrees, in `[0, 180]`.
    pub rotation_error: f64,
    pub correct: bool,
}

/// Rotation angle of `r` in radians, stable near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (axis.norm() / 2.0).atan2((r.trace() - 1.0) / 2.0)
}

pub fn pose_metrics(estimate: &CameraPose, gt: &CameraPose) -> PoseMetrics {
    pose_metrics_with(estimate, gt, &PoseThresholds::default())
}

pub fn pose_metrics_with(estimate: &CameraPose, gt: &CameraPose, th: &PoseThresholds) -> PoseMetrics {
    let translation_error = (estimate.translation - gt.translation).norm();
    let rotation_error = rotation_angle(&(estimate.rotation * gt.rotation.transpose())).to_degrees();
    PoseMetrics {
        translation_error,
        rotation_error,
        correct: within_thresholds(translation_error, rotation_error, th),
    }
}

/// The 5 cm / 5° style success test.
pub fn within_thresholds(translation_m: f64, rotation_deg: f64, th: &PoseThresholds) -> bool {
    let within = |v: f64, bound: f64| if th.strict { v < bound } else { v <= bound };
    within(translation_m, th.translation_m) && within(rotation_deg, th.rotation_deg)
}

/// Median; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene: String,
    pub frames: usize,
    pub median_translation: f64,
    pub median_rotation: f64,
    pub correct_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub scenes: Vec<SceneSummary>,
    /// Mean over scenes of the per-scene median errors.
    pub median_translation: f64,
    pub median_rotation: f64,
    /// Correct frames over all frames, percent.
    pub percent_correct: f64,
}

/// Per-scene medians, their mean across scenes, and the overall success rate.
pub fn aggregate(per_scene: &[(String, Vec<PoseMetrics>)]) -> Result<PoseSummary, MetricsError> {
    if per_scene.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut scenes = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for (name, frames) in per_scene {
        if frames.is_empty() {
            return Err(MetricsError::EmptyScene(name.clone()));
        }
        let t: Vec<f64> = frames.iter().map(|f| f.translation_error).collect();
        let r: Vec<f64> = frames.iter().map(|f| f.rotation_error).collect();
        let ok = frames.iter().filter(|f| f.correct).count();
        correct += ok;
        total += frames.len();
        scenes.push(SceneSummary {
            scene: name.clone(),
            frames: frames.len(),
            median_translation: median(&t).expect("non-empty"),
            median_rotation: median(&r).expect("non-empty"),
            correct_fraction: ok as f64 / frames.len() as f64,
        });
    }
    let n = scenes.len() as f64;
    Ok(PoseSummary {
        median_translation: scenes.iter().map(|s| s.median_translation).sum::<f64>() / n,
        median_rotation: scenes.iter().map(|s| s.median_rotation).sum::<f64>() / n,
        percent_correct: 100.0 * correct as f64 / total as f64,
        scenes,
    })
}
