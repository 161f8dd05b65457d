//! Preemptive RANSAC over scene-coordinate correspondences.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::solver::{refine_pose, reprojection_errors, solve_p4p};
use super::{Correspondence, PoseError};
use crate::forest::Forest;
use crate::forestnet::ForestNet;
use crate::robust::{geometric_median, GmConfig};
use crate::scene::{CameraIntrinsics, CameraPose, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub hypotheses: usize,
    /// Reprojection error below which a correspondence is an inlier, pixels.
    pub inlier_px: f64,
    /// A hypothesis needs strictly more inliers than this to survive.
    pub min_inliers: usize,
    /// Levenberg-Marquardt iterations per refinement.
    pub refine_iters: usize,
    /// Inliers used when refining during elimination rounds (evenly strided).
    pub max_refine_points: usize,
    /// Levenberg-Marquardt iterations per pass of the final refinement.
    pub final_refine_iters: usize,
    /// Upper bound on final refine-then-recollect passes; stops early once
    /// the inlier set no longer changes.
    pub final_refine_passes: usize,
    /// Minimal-sample draws per hypothesis before giving up on it.
    pub draw_attempts: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypotheses: 1280,
            inlier_px: 10.0,
            min_inliers: 4,
            refine_iters: 5,
            max_refine_points: 500,
            final_refine_iters: 100,
            final_refine_passes: 10,
            draw_attempts: 16,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if self.hypotheses == 0 || !(self.inlier_px > 0.0) || self.draw_attempts == 0 {
            return Err(PoseError::InvalidConfig(format!(
                "hypotheses {} inlier_px {} draw_attempts {}",
                self.hypotheses, self.inlier_px, self.draw_attempts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub hypotheses: usize,
    pub best_inliers: usize,
    /// Lowest score among hypotheses kept this round.
    pub worst_kept_inliers: usize,
    /// Highest score among hypotheses dropped this round.
    pub best_dropped_inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub pose: CameraPose,
    /// Indices of the correspondences consistent with `pose`.
    pub inliers: Vec<usize>,
    pub correspondences: usize,
    /// Hypotheses that reached the quorum before elimination.
    pub valid_hypotheses: usize,
    pub rounds: Vec<RoundDiagnostics>,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    id: usize,
    pose: CameraPose,
    inliers: usize,
}

fn inlier_indices(pose: &CameraPose, corr: &[Correspondence], k: &CameraIntrinsics, px: f64) -> Vec<usize> {
    reprojection_errors(pose, corr, k)
        .iter()
        .enumerate()
        .filter(|(_, e)| **e < px)
        .map(|(i, _)| i)
        .collect()
}

fn strided(idx: &[usize], max: usize) -> Vec<usize> {
    if max == 0 || idx.len() <= max {
        return idx.to_vec();
    }
    (0..max).map(|i| idx[i * idx.len() / max]).collect()
}

fn refine_on_inliers(
    pose: &CameraPose,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    max_points: usize,
    iters: usize,
) -> CameraPose {
    let inl = inlier_indices(pose, corr, k, cfg.inlier_px);
    if inl.len() < 4 {
        return *pose;
    }
    let subset: Vec<Correspondence> = strided(&inl, max_points).iter().map(|i| corr[*i]).collect();
    refine_pose(pose, &subset, k, iters).0
}

/// Draws hypotheses from random 4-subsets, scores them by inlier count,
/// then repeatedly keeps the better half and refines the survivors on their
/// inliers until one pose remains.
pub fn ransac_pose(
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, PoseError> {
    cfg.validate()?;
    if corr.len() < 4 {
        return Err(PoseError::InsufficientCorrespondences(corr.len()));
    }
    let n = corr.len();
    let mut hyps: Vec<Hypothesis> = (0..cfg.hypotheses)
        .into_par_iter()
        .filter_map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            for _ in 0..cfg.draw_attempts {
                let pick = rand::seq::index::sample(&mut rng, n, 4);
                let sample = [corr[pick.index(0)], corr[pick.index(1)], corr[pick.index(2)], corr[pick.index(3)]];
                if let Ok(pose) = solve_p4p(&sample, k) {
                    let inliers = inlier_indices(&pose, corr, k, cfg.inlier_px).len();
                    return Some(Hypothesis { id, pose, inliers });
                }
            }
            None
        })
        .filter(|h| h.inliers > cfg.min_inliers)
        .collect();
    if hyps.is_empty() {
        return Err(PoseError::NoValidHypothesis);
    }
    let valid_hypotheses = hyps.len();

    let mut rounds = Vec::new();
    while hyps.len() > 1 {
        hyps.sort_by(|a, b| b.inliers.cmp(&a.inliers).then(a.id.cmp(&b.id)));
        let dropped = hyps.split_off(hyps.len().div_ceil(2));
        rounds.push(RoundDiagnostics {
            hypotheses: hyps.len() + dropped.len(),
            best_inliers: hyps[0].inliers,
            worst_kept_inliers: hyps.last().map_or(0, |h| h.inliers),
            best_dropped_inliers: dropped.first().map_or(0, |h| h.inliers),
        });
        hyps.par_iter_mut().for_each(|h| {
            h.pose = refine_on_inliers(&h.pose, corr, k, cfg, cfg.max_refine_points, cfg.refine_iters);
            h.inliers = inlier_indices(&h.pose, corr, k, cfg.inlier_px).len();
        });
    }
    let mut pose = hyps[0].pose;
    let mut inliers = inlier_indices(&pose, corr, k, cfg.inlier_px);
    for _ in 0..cfg.final_refine_passes {
        if inliers.len() < 4 {
            break;
        }
        let subset: Vec<Correspondence> = inliers.iter().map(|i| corr[*i]).collect();
        pose = refine_pose(&pose, &subset, k, cfg.final_refine_iters).0;
        let next = inlier_indices(&pose, corr, k, cfg.inlier_px);
        let stable = next == inliers;
        inliers = next;
        if stable {
            break;
        }
    }
    Ok(LocalizationResult {
        pose,
        inliers,
        correspondences: n,
        valid_hypotheses,
        rounds,
    })
}

/// Anything that maps an RGB pixel to one or more scene-coordinate predictions.
pub trait CoordPredictor: Sync {
    fn predict(&self, frame: &Frame, x: usize, y: usize) -> Result<Vec<Vector3<f64>>, PoseError>;
}

impl CoordPredictor for Forest {
    fn predict(&self, frame: &Frame, x: usize, y: usize) -> Result<Vec<Vector3<f64>>, PoseError> {
        Ok(Forest::predict(self, frame, x, y))
    }
}

impl CoordPredictor for ForestNet {
    fn predict(&self, frame: &Frame, x: usize, y: usize) -> Result<Vec<Vector3<f64>>, PoseError> {
        ForestNet::predict(self, frame, x, y).map_err(|e| PoseError::Predictor(e.to_string()))
    }
}

/// Returns the frame's ground-truth scene coordinate; an upper bound on accuracy.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthPredictor;

impl CoordPredictor for GroundTruthPredictor {
    fn predict(&self, frame: &Frame, x: usize, y: usize) -> Result<Vec<Vector3<f64>>, PoseError> {
        Ok(frame.scene_coord(x, y).into_iter().collect())
    }
}

/// `count` distinct pixels drawn uniformly from a `width × height` image.
pub fn sample_pixels(width: usize, height: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = width * height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, total, count.min(total))
        .into_iter()
        .map(|i| (i % width, i / width))
        .collect()
}

/// Predictions for each pixel, in pixel order.
pub fn predict_pixels(
    frame: &Frame,
    predictor: &dyn CoordPredictor,
    pixels: &[(usize, usize)],
) -> Result<Vec<Vec<Vector3<f64>>>, PoseError> {
    pixels
        .par_iter()
        .map(|&(x, y)| predictor.predict(frame, x, y))
        .collect()
}

/// One correspondence per pixel from the robust average of its predictions,
/// or one per prediction when `robust` is `None`.
pub fn build_correspondences(
    pixels: &[(usize, usize)],
    predictions: &[Vec<Vector3<f64>>],
    robust: Option<&GmConfig>,
) -> Result<Vec<Correspondence>, PoseError> {
    let mut out = Vec::new();
    for (&(x, y), preds) in pixels.iter().zip(predictions) {
        if preds.is_empty() {
            continue;
        }
        let pixel = Vector2::new(x as f64, y as f64);
        match robust {
            Some(gm) => out.push(Correspondence {
                pixel,
                scene_point: geometric_median(preds, gm).map_err(|e| PoseError::Predictor(e.to_string()))?,
            }),
            None => out.extend(preds.iter().map(|p| Correspondence {
                pixel,
                scene_point: *p,
            })),
        }
    }
    Ok(out)
}

/// Samples pixels from an RGB frame, predicts their scene coordinates and
/// estimates the camera pose.
pub fn localize_frame(
    frame: &Frame,
    intrinsics: &CameraIntrinsics,
    predictor: &dyn CoordPredictor,
    robust: Option<&GmConfig>,
    sample_count: usize,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, PoseError> {
    let pixels = sample_pixels(frame.width, frame.height, sample_count, cfg.seed);
    let preds = predict_pixels(frame, predictor, &pixels)?;
    let corr = build_correspondences(&pixels, &preds, robust)?;
    ransac_pose(&corr, intrinsics, cfg)
}
