//! RGB pixel-difference features.
//!
//! A feature compares two offset pixels, each in one colour channel:
//! `I(p + δ1, c1) - I(p + δ2, c2)`. Lookups falling outside the image are
//! clamped to the border, so the response is defined for every pixel and
//! always lies in `[-255, 255]`.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::Frame;

pub const DEFAULT_FEATURE_COUNT: usize = 1000;
pub const DEFAULT_MAX_OFFSET: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }

    fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => Channel::R,
            1 => Channel::G,
            _ => Channel::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub offset1: [i32; 2],
    pub offset2: [i32; 2],
    pub channel1: Channel,
    pub channel2: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub specs: Vec<FeatureSpec>,
    pub rng_seed: u64,
    pub max_offset: i32,
}

impl FeatureBank {
    /// Draws `count` specs with offsets uniform in `[-max_offset, max_offset]²`.
    pub fn random(count: usize, max_offset: i32, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let r = max_offset.max(0);
        let specs = (0..count)
            .map(|_| FeatureSpec {
                offset1: [rng.random_range(-r..=r), rng.random_range(-r..=r)],
                offset2: [rng.random_range(-r..=r), rng.random_range(-r..=r)],
                channel1: Channel::from_index(rng.random_range(0..3)),
                channel2: Channel::from_index(rng.random_range(0..3)),
            })
            .collect();
        Self {
            specs,
            rng_seed,
            max_offset: r,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[inline]
fn clamped(frame: &Frame, x: usize, y: usize, offset: [i32; 2], channel: Channel) -> f32 {
    let cx = (x as i64 + offset[0] as i64).clamp(0, frame.width as i64 - 1) as usize;
    let cy = (y as i64 + offset[1] as i64).clamp(0, frame.height as i64 - 1) as usize;
    frame.intensity(cx, cy, channel.index()) as f32
}

/// Response of one feature at pixel `(x, y)`.
#[inline]
pub fn feature_response(frame: &Frame, x: usize, y: usize, spec: &FeatureSpec) -> f32 {
    clamped(frame, x, y, spec.offset1, spec.channel1)
        - clamped(frame, x, y, spec.offset2, spec.channel2)
}

/// Full `D`-dimensional feature vector at pixel `(x, y)`.
pub fn feature_vector(frame: &Frame, x: usize, y: usize, bank: &FeatureBank) -> Vec<f32> {
    bank.specs
        .iter()
        .map(|s| feature_response(frame, x, y, s))
        .collect()
}

/// Dense row-major matrix of feature vectors with their scene-coordinate labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub targets: Vec<Vector3<f64>>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, feature: &[f32], target: Vector3<f64>) {
        assert_eq!(feature.len(), self.dim, "feature dimension mismatch");
        self.features.extend_from_slice(feature);
        self.targets.push(target);
    }

    /// Deterministic subset holding `fraction` of the samples.
    pub fn subset(&self, fraction: f64, seed: u64) -> SampleSet {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = ((self.len() as f64 * fraction).round() as usize).clamp(1.min(self.len()), self.len());
        idx.truncate(keep);
        idx.sort_unstable();
        let mut out = SampleSet::new(self.dim);
        for i in idx {
            out.push(self.feature(i), self.targets[i]);
        }
        out
    }
}

/// Samples up to `per_frame` valid-depth pixels uniformly from each frame and
/// computes their feature vectors and ground-truth labels.
pub fn extract_samples(
    frames: &[Frame],
    bank: &FeatureBank,
    per_frame: usize,
    seed: u64,
) -> SampleSet {
    let per: Vec<(Vec<f32>, Vec<Vector3<f64>>)> = frames
        .par_iter()
        .enumerate()
        .map(|(fi, frame)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (fi as u64).wrapping_mul(0x9e37_79b9));
            let mut valid = frame.valid_pixels();
            valid.shuffle(&mut rng);
            valid.truncate(per_frame);
            let mut feats = Vec::with_capacity(valid.len() * bank.len());
            let mut targets = Vec::with_capacity(valid.len());
            for (x, y) in valid {
                feats.extend(bank.specs.iter().map(|s| feature_response(frame, x, y, s)));
                targets.push(frame.scene_coord(x, y).expect("valid pixel"));
            }
            (feats, targets)
        })
        .collect();
    let mut set = SampleSet::new(bank.len());
    for (f, t) in per {
        set.features.extend(f);
        set.targets.extend(t);
    }
    set
}
