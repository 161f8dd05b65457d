//! Leaf fitting by Gaussian mean-shift.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Modes closer than this are merged after convergence.
pub const MODE_MERGE_TOL: f64 = 1e-4;
const SHIFT_TOL: f64 = 1e-8;
const MAX_SHIFT_ITERS: usize = 300;
/// `exp` of anything below this is exactly zero in f64.
const EXP_UNDERFLOW: f64 = -746.0;
const SNAP_TOL: f64 = MODE_MERGE_TOL * 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafNode {
    pub mode: Vector3<f64>,
    /// Number of samples within one bandwidth of `mode`.
    pub support: usize,
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for i in 0..3 {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    false
}

/// Runs mean-shift from `start` over `points` (with multiplicities) until the
/// shift drops below tolerance.
pub fn mean_shift(
    start: Vector3<f64>,
    points: &[(Vector3<f64>, usize)],
    bandwidth: f64,
) -> Vector3<f64> {
    mean_shift_until(start, points, bandwidth, &[])
}

/// Mean-shift that stops on reaching any of `known`: a converged mode is a
/// fixed point, so a run that lands on one would only merge into it.
fn mean_shift_until(
    start: Vector3<f64>,
    points: &[(Vector3<f64>, usize)],
    bandwidth: f64,
    known: &[Vector3<f64>],
) -> Vector3<f64> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut y = start;
    for _ in 0..MAX_SHIFT_ITERS {
        if let Some(q) = known.iter().find(|q| (*q - y).norm() < SNAP_TOL) {
            return *q;
        }
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for (p, count) in points {
            let e = -(y - p).norm_squared() * inv;
            if e < EXP_UNDERFLOW {
                continue;
            }
            let w = e.exp() * *count as f64;
            num += p * w;
            den += w;
        }
        if den <= 0.0 {
            break;
        }
        let next = num / den;
        let moved = (next - y).norm();
        y = next;
        if moved < SHIFT_TOL {
            break;
        }
    }
    y
}

/// Count of samples within one bandwidth of `mode`.
pub fn support_of(mode: &Vector3<f64>, samples: &[Vector3<f64>], bandwidth: f64) -> usize {
    samples
        .iter()
        .filter(|s| (*s - mode).norm() <= bandwidth)
        .count()
}

/// Highest-support mean-shift mode of the samples reaching a leaf.
///
/// Every distinct sample seeds one mean-shift run. Converged modes closer
/// than [`MODE_MERGE_TOL`] are merged; ties in support go to the
/// lexicographically smallest mode.
///
/// # Panics
/// If `samples` is empty.
pub fn fit_leaf_mode(samples: &[Vector3<f64>], bandwidth: f64) -> LeafNode {
    assert!(!samples.is_empty(), "a leaf needs at least one sample");
    // identical seeds converge identically, so seed once per distinct point
    let mut distinct: Vec<(Vector3<f64>, usize)> = Vec::new();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for s in sorted {
        match distinct.last_mut() {
            Some((p, c)) if *p == s => *c += 1,
            _ => distinct.push((s, 1)),
        }
    }

    let mut modes: Vec<Vector3<f64>> = Vec::new();
    for (seed, _) in &distinct {
        let m = mean_shift_until(*seed, &distinct, bandwidth, &modes);
        if !modes.iter().any(|q| (q - m).norm() < MODE_MERGE_TOL) {
            modes.push(m);
        }
    }

    let mut best = LeafNode {
        mode: modes[0],
        support: support_of(&modes[0], samples, bandwidth),
    };
    for m in modes.into_iter().skip(1) {
        let support = support_of(&m, samples, bandwidth);
        if support > best.support || (support == best.support && lex_less(&m, &best.mode)) {
            best = LeafNode { mode: m, support };
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let p = Vector3::new(1.0, -2.0, 0.5);
        let leaf = fit_leaf_mode(&[p], 0.05);
        assert_eq!(leaf.mode, p);
        assert_eq!(leaf.support, 1);
    }

    #[test]
    fn outlier_is_ignored() {
        let a = Vector3::new(1.0, 1.0, 1.0);
        let b = Vector3::new(3.0, 0.0, 1.0);
        let mut samples: Vec<_> = (0..9)
            .map(|i| a + Vector3::new(0.001 * (i as f64 - 4.0), 0.0005 * (i % 3) as f64, 0.0))
            .collect();
        samples.push(b);
        let leaf = fit_leaf_mode(&samples, 0.05);
        assert!((leaf.mode - a).norm() < 1e-3, "{:?}", leaf.mode);
        assert_eq!(leaf.support, 9);
    }

    #[test]
    fn tie_goes_to_lexicographically_smaller_mode() {
        let c1 = Vector3::new(2.0, 0.0, 0.0);
        let c2 = Vector3::new(1.0, 5.0, 0.0);
        let jitter = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.002, 0.0, 0.0),
            Vector3::new(0.0, 0.002, 0.0),
        ];
        let samples: Vec<_> = jitter
            .iter()
            .map(|j| c1 + j)
            .chain(jitter.iter().map(|j| c2 + j))
            .collect();
        let leaf = fit_leaf_mode(&samples, 0.05);
        // both clusters have support 3; c2 has the smaller x coordinate
        assert_eq!(leaf.support, 3);
        assert!((leaf.mode - c2).norm() < 0.01);
        let reversed: Vec<_> = samples.iter().rev().copied().collect();
        assert_eq!(fit_leaf_mode(&reversed, 0.05), leaf);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn chosen_mode_is_best_supported_basin(
            pts in proptest::collection::vec((0.0..0.2f64, 0.0..0.2f64, 0.0..0.1f64), 1..=10)
        ) {
            let bw = 0.05;
            let samples: Vec<Vector3<f64>> = pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            let leaf = fit_leaf_mode(&samples, bw);
            let weighted: Vec<(Vector3<f64>, usize)> = samples.iter().map(|s| (*s, 1)).collect();
            // brute force: seed mean-shift from every node of a grid covering the samples
            let lo = samples.iter().fold(Vector3::repeat(f64::INFINITY), |a, s| a.inf(s)) - Vector3::repeat(bw);
            let hi = samples.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, s| a.sup(s)) + Vector3::repeat(bw);
            let step = bw / 2.0;
            let n = ((hi - lo) / step).map(|v| v.ceil() as usize + 1);
            let mut best = 0;
            for i in 0..n.x {
                for j in 0..n.y {
                    for k in 0..n.z {
                        let seed = lo + Vector3::new(i as f64, j as f64, k as f64) * step;
                        let m = mean_shift(seed, &weighted, bw);
                        best = best.max(support_of(&m, &samples, bw));
                    }
                }
            }
            proptest::prop_assert!(leaf.support >= best, "{} < {}", leaf.support, best);
            proptest::prop_assert!(leaf.support >= 1 && leaf.mode.iter().all(|v| v.is_finite()));
        }
    }
}
