//! Greedy depth-first forest training.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_leaf_mode, support_of, Forest, ForestError, LeafNode, Node, Tree};
use crate::features::{FeatureBank, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Size of the random `(feature, threshold)` candidate pool per split.
    pub n_candidates: usize,
    pub min_samples_leaf: usize,
    /// Mean-shift bandwidth for leaf modes, meters.
    pub leaf_bandwidth: f64,
    /// Mode seeking at a leaf runs on at most this many of its samples
    /// (deterministic subsample; 0 = all). Support is counted over all.
    pub max_leaf_samples: usize,
    /// Bootstrap-resample the training set for each tree.
    pub bagging: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 5,
            max_depth: 8,
            n_candidates: 500,
            min_samples_leaf: 2,
            leaf_bandwidth: 0.05,
            max_leaf_samples: 500,
            bagging: true,
            seed: 42,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.n_candidates == 0 || self.min_samples_leaf == 0 {
            return Err(ForestError::InvalidConfig(
                "n_candidates and min_samples_leaf must be >= 1".into(),
            ));
        }
        if !(self.leaf_bandwidth > 0.0) {
            return Err(ForestError::InvalidConfig("leaf_bandwidth must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sum: Vector3<f64>,
    sum_sq: Vector3<f64>,
}

impl Moments {
    fn add(&mut self, m: &Vector3<f64>) {
        self.n += 1;
        self.sum += m;
        self.sum_sq += m.component_mul(m);
    }

    /// Sum over coordinates of squared deviations from the mean.
    fn sse(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        (0..3)
            .map(|i| (self.sum_sq[i] - self.sum[i] * self.sum[i] / n).max(0.0))
            .sum()
    }
}

/// Column-major copy of a sample set's features, so split search over one
/// feature touches contiguous memory.
pub struct TrainingSet<'a> {
    pub samples: &'a SampleSet,
    columns: Vec<f32>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(samples: &'a SampleSet) -> Self {
        let n = samples.len();
        let mut columns = vec![0.0f32; n * samples.dim];
        for i in 0..n {
            for (d, &v) in samples.feature(i).iter().enumerate() {
                columns[d * n + i] = v;
            }
        }
        Self { samples, columns }
    }

    pub fn column(&self, d: usize) -> &[f32] {
        let n = self.samples.len();
        &self.columns[d * n..(d + 1) * n]
    }
}

/// Variance reduction `V(S) - |L|/|S| V(L) - |R|/|S| V(R)` of a candidate,
/// with `V` the sum of per-coordinate variances. `None` if either child would
/// hold fewer than `min_leaf` samples.
pub fn split_reduction(
    set: &TrainingSet,
    indices: &[usize],
    feature: usize,
    threshold: f64,
    min_leaf: usize,
) -> Option<f64> {
    let mut all = Moments::default();
    let mut left = Moments::default();
    let mut right = Moments::default();
    let column = set.column(feature);
    for &i in indices {
        let m = &set.samples.targets[i];
        all.add(m);
        if column[i] as f64 >= threshold {
            right.add(m);
        } else {
            left.add(m);
        }
    }
    if left.n < min_leaf || right.n < min_leaf {
        return None;
    }
    Some((all.sse() - left.sse() - right.sse()) / all.n as f64)
}

/// Draws `count` candidates: a uniform feature index and a threshold uniform
/// over the feature's observed range at this node.
///
/// Responses are integral, so any `τ` in `(k, k+1]` routes identically; the
/// draw is placed at the midpoint `k + 0.5`, which keeps every sample at least
/// half an intensity level from the decision boundary. Features that are
/// constant at the node yield no candidate.
pub fn draw_candidates(
    rng: &mut impl Rng,
    set: &TrainingSet,
    indices: &[usize],
    count: usize,
) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let d = rng.random_range(0..set.samples.dim);
        let column = set.column(d);
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &i in indices {
            let v = column[i];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            // consume the threshold draw anyway so the stream stays aligned
            let _: f64 = rng.random();
            continue;
        }
        let u: f64 = rng.random();
        let raw = lo as f64 + u * (hi - lo) as f64;
        let tau = raw.floor().min(hi as f64 - 1.0) + 0.5;
        out.push((d, tau));
    }
    out
}

/// Best candidate by variance reduction; the first maximum wins ties.
pub fn best_split(
    set: &TrainingSet,
    indices: &[usize],
    candidates: &[(usize, f64)],
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for &(d, tau) in candidates {
        if let Some(r) = split_reduction(set, indices, d, tau, min_leaf) {
            if best.is_none_or(|(_, _, b)| r > b) {
                best = Some((d, tau, r));
            }
        }
    }
    best
}

fn all_equal(set: &TrainingSet, indices: &[usize]) -> bool {
    let targets = &set.samples.targets;
    let first = targets[indices[0]];
    indices.iter().all(|&i| targets[i] == first)
}

/// Trains a single tree on `indices` (which may contain repeats).
pub fn train_tree(
    set: &TrainingSet,
    indices: Vec<usize>,
    config: &ForestConfig,
    rng: &mut impl Rng,
) -> Tree {
    let mut nodes: Vec<Option<Node>> = vec![None];
    // (node slot, samples, depth)
    let mut stack = vec![(0usize, indices, 0usize)];
    while let Some((slot, idx, depth)) = stack.pop() {
        let can_split = depth < config.max_depth
            && idx.len() >= 2 * config.min_samples_leaf
            && !all_equal(set, &idx);
        let split = if can_split {
            let candidates = draw_candidates(rng, set, &idx, config.n_candidates);
            best_split(set, &idx, &candidates, config.min_samples_leaf)
                .filter(|&(_, _, r)| r > 0.0)
        } else {
            None
        };
        match split {
            Some((feature, threshold, _)) => {
                let (mut l, mut r) = (Vec::new(), Vec::new());
                let column = set.column(feature);
                for i in idx {
                    if column[i] as f64 >= threshold {
                        r.push(i);
                    } else {
                        l.push(i);
                    }
                }
                let left = nodes.len();
                let right = left + 1;
                nodes.push(None);
                nodes.push(None);
                nodes[slot] = Some(Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                });
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
            None => {
                let samples: Vec<Vector3<f64>> = idx.iter().map(|&i| set.samples.targets[i]).collect();
                nodes[slot] = Some(Node::Leaf(fit_leaf(&samples, config, rng)));
            }
        }
    }
    Tree {
        nodes: nodes.into_iter().map(|n| n.expect("every slot filled")).collect(),
    }
}

fn fit_leaf(samples: &[Vector3<f64>], config: &ForestConfig, rng: &mut impl Rng) -> LeafNode {
    let cap = config.max_leaf_samples;
    if cap == 0 || samples.len() <= cap {
        return fit_leaf_mode(samples, config.leaf_bandwidth);
    }
    let mut picked = rand::seq::index::sample(rng, samples.len(), cap).into_vec();
    picked.sort_unstable();
    let sub: Vec<Vector3<f64>> = picked.into_iter().map(|i| samples[i]).collect();
    let mode = fit_leaf_mode(&sub, config.leaf_bandwidth).mode;
    LeafNode {
        mode,
        support: support_of(&mode, samples, config.leaf_bandwidth),
    }
}

fn tree_seed(seed: u64, tree: usize) -> u64 {
    seed ^ (tree as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains `config.n_trees` trees in parallel. Deterministic for a given seed.
pub fn train_forest(
    set: &SampleSet,
    bank: &FeatureBank,
    config: &ForestConfig,
) -> Result<Forest, ForestError> {
    config.validate()?;
    if set.len() < 2 {
        return Err(ForestError::InsufficientSamples(set.len()));
    }
    if set.dim != bank.len() {
        return Err(ForestError::InvalidConfig(format!(
            "samples have {} features, bank has {}",
            set.dim,
            bank.len()
        )));
    }
    let view = TrainingSet::new(set);
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(config.seed, t));
            let n = set.len();
            let indices = if config.bagging {
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                // order only affects memory locality: partitions and moments are order-free
                idx.sort_unstable();
                idx
            } else {
                (0..n).collect()
            };
            train_tree(&view, indices, config, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        bank: bank.clone(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(rows: &[(Vec<f32>, Vector3<f64>)]) -> SampleSet {
        let mut s = SampleSet::new(rows[0].0.len());
        for (f, m) in rows {
            s.push(f, *m);
        }
        s
    }

    /// Two clusters, only feature 2 separates them.
    fn two_clusters(seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..40 {
            let upper = i % 2 == 0;
            let f = vec![
                rng.random_range(-20..20) as f32,
                rng.random_range(-20..20) as f32,
                if upper {
                    rng.random_range(30..60) as f32
                } else {
                    rng.random_range(-60..-30) as f32
                },
                rng.random_range(-20..20) as f32,
            ];
            let m = if upper {
                Vector3::new(1.0, 1.0, 1.0)
            } else {
                Vector3::new(-1.0, 0.0, 2.0)
            };
            rows.push((f, m));
        }
        set_from(&rows)
    }

    /// Oracle: two-pass variance reduction over every candidate.
    fn oracle_reduction(set: &SampleSet, d: usize, tau: f64) -> Option<f64> {
        let var = |pts: &[Vector3<f64>]| -> f64 {
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / pts.len() as f64
        };
        let all: Vec<_> = set.targets.clone();
        let (mut l, mut r) = (Vec::new(), Vec::new());
        for i in 0..set.len() {
            if set.feature(i)[d] as f64 >= tau {
                r.push(set.targets[i]);
            } else {
                l.push(set.targets[i]);
            }
        }
        if l.is_empty() || r.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        Some(var(&all) - l.len() as f64 / n * var(&l) - r.len() as f64 / n * var(&r))
    }

    #[test]
    fn identical_targets_give_single_leaf() {
        let m = Vector3::new(0.5, 0.25, 2.0);
        let rows: Vec<_> = (0..10).map(|i| (vec![i as f32, -(i as f32)], m)).collect();
        let set = set_from(&rows);
        let bank = FeatureBank::random(2, 5, 0);
        let forest = train_forest(&set, &bank, &ForestConfig::default()).unwrap();
        for t in &forest.trees {
            assert_eq!(t.depth(), 0);
            assert_eq!(t.nodes[0], Node::Leaf(LeafNode { mode: m, support: 10 }));
        }
    }

    #[test]
    fn best_split_matches_exhaustive_oracle() {
        let set = two_clusters(3);
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let view = TrainingSet::new(&set);
        let cands = draw_candidates(&mut rng, &view, &idx, 64);
        let (d, tau, r) = best_split(&view, &idx, &cands, 1).unwrap();
        let oracle_best = cands
            .iter()
            .filter_map(|&(d, t)| oracle_reduction(&set, d, t))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r - oracle_best).abs() < 1e-9);
        assert!((oracle_reduction(&set, d, tau).unwrap() - r).abs() < 1e-9);
        // a perfect separation removes all variance
        assert_eq!(d, 2);
        assert!(r > 0.0);
    }

    #[test]
    fn depth_one_tree_separates_clusters() {
        let set = two_clusters(5);
        let bank = FeatureBank::random(4, 5, 0);
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            n_candidates: 64,
            min_samples_leaf: 1,
            bagging: false,
            ..Default::default()
        };
        let forest = train_forest(&set, &bank, &cfg).unwrap();
        let t = &forest.trees[0];
        assert_eq!(t.depth(), 1);
        assert!(matches!(t.nodes[0], Node::Split { feature: 2, .. }));
        for i in 0..set.len() {
            assert_eq!(t.predict_features(set.feature(i)), set.targets[i]);
        }
        let supports: Vec<usize> = t
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(l) => Some(l.support),
                _ => None,
            })
            .collect();
        assert_eq!(supports, vec![20, 20]);
    }

    #[test]
    fn training_is_deterministic() {
        let set = two_clusters(11);
        let bank = FeatureBank::random(4, 5, 0);
        let cfg = ForestConfig {
            max_depth: 4,
            n_candidates: 16,
            ..Default::default()
        };
        let a = train_forest(&set, &bank, &cfg).unwrap().to_json().unwrap();
        let b = train_forest(&set, &bank, &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let round = crate::forest::Forest::from_json(&a).unwrap();
        assert_eq!(round.to_json().unwrap(), a);
    }

    #[test]
    fn insufficient_samples() {
        let set = set_from(&[(vec![1.0], Vector3::zeros())]);
        let bank = FeatureBank::random(1, 5, 0);
        assert!(matches!(
            train_forest(&set, &bank, &ForestConfig::default()),
            Err(ForestError::InsufficientSamples(1))
        ));
    }

    #[test]
    fn candidate_thresholds_sit_between_integers() {
        let set = two_clusters(2);
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (d, tau) in draw_candidates(&mut rng, &TrainingSet::new(&set), &idx, 200) {
            assert_eq!(tau.fract().abs(), 0.5);
            let vals: Vec<f64> = idx.iter().map(|&i| set.feature(i)[d] as f64).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(tau > lo && tau < hi);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn accepted_splits_reduce_variance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<_> = (0..30)
                .map(|_| {
                    let f: Vec<f32> = (0..3).map(|_| rng.random_range(-10..10) as f32).collect();
                    let m = Vector3::new(rng.random(), rng.random(), rng.random());
                    (f, m)
                })
                .collect();
            let set = set_from(&rows);
            let idx: Vec<usize> = (0..30).collect();
            let view = TrainingSet::new(&set);
            let cands = draw_candidates(&mut rng, &view, &idx, 20);
            for (d, t) in cands {
                if let Some(r) = split_reduction(&view, &idx, d, t, 1) {
                    proptest::prop_assert!(r >= -1e-12);
                }
            }
            let bank = FeatureBank::random(3, 5, 0);
            let cfg = ForestConfig { n_trees: 2, max_depth: 5, n_candidates: 10, ..Default::default() };
            let forest = train_forest(&set, &bank, &cfg).unwrap();
            for t in &forest.trees {
                proptest::prop_assert!(t.depth() <= 5);
                proptest::prop_assert!(t.validate(3).is_ok());
                proptest::prop_assert_eq!(t.leaf_count(), t.split_count() + 1);
            }
        }
    }
}
