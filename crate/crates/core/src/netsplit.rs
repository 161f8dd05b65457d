//! Decomposition of a tree network into sub-tree networks.
//!
//! Cutting a depth-`r` tree at depth `r − r̃` yields one sub-network per node
//! on the cut. Each sub-network owns the split neurons of its depth-`r̃`
//! subtree and references, by index, the split neurons on the chain above
//! it. Those upper neurons are stored once in the [`TreeNet`] and shared, so
//! a parameter update is seen by every sub-network. Leaves above the cut form
//! sub-networks with no splits of their own.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forestnet::{LeafActivation, NetError, NodeRef, TreeNet};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("sub-tree depth {subtree} must be in 1..={depth}")]
    InvalidDepth { subtree: usize, depth: usize },
    #[error("network has live connections outside the tree paths; it cannot be split")]
    NotTreeStructured,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Exact fraction `numerator / denominator` in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u128,
    pub denominator: u128,
}

impl Ratio {
    pub fn new(numerator: u128, denominator: u128) -> Self {
        fn gcd(a: u128, b: u128) -> u128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(numerator, denominator).max(1);
        Self {
            numerator: numerator / g,
            denominator: denominator / g,
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

/// Split-neuron count of a complete depth-`r` tree divided by that of one
/// sub-network after splitting into depth-`r̃` sub-trees:
/// `(2^r − 1) / (2^r̃ − 1 + r − r̃)`.
pub fn reduction_factor(depth: u32, subtree_depth: u32) -> Result<Ratio, SplitError> {
    if subtree_depth == 0 || subtree_depth > depth || depth >= 127 {
        return Err(SplitError::InvalidDepth {
            subtree: subtree_depth as usize,
            depth: depth as usize,
        });
    }
    let full = (1u128 << depth) - 1;
    let per_subnet = (1u128 << subtree_depth) - 1 + (depth - subtree_depth) as u128;
    Ok(Ratio::new(full, per_subnet))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNet {
    pub root: NodeRef,
    /// Shared split neurons above the cut, root first.
    pub ancestors: Vec<usize>,
    /// Split neurons owned by this sub-network.
    pub splits: Vec<usize>,
    /// Leaf neurons, ascending.
    pub leaves: Vec<usize>,
}

impl SubNet {
    /// Split neurons this sub-network needs, shared ones included.
    pub fn split_neurons(&self) -> usize {
        self.ancestors.len() + self.splits.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub original_depth: usize,
    pub subtree_depth: usize,
    /// Split neurons above the cut, stored once.
    pub shared_splits: Vec<usize>,
    pub subnets: Vec<SubNet>,
    pub total_splits: usize,
    pub total_leaves: usize,
}

impl SplitPlan {
    pub fn cut_depth(&self) -> usize {
        self.original_depth - self.subtree_depth
    }

    /// Reduction factor predicted for a complete tree of this depth.
    pub fn complete_tree_factor(&self) -> Ratio {
        reduction_factor(self.original_depth as u32, self.subtree_depth as u32)
            .expect("validated at planning")
    }

    /// Largest per-sub-network split-neuron count in the actual tree.
    pub fn max_subnet_splits(&self) -> usize {
        self.subnets.iter().map(SubNet::split_neurons).max().unwrap_or(0)
    }

    /// Monolithic split count over [`SplitPlan::max_subnet_splits`].
    pub fn actual_factor(&self) -> Ratio {
        Ratio::new(self.total_splits as u128, self.max_subnet_splits().max(1) as u128)
    }
}

fn node_depths(net: &TreeNet) -> (Vec<usize>, usize) {
    let mut depth = vec![0; net.n_splits()];
    let mut max = 0;
    let mut stack = vec![(net.root, 0usize)];
    while let Some((n, d)) = stack.pop() {
        match n {
            NodeRef::Split(j) => {
                depth[j] = d;
                stack.push((net.children[j][0], d + 1));
                stack.push((net.children[j][1], d + 1));
            }
            NodeRef::Leaf(_) => max = max.max(d),
        }
    }
    (depth, max)
}

fn collect(net: &TreeNet, root: NodeRef, splits: &mut Vec<usize>, leaves: &mut Vec<usize>) {
    match root {
        NodeRef::Leaf(k) => leaves.push(k),
        NodeRef::Split(j) => {
            splits.push(j);
            collect(net, net.children[j][0], splits, leaves);
            collect(net, net.children[j][1], splits, leaves);
        }
    }
}

/// Plans the split of `net` into sub-networks of depth `subtree_depth`.
pub fn plan_split(net: &TreeNet, subtree_depth: usize) -> Result<SplitPlan, SplitError> {
    let (_, depth) = node_depths(net);
    if subtree_depth == 0 || subtree_depth > depth {
        return Err(SplitError::InvalidDepth {
            subtree: subtree_depth,
            depth,
        });
    }
    if net.masks_lifted {
        for k in 0..net.n_leaves() {
            for j in 0..net.n_splits() {
                if !net.is_active(k, j) && net.leaf_weights[(k, j)] != 0.0 {
                    return Err(SplitError::NotTreeStructured);
                }
            }
        }
    }
    let cut = depth - subtree_depth;
    let mut shared = Vec::new();
    let mut subnets = Vec::new();
    // preorder walk so sub-networks come out in leaf order
    let mut stack = vec![(net.root, 0usize, Vec::<usize>::new())];
    while let Some((node, d, chain)) = stack.pop() {
        match node {
            NodeRef::Split(j) if d < cut => {
                shared.push(j);
                let mut next = chain.clone();
                next.push(j);
                stack.push((net.children[j][1], d + 1, next.clone()));
                stack.push((net.children[j][0], d + 1, next));
            }
            _ => {
                let mut splits = Vec::new();
                let mut leaves = Vec::new();
                collect(net, node, &mut splits, &mut leaves);
                splits.sort_unstable();
                leaves.sort_unstable();
                subnets.push(SubNet {
                    root: node,
                    ancestors: chain,
                    splits,
                    leaves,
                });
            }
        }
    }
    shared.sort_unstable();
    Ok(SplitPlan {
        original_depth: depth,
        subtree_depth,
        shared_splits: shared,
        subnets,
        total_splits: net.n_splits(),
        total_leaves: net.n_leaves(),
    })
}

/// Evaluates `net` through its sub-networks. Shared upper activations are
/// computed once; a softmax leaf layer is normalized across all sub-networks.
pub fn forward_split(plan: &SplitPlan, net: &TreeNet, feature: &[f32]) -> Result<Vector3<f64>, SplitError> {
    if feature.len() != net.feature_dim {
        return Err(NetError::FeatureLength {
            expected: net.feature_dim,
            got: feature.len(),
        }
        .into());
    }
    if plan.total_splits != net.n_splits() || plan.total_leaves != net.n_leaves() {
        return Err(SplitError::Net(NetError::TopologyMismatch(
            "plan was made for another network".into(),
        )));
    }
    let split_act = |j: usize| {
        (net.input_weights[j] * feature[net.split_features[j]] as f64 + net.input_biases[j]).tanh()
    };
    let mut h = vec![0.0; net.n_splits()];
    for &j in &plan.shared_splits {
        h[j] = split_act(j);
    }

    let mut pre: Vec<(usize, f64)> = Vec::with_capacity(net.n_leaves());
    for sub in &plan.subnets {
        for &j in &sub.splits {
            h[j] = split_act(j);
        }
        for &k in &sub.leaves {
            let z = net.leaf_paths[k]
                .iter()
                .fold(net.leaf_biases[k], |z, &j| z + net.leaf_weights[(k, j)] * h[j]);
            pre.push((k, z));
        }
    }
    pre.sort_by_key(|(k, _)| *k);
    let act: Vec<f64> = match net.constants.activation {
        LeafActivation::Sigmoid => pre.iter().map(|(_, z)| 1.0 / (1.0 + (-z).exp())).collect(),
        LeafActivation::Softmax => {
            let max = pre.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = pre.iter().map(|(_, z)| (z - max).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|v| v / total).collect()
        }
    };
    Ok(net.output_layer(&act))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forestnet::tests::{random_feature, random_tree};
    use crate::forestnet::NetConstants;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factors_are_exact() {
        assert_eq!(reduction_factor(3, 2).unwrap(), Ratio::new(7, 4));
        assert_eq!(reduction_factor(3, 2).unwrap().as_f64(), 1.75);
        let r = reduction_factor(15, 13).unwrap();
        assert_eq!((r.numerator, r.denominator), (32767, 8193));
        assert!((r.as_f64() - 4.0).abs() < 1e-3);
        assert_eq!(reduction_factor(8, 8).unwrap(), Ratio::new(1, 1));
        assert!(reduction_factor(3, 0).is_err());
        assert!(reduction_factor(3, 4).is_err());
    }

    #[test]
    fn identity_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TreeNet::from_tree(&random_tree(&mut rng, 3, 4), 4, NetConstants::HARD).unwrap();
        let plan = plan_split(&net, 3).unwrap();
        assert_eq!(plan.subnets.len(), 1);
        assert!(plan.shared_splits.is_empty());
        assert_eq!(plan.complete_tree_factor(), Ratio::new(1, 1));
        for _ in 0..100 {
            let f = random_feature(&mut rng, 4);
            assert_eq!(forward_split(&plan, &net, &f).unwrap(), net.predict(&f).unwrap());
        }
        assert!(matches!(plan_split(&net, 4), Err(SplitError::InvalidDepth { .. })));
        assert!(matches!(plan_split(&net, 0), Err(SplitError::InvalidDepth { .. })));
    }

    #[test]
    fn plans_tile_the_tree_and_count_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in 1..=6usize {
            let net = TreeNet::from_tree(&random_tree(&mut rng, r, 5), 5, NetConstants::HARD).unwrap();
            for rt in 1..=r {
                let plan = plan_split(&net, rt).unwrap();
                assert_eq!(plan.subnets.len(), 1 << (r - rt));
                let mut splits: Vec<usize> = plan.shared_splits.clone();
                let mut leaves: Vec<usize> = Vec::new();
                for s in &plan.subnets {
                    assert_eq!(s.split_neurons(), (1 << rt) - 1 + (r - rt));
                    assert!(s.ancestors.iter().all(|a| plan.shared_splits.contains(a)));
                    splits.extend(&s.splits);
                    leaves.extend(&s.leaves);
                }
                splits.sort_unstable();
                leaves.sort_unstable();
                assert_eq!(splits, (0..net.n_splits()).collect::<Vec<_>>());
                assert_eq!(leaves, (0..net.n_leaves()).collect::<Vec<_>>());
                assert_eq!(plan.actual_factor(), plan.complete_tree_factor());
            }
        }
    }

    #[test]
    fn split_forward_matches_monolithic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for constants in [NetConstants::HARD, NetConstants::SOFT] {
            let net = TreeNet::from_tree(&random_tree(&mut rng, 5, 6), 6, constants).unwrap();
            for rt in 1..=5 {
                let plan = plan_split(&net, rt).unwrap();
                for _ in 0..300 {
                    let f = random_feature(&mut rng, 6);
                    let a = forward_split(&plan, &net, &f).unwrap();
                    let b = net.predict(&f).unwrap();
                    assert!((a - b).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn shared_weight_update_reaches_every_subnet() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = TreeNet::from_tree(&random_tree(&mut rng, 3, 4), 4, NetConstants::SOFT).unwrap();
        let plan = plan_split(&net, 1).unwrap();
        let root = plan.shared_splits[0];
        assert!(plan.subnets.iter().all(|s| s.ancestors[0] == root));
        let f = random_feature(&mut rng, 4);
        let before = forward_split(&plan, &net, &f).unwrap();
        net.input_biases[root] += 3.0;
        let after = forward_split(&plan, &net, &f).unwrap();
        assert_ne!(before, after);
        assert!((after - net.predict(&f).unwrap()).norm() < 1e-9);
    }

    #[test]
    fn unbalanced_tree_leaves_above_cut_become_subnets() {
        use crate::forest::{LeafNode, Node, Tree};
        let leaf = |x: f64| {
            Node::Leaf(LeafNode {
                mode: Vector3::new(x, 0.0, 0.0),
                support: 1,
            })
        };
        let split = |left, right| Node::Split {
            feature: 0,
            threshold: 0.5,
            left,
            right,
        };
        // root -> (leaf, split -> (leaf, split -> (leaf, leaf)))
        let tree = Tree {
            nodes: vec![
                split(1, 2),
                leaf(0.0),
                split(3, 4),
                leaf(1.0),
                split(5, 6),
                leaf(2.0),
                leaf(3.0),
            ],
        };
        let net = TreeNet::from_tree(&tree, 1, NetConstants::HARD).unwrap();
        let plan = plan_split(&net, 1).unwrap();
        assert_eq!(plan.original_depth, 3);
        assert_eq!(plan.subnets.len(), 3);
        assert_eq!(plan.max_subnet_splits(), 3);
        assert_eq!(plan.actual_factor(), Ratio::new(1, 1));
        assert_eq!(plan.complete_tree_factor(), Ratio::new(7, 3));
    }

    #[test]
    fn lifted_live_masks_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = TreeNet::from_tree(&random_tree(&mut rng, 2, 3), 3, NetConstants::SOFT).unwrap();
        net.masks_lifted = true;
        assert!(plan_split(&net, 1).is_ok());
        let (k, j) = (0..net.n_leaves())
            .flat_map(|k| (0..net.n_splits()).map(move |j| (k, j)))
            .find(|(k, j)| !net.is_active(*k, *j))
            .unwrap();
        net.leaf_weights[(k, j)] = 0.5;
        assert!(matches!(plan_split(&net, 1), Err(SplitError::NotTreeStructured)));
    }
}
