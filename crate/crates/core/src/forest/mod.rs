//! Scene-coordinate regression forest with axis-aligned pixel-difference splits.
//!
//! A split node sends a sample right when `f_d(p) >= τ` and left otherwise.
//! Each leaf keeps a single mean-shift mode, the one with the largest
//! support among the training samples that reached it.

mod mode;
mod train;

pub use mode::{fit_leaf_mode, mean_shift, support_of, LeafNode, MODE_MERGE_TOL};
pub use train::{best_split, draw_candidates, split_reduction, train_forest, train_tree, ForestConfig, TrainingSet};

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{feature_response, FeatureBank};
use crate::scene::Frame;

pub const FOREST_FORMAT: &str = "forestnet.forest";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("need at least 2 training samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("unsupported forest file: format {format:?} version {version}")]
    UnsupportedFormat { format: String, version: u32 },
    #[error("forest serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(LeafNode),
}

/// Binary tree stored as a node array rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// A tree consisting of a single leaf.
    pub fn leaf(mode: Vector3<f64>, support: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf(LeafNode { mode, support })],
        }
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Length of the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut max = 0;
        let mut stack = vec![(self.root(), 0usize)];
        while let Some((n, d)) = stack.pop() {
            match self.nodes[n] {
                Node::Split { left, right, .. } => {
                    stack.push((left, d + 1));
                    stack.push((right, d + 1));
                }
                Node::Leaf(_) => max = max.max(d),
            }
        }
        max
    }

    pub fn split_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
            .count()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.len() - self.split_count()
    }

    /// Index of the leaf reached when `response(d)` gives feature `d`.
    pub fn route(&self, mut response: impl FnMut(usize) -> f32) -> usize {
        let mut n = self.root();
        loop {
            match self.nodes[n] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    n = if response(feature) as f64 >= threshold {
                        right
                    } else {
                        left
                    };
                }
                Node::Leaf(_) => return n,
            }
        }
    }

    pub fn leaf_at(&self, n: usize) -> &LeafNode {
        match &self.nodes[n] {
            Node::Leaf(l) => l,
            Node::Split { .. } => panic!("node {n} is a split"),
        }
    }

    pub fn predict_features(&self, feature: &[f32]) -> Vector3<f64> {
        self.leaf_at(self.route(|d| feature[d])).mode
    }

    /// Structural check: children in range, each node reached exactly once.
    pub fn validate(&self, feature_count: usize) -> Result<(), String> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            if n >= self.nodes.len() || seen[n] {
                return Err(format!("node {n} out of range or reached twice"));
            }
            seen[n] = true;
            if let Node::Split {
                feature,
                left,
                right,
                threshold,
            } = self.nodes[n]
            {
                if feature >= feature_count || !threshold.is_finite() {
                    return Err(format!("split {n} has invalid feature/threshold"));
                }
                stack.push(left);
                stack.push(right);
            }
        }
        if seen.iter().all(|s| *s) {
            Ok(())
        } else {
            Err("unreachable nodes".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub bank: FeatureBank,
    pub config: ForestConfig,
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    forest: Forest,
}

impl Forest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// One prediction per tree for pixel `(x, y)`; features are evaluated lazily.
    pub fn predict(&self, frame: &Frame, x: usize, y: usize) -> Vec<Vector3<f64>> {
        self.trees
            .iter()
            .map(|t| {
                let leaf = t.route(|d| feature_response(frame, x, y, &self.bank.specs[d]));
                t.leaf_at(leaf).mode
            })
            .collect()
    }

    pub fn predict_features(&self, feature: &[f32]) -> Vec<Vector3<f64>> {
        self.trees
            .iter()
            .map(|t| t.predict_features(feature))
            .collect()
    }

    pub fn to_json(&self) -> Result<String, ForestError> {
        Ok(serde_json::to_string(&ForestFile {
            format: FOREST_FORMAT.into(),
            version: FOREST_VERSION,
            forest: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let file: ForestFile = serde_json::from_str(text)?;
        if file.format != FOREST_FORMAT || file.version != FOREST_VERSION {
            return Err(ForestError::UnsupportedFormat {
                format: file.format,
                version: file.version,
            });
        }
        for (i, t) in file.forest.trees.iter().enumerate() {
            t.validate(file.forest.bank.len())
                .map_err(|e| ForestError::InvalidConfig(format!("tree {i}: {e}")))?;
        }
        Ok(file.forest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Depth-2 tree:
    ///        0: f0 >= 10
    ///       /          \
    ///   1: f1 >= -5    2: leaf C
    ///   /       \
    /// 3: leaf A  4: leaf B
    pub(crate) fn depth_two_tree() -> Tree {
        let leaf = |x: f64| {
            Node::Leaf(LeafNode {
                mode: Vector3::new(x, 0.0, 0.0),
                support: 1,
            })
        };
        Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 10.0,
                    left: 1,
                    right: 2,
                },
                Node::Split {
                    feature: 1,
                    threshold: -5.0,
                    left: 3,
                    right: 4,
                },
                leaf(3.0),
                leaf(1.0),
                leaf(2.0),
            ],
        }
    }

    #[test]
    fn routing_matches_manual_trace() {
        let t = depth_two_tree();
        assert_eq!(t.depth(), 2);
        // f0 = 9 < 10 -> left; f1 = -6 < -5 -> left: A
        assert_eq!(t.predict_features(&[9.0, -6.0]).x, 1.0);
        // f0 = 9 -> left; f1 = -5 >= -5 -> right: B (boundary goes right)
        assert_eq!(t.predict_features(&[9.0, -5.0]).x, 2.0);
        // f0 = 10 >= 10 -> right: C regardless of f1
        assert_eq!(t.predict_features(&[10.0, -100.0]).x, 3.0);
    }

    #[test]
    fn single_leaf_tree_predicts_its_mode_everywhere() {
        let t = Tree::leaf(Vector3::new(1.0, 2.0, 3.0), 4);
        assert_eq!(t.depth(), 0);
        for f in [[0.0f32, 0.0], [255.0, -255.0]] {
            assert_eq!(t.predict_features(&f), Vector3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn validate_rejects_cycles() {
        let mut t = depth_two_tree();
        t.nodes[1] = Node::Split {
            feature: 1,
            threshold: 0.0,
            left: 0,
            right: 4,
        };
        assert!(t.validate(2).is_err());
        assert!(depth_two_tree().validate(1).is_err());
        assert!(depth_two_tree().validate(2).is_ok());
    }
}
