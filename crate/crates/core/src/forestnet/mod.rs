//! Regression trees mapped onto two-hidden-layer networks.
//!
//! Each split node becomes a `tanh` neuron `h_j = tanh(c01·f_d − c01·τ)`
//! looking at a single feature; `h_j ≈ +1` means "route right". Each leaf
//! becomes a neuron connected to the splits on its root path with weight
//! `+c12` when the leaf lies in the right subtree and `−c12` otherwise, and
//! bias `−c12·(|path| − 1)`, so that only the routed leaf has a positive
//! pre-activation. The output layer holds the leaf modes as weights.
//!
//! Leaf weights are stored densely; connections not on a root path are held
//! at exactly zero unless the variant lifts that mask.

mod train;

pub use train::{
    dataset_loss, gradient_check, train, BlockCheck, GradientReport, LossMode, TrainConfig,
    TrainReport, GRADIENT_ERROR_FLOOR,
};

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{feature_vector, FeatureBank};
use crate::forest::{Forest, LeafNode, Node, Tree};
use crate::robust::GmError;
use crate::scene::Frame;

pub const NET_FORMAT: &str = "forestnet.net";
pub const NET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("feature vector has length {got}, expected {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("non-finite activation in {0}; hardness constants too large?")]
    NonFinite(&'static str),
    #[error("activation cache does not belong to this network state")]
    StaleCache,
    #[error("variant {variant} cannot be mapped back {mode}")]
    VariantNotMappable { variant: Variant, mode: MapBackMode },
    #[error("network does not match source tree: {0}")]
    TopologyMismatch(String),
    #[error("training diverged in epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gm(#[from] GmError),
    #[error("unsupported network file: format {format:?} version {version}")]
    UnsupportedFormat { format: String, version: u32 },
    #[error("network serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which parameter blocks are fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Leaf predictions only.
    L,
    /// Leaf predictions and split thresholds.
    LS,
    /// Leaf predictions, thresholds and split-to-leaf connections.
    LST,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::L, Variant::LS, Variant::LST];

    pub fn blocks(self) -> &'static [ParamBlock] {
        match self {
            Variant::L => &[ParamBlock::OutputWeights, ParamBlock::OutputBias],
            Variant::LS => &[
                ParamBlock::OutputWeights,
                ParamBlock::OutputBias,
                ParamBlock::InputBiases,
            ],
            Variant::LST => &[
                ParamBlock::OutputWeights,
                ParamBlock::OutputBias,
                ParamBlock::InputBiases,
                ParamBlock::LeafWeights,
            ],
        }
    }

    pub fn trains(self, block: ParamBlock) -> bool {
        self.blocks().contains(&block)
    }

    /// Constants used when mapping a forest for this variant.
    pub fn default_constants(self) -> NetConstants {
        match self {
            Variant::L => NetConstants::HARD,
            Variant::LS => NetConstants::MODERATE,
            Variant::LST => NetConstants::SOFT,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::L => "L",
            Variant::LS => "LS",
            Variant::LST => "LST",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().trim_start_matches("FNET-") {
            "L" => Ok(Variant::L),
            "LS" => Ok(Variant::LS),
            "LST" => Ok(Variant::LST),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamBlock {
    OutputWeights,
    OutputBias,
    InputBiases,
    LeafWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafActivation {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConstants {
    pub c01: f64,
    pub c12: f64,
    pub activation: LeafActivation,
}

impl NetConstants {
    /// Reproduces tree routing exactly whenever `|f − τ| ≥ 0.5`.
    pub const HARD: NetConstants = NetConstants {
        c01: 10.0,
        c12: 100.0,
        activation: LeafActivation::Sigmoid,
    };
    pub const MODERATE: NetConstants = NetConstants {
        c01: 1.0,
        c12: 10.0,
        activation: LeafActivation::Softmax,
    };
    pub const SOFT: NetConstants = NetConstants {
        c01: 0.1,
        c12: 1.0,
        activation: LeafActivation::Softmax,
    };

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.c01 > 0.0 && self.c12 > 0.0 && self.c01.is_finite() && self.c12.is_finite()) {
            return Err(NetError::InvalidConfig(format!(
                "constants must be positive, got c01 {} c12 {}",
                self.c01, self.c12
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRef {
    Split(usize),
    Leaf(usize),
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter state, used to reject stale activation caches.
/// Clones get a fresh identity; equality ignores it.
#[derive(Debug)]
struct Stamp {
    id: u64,
    version: u64,
}

impl Default for Stamp {
    fn default() -> Self {
        Self {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl Clone for Stamp {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for Stamp {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Network equivalent of one tree: `J` split neurons, `K` leaf neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNet {
    pub constants: NetConstants,
    pub feature_dim: usize,
    /// The single feature each split neuron reads.
    pub split_features: Vec<usize>,
    /// Value of that single active input weight (`c01`); never trained.
    pub input_weights: Vec<f64>,
    pub input_biases: Vec<f64>,
    /// `K × J`.
    pub leaf_weights: DMatrix<f64>,
    /// Active split connections per leaf, ascending.
    pub leaf_paths: Vec<Vec<usize>>,
    /// When set, every entry of `leaf_weights` is live.
    pub masks_lifted: bool,
    pub leaf_biases: Vec<f64>,
    /// Row `k` is the prediction of leaf `k`.
    pub output_weights: Vec<Vector3<f64>>,
    pub output_bias: Vector3<f64>,
    pub root: NodeRef,
    /// `(left, right)` children of each split neuron.
    pub children: Vec<[NodeRef; 2]>,
    /// Source-tree node index of each split / leaf neuron.
    pub split_nodes: Vec<usize>,
    pub leaf_nodes: Vec<usize>,
    #[serde(skip)]
    stamp: Stamp,
}

/// Forward-pass values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    stamp: (u64, u64),
    /// `tanh` outputs, one per split neuron.
    pub split: Vec<f64>,
    /// Leaf pre-activations.
    pub leaf_pre: Vec<f64>,
    pub leaf: Vec<f64>,
    pub output: Vector3<f64>,
}

impl Activations {
    /// Index of the most active leaf neuron.
    pub fn argmax_leaf(&self) -> usize {
        let mut best = 0;
        for (k, a) in self.leaf.iter().enumerate() {
            if *a > self.leaf[best] {
                best = k;
            }
        }
        best
    }
}

/// Per-block gradients; frozen blocks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub output_weights: Vec<Vector3<f64>>,
    pub output_bias: Vector3<f64>,
    pub input_biases: Option<Vec<f64>>,
    pub leaf_weights: Option<DMatrix<f64>>,
}

impl NetGradients {
    pub fn zeros(net: &TreeNet, variant: Variant) -> Self {
        Self {
            output_weights: vec![Vector3::zeros(); net.n_leaves()],
            output_bias: Vector3::zeros(),
            input_biases: variant
                .trains(ParamBlock::InputBiases)
                .then(|| vec![0.0; net.n_splits()]),
            leaf_weights: variant
                .trains(ParamBlock::LeafWeights)
                .then(|| DMatrix::zeros(net.n_leaves(), net.n_splits())),
        }
    }

    /// Flattened values of one block, in the order used by [`TreeNet::param_mut`].
    pub fn block(&self, block: ParamBlock) -> Vec<f64> {
        match block {
            ParamBlock::OutputWeights => self
                .output_weights
                .iter()
                .flat_map(|w| w.iter().copied().collect::<Vec<_>>())
                .collect(),
            ParamBlock::OutputBias => self.output_bias.iter().copied().collect(),
            ParamBlock::InputBiases => self.input_biases.clone().unwrap_or_default(),
            ParamBlock::LeafWeights => self
                .leaf_weights
                .as_ref()
                .map(|m| m.iter().copied().collect())
                .unwrap_or_default(),
        }
    }

    pub fn is_zero(&self) -> bool {
        Variant::ALL
            .iter()
            .flat_map(|v| v.blocks())
            .all(|b| self.block(*b).iter().all(|g| *g == 0.0))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl TreeNet {
    /// Builds the network equivalent of `tree`.
    pub fn from_tree(tree: &Tree, feature_dim: usize, constants: NetConstants) -> Result<Self, NetError> {
        constants.validate()?;
        tree.validate(feature_dim).map_err(NetError::TopologyMismatch)?;
        let mut net = TreeNet {
            constants,
            feature_dim,
            split_features: Vec::new(),
            input_weights: Vec::new(),
            input_biases: Vec::new(),
            leaf_weights: DMatrix::zeros(0, 0),
            leaf_paths: Vec::new(),
            masks_lifted: false,
            leaf_biases: Vec::new(),
            output_weights: Vec::new(),
            output_bias: Vector3::zeros(),
            root: NodeRef::Leaf(0),
            children: Vec::new(),
            split_nodes: Vec::new(),
            leaf_nodes: Vec::new(),
            stamp: Stamp::default(),
        };
        // (split, went_right) pairs on the current path
        let mut signed_paths: Vec<Vec<(usize, bool)>> = Vec::new();
        net.root = net.visit(tree, tree.root(), &mut Vec::new(), &mut signed_paths);

        let (k, j) = (net.leaf_nodes.len(), net.split_nodes.len());
        net.leaf_weights = DMatrix::zeros(k, j);
        for (leaf, path) in signed_paths.iter().enumerate() {
            for &(s, right) in path {
                net.leaf_weights[(leaf, s)] = if right { constants.c12 } else { -constants.c12 };
            }
            net.leaf_biases
                .push(-constants.c12 * (path.len() as f64 - 1.0));
            net.leaf_paths.push(path.iter().map(|p| p.0).collect());
        }
        Ok(net)
    }

    fn visit(
        &mut self,
        tree: &Tree,
        node: usize,
        path: &mut Vec<(usize, bool)>,
        out_paths: &mut Vec<Vec<(usize, bool)>>,
    ) -> NodeRef {
        match tree.nodes[node] {
            Node::Leaf(LeafNode { mode, .. }) => {
                let k = self.leaf_nodes.len();
                self.leaf_nodes.push(node);
                self.output_weights.push(mode);
                out_paths.push(path.clone());
                NodeRef::Leaf(k)
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let j = self.split_nodes.len();
                self.split_nodes.push(node);
                self.split_features.push(feature);
                self.input_weights.push(self.constants.c01);
                self.input_biases.push(-self.constants.c01 * threshold);
                self.children.push([NodeRef::Leaf(usize::MAX); 2]);
                path.push((j, false));
                let l = self.visit(tree, left, path, out_paths);
                path.pop();
                path.push((j, true));
                let r = self.visit(tree, right, path, out_paths);
                path.pop();
                self.children[j] = [l, r];
                NodeRef::Split(j)
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        self.split_nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    /// Threshold implied by the current input bias.
    pub fn threshold(&self, j: usize) -> f64 {
        -self.input_biases[j] / self.input_weights[j]
    }

    fn check_feature(&self, feature: &[f32]) -> Result<(), NetError> {
        if feature.len() != self.feature_dim {
            return Err(NetError::FeatureLength {
                expected: self.feature_dim,
                got: feature.len(),
            });
        }
        Ok(())
    }

    /// Hard routing through the network's own topology and thresholds.
    /// Returns the leaf reached and the smallest `|f − τ|` along the way.
    pub fn route(&self, feature: &[f32]) -> (usize, f64) {
        let mut node = self.root;
        let mut margin = f64::INFINITY;
        loop {
            match node {
                NodeRef::Leaf(k) => return (k, margin),
                NodeRef::Split(j) => {
                    let f = feature[self.split_features[j]] as f64;
                    let tau = self.threshold(j);
                    margin = margin.min((f - tau).abs());
                    node = self.children[j][(f >= tau) as usize];
                }
            }
        }
    }

    /// Layer-1 activations only.
    pub fn split_activations(&self, feature: &[f32]) -> Vec<f64> {
        (0..self.n_splits())
            .map(|j| {
                (self.input_weights[j] * feature[self.split_features[j]] as f64 + self.input_biases[j])
                    .tanh()
            })
            .collect()
    }

    /// Leaf activations from given split activations.
    pub fn leaf_layer(&self, split: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.n_leaves();
        let mut pre = self.leaf_biases.clone();
        for (leaf, z) in pre.iter_mut().enumerate() {
            if self.masks_lifted {
                for (j, h) in split.iter().enumerate() {
                    *z += self.leaf_weights[(leaf, j)] * h;
                }
            } else {
                for &j in &self.leaf_paths[leaf] {
                    *z += self.leaf_weights[(leaf, j)] * split[j];
                }
            }
        }
        let act = match self.constants.activation {
            LeafActivation::Sigmoid => pre.iter().map(|z| sigmoid(*z)).collect(),
            LeafActivation::Softmax => {
                let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = pre.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = e.iter().sum();
                e.iter().map(|v| v / total).collect::<Vec<_>>()
            }
        };
        debug_assert_eq!(act.len(), k);
        (pre, act)
    }

    pub fn output_layer(&self, leaf: &[f64]) -> Vector3<f64> {
        leaf.iter()
            .zip(&self.output_weights)
            .fold(Vector3::zeros(), |acc, (a, w)| acc + w * *a)
            + self.output_bias
    }

    pub fn forward(&self, feature: &[f32]) -> Result<Activations, NetError> {
        self.check_feature(feature)?;
        let split = self.split_activations(feature);
        let (leaf_pre, leaf) = self.leaf_layer(&split);
        if leaf.iter().any(|a| !a.is_finite()) {
            return Err(NetError::NonFinite("leaf layer"));
        }
        let output = self.output_layer(&leaf);
        if !output.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("output layer"));
        }
        Ok(Activations {
            stamp: (self.stamp.id, self.stamp.version),
            split,
            leaf_pre,
            leaf,
            output,
        })
    }

    pub fn predict(&self, feature: &[f32]) -> Result<Vector3<f64>, NetError> {
        Ok(self.forward(feature)?.output)
    }

    /// Adds the gradients of `upstream · q` for the blocks `variant` trains.
    pub fn backward_into(
        &self,
        act: &Activations,
        upstream: &Vector3<f64>,
        grads: &mut NetGradients,
    ) -> Result<(), NetError> {
        if act.stamp != (self.stamp.id, self.stamp.version) {
            return Err(NetError::StaleCache);
        }
        let k = self.n_leaves();
        for (g, a) in grads.output_weights.iter_mut().zip(&act.leaf) {
            *g += upstream * *a;
        }
        grads.output_bias += upstream;
        if grads.input_biases.is_none() && grads.leaf_weights.is_none() {
            return Ok(());
        }

        let d_leaf: Vec<f64> = self.output_weights.iter().map(|w| upstream.dot(w)).collect();
        let d_pre: Vec<f64> = match self.constants.activation {
            LeafActivation::Sigmoid => (0..k)
                .map(|i| d_leaf[i] * act.leaf[i] * (1.0 - act.leaf[i]))
                .collect(),
            LeafActivation::Softmax => {
                let dot: f64 = d_leaf.iter().zip(&act.leaf).map(|(d, a)| d * a).sum();
                (0..k).map(|i| act.leaf[i] * (d_leaf[i] - dot)).collect()
            }
        };
        if let Some(lw) = grads.leaf_weights.as_mut() {
            for leaf in 0..k {
                if self.masks_lifted {
                    for (j, h) in act.split.iter().enumerate() {
                        lw[(leaf, j)] += d_pre[leaf] * h;
                    }
                } else {
                    for &j in &self.leaf_paths[leaf] {
                        lw[(leaf, j)] += d_pre[leaf] * act.split[j];
                    }
                }
            }
        }
        if let Some(ib) = grads.input_biases.as_mut() {
            let mut d_split = vec![0.0; self.n_splits()];
            for leaf in 0..k {
                if self.masks_lifted {
                    for (j, d) in d_split.iter_mut().enumerate() {
                        *d += d_pre[leaf] * self.leaf_weights[(leaf, j)];
                    }
                } else {
                    for &j in &self.leaf_paths[leaf] {
                        d_split[j] += d_pre[leaf] * self.leaf_weights[(leaf, j)];
                    }
                }
            }
            for (j, g) in ib.iter_mut().enumerate() {
                let h = act.split[j];
                *g += d_split[j] * (1.0 - h * h);
            }
        }
        Ok(())
    }

    pub fn backward(
        &self,
        act: &Activations,
        upstream: &Vector3<f64>,
        variant: Variant,
    ) -> Result<NetGradients, NetError> {
        let mut g = NetGradients::zeros(self, variant);
        self.backward_into(act, upstream, &mut g)?;
        Ok(g)
    }

    /// Gradient step `θ ← θ − lr·g` on every block present in `grads`.
    pub fn apply(&mut self, grads: &NetGradients, lr: f64) {
        for (w, g) in self.output_weights.iter_mut().zip(&grads.output_weights) {
            *w -= g * lr;
        }
        self.output_bias -= grads.output_bias * lr;
        if let Some(ib) = &grads.input_biases {
            for (b, g) in self.input_biases.iter_mut().zip(ib) {
                *b -= lr * g;
            }
        }
        if let Some(lw) = &grads.leaf_weights {
            assert!(self.masks_lifted, "leaf weights are masked");
            self.leaf_weights -= lw * lr;
        }
        self.stamp.version += 1;
    }

    pub fn block_len(&self, block: ParamBlock) -> usize {
        match block {
            ParamBlock::OutputWeights => 3 * self.n_leaves(),
            ParamBlock::OutputBias => 3,
            ParamBlock::InputBiases => self.n_splits(),
            ParamBlock::LeafWeights => self.n_leaves() * self.n_splits(),
        }
    }

    /// Mutable access to one scalar parameter. Leaf weights are column-major.
    pub fn param_mut(&mut self, block: ParamBlock, i: usize) -> &mut f64 {
        self.stamp.version += 1;
        match block {
            ParamBlock::OutputWeights => &mut self.output_weights[i / 3][i % 3],
            ParamBlock::OutputBias => &mut self.output_bias[i],
            ParamBlock::InputBiases => &mut self.input_biases[i],
            ParamBlock::LeafWeights => &mut self.leaf_weights.as_mut_slice()[i],
        }
    }

    /// Whether `(leaf, split)` is a connection of the source tree.
    pub fn is_active(&self, leaf: usize, split: usize) -> bool {
        self.leaf_paths[leaf].binary_search(&split).is_ok()
    }

    /// Rebuilds a tree from `source`'s topology with this network's leaf
    /// predictions and, in approximate mode, its thresholds.
    pub fn map_back(&self, source: &Tree, mode: MapBackMode) -> Result<Tree, NetError> {
        let splits = source.split_count();
        if splits != self.n_splits() || source.leaf_count() != self.n_leaves() {
            return Err(NetError::TopologyMismatch(format!(
                "tree has {} splits / {} leaves, network {} / {}",
                splits,
                source.leaf_count(),
                self.n_splits(),
                self.n_leaves()
            )));
        }
        let mut tree = source.clone();
        for (j, &n) in self.split_nodes.iter().enumerate() {
            match &mut tree.nodes[n] {
                Node::Split {
                    feature, threshold, ..
                } if *feature == self.split_features[j] => {
                    if mode == MapBackMode::Approximate {
                        *threshold = self.threshold(j);
                    }
                }
                _ => {
                    return Err(NetError::TopologyMismatch(format!(
                        "node {n} is not the split read by neuron {j}"
                    )))
                }
            }
        }
        for (k, &n) in self.leaf_nodes.iter().enumerate() {
            match &mut tree.nodes[n] {
                Node::Leaf(leaf) => leaf.mode = self.output_weights[k] + self.output_bias,
                Node::Split { .. } => {
                    return Err(NetError::TopologyMismatch(format!(
                        "node {n} is not a leaf"
                    )))
                }
            }
        }
        Ok(tree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapBackMode {
    /// Leaf predictions only; thresholds untouched.
    Exact,
    /// Leaf predictions and thresholds recovered from the input biases.
    Approximate,
}

impl fmt::Display for MapBackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapBackMode::Exact => "exactly",
            MapBackMode::Approximate => "approximately",
        })
    }
}

/// Ensemble of tree networks sharing one feature bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestNet {
    pub nets: Vec<TreeNet>,
    pub variant: Variant,
    pub bank: FeatureBank,
    /// sha256 of the forest file this network was mapped from.
    pub source_forest_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    net: ForestNet,
}

impl ForestNet {
    /// Maps every tree with the variant's default constants.
    pub fn from_forest(forest: &Forest, variant: Variant) -> Result<Self, NetError> {
        Self::with_constants(forest, variant, variant.default_constants())
    }

    pub fn with_constants(
        forest: &Forest,
        variant: Variant,
        constants: NetConstants,
    ) -> Result<Self, NetError> {
        let nets = forest
            .trees
            .iter()
            .map(|t| {
                let mut net = TreeNet::from_tree(t, forest.bank.len(), constants)?;
                net.masks_lifted = variant.trains(ParamBlock::LeafWeights);
                Ok(net)
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        Ok(Self {
            nets,
            variant,
            bank: forest.bank.clone(),
            source_forest_sha256: None,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.nets.len()
    }

    /// One prediction per tree, in tree order.
    pub fn forward_ensemble(&self, feature: &[f32]) -> Result<Vec<Vector3<f64>>, NetError> {
        self.nets.iter().map(|n| n.predict(feature)).collect()
    }

    pub fn predict(&self, frame: &Frame, x: usize, y: usize) -> Result<Vec<Vector3<f64>>, NetError> {
        self.forward_ensemble(&feature_vector(frame, x, y, &self.bank))
    }

    pub fn map_back(&self, source: &Forest, mode: MapBackMode) -> Result<Forest, NetError> {
        let allowed = match mode {
            MapBackMode::Exact => self.variant == Variant::L,
            MapBackMode::Approximate => self.variant != Variant::LST,
        };
        if !allowed {
            return Err(NetError::VariantNotMappable {
                variant: self.variant,
                mode,
            });
        }
        if source.trees.len() != self.nets.len() || source.bank != self.bank {
            return Err(NetError::TopologyMismatch(
                "forest and network differ in trees or features".into(),
            ));
        }
        let trees = self
            .nets
            .iter()
            .zip(&source.trees)
            .map(|(n, t)| n.map_back(t, mode))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Forest {
            trees,
            bank: source.bank.clone(),
            config: source.config.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String, NetError> {
        Ok(serde_json::to_string(&NetFile {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            net: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let file: NetFile = serde_json::from_str(text)?;
        if file.format != NET_FORMAT || file.version != NET_VERSION {
            return Err(NetError::UnsupportedFormat {
                format: file.format,
                version: file.version,
            });
        }
        for (i, n) in file.net.nets.iter().enumerate() {
            let (k, j) = (n.n_leaves(), n.n_splits());
            let consistent = n.leaf_weights.shape() == (k, j)
                && n.leaf_paths.len() == k
                && n.leaf_biases.len() == k
                && n.output_weights.len() == k
                && n.input_biases.len() == j
                && n.input_weights.len() == j
                && n.split_features.len() == j
                && n.children.len() == j
                && n.split_features.iter().all(|d| *d < file.net.bank.len());
            if !consistent {
                return Err(NetError::TopologyMismatch(format!(
                    "tree network {i} has inconsistent shapes"
                )));
            }
        }
        Ok(file.net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
