//! Fine-tuning by plain SGD on the Euclidean scene-coordinate loss.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForestNet, NetError, NetGradients, ParamBlock};
use crate::features::SampleSet;
use crate::robust::{gm_backward, gm_forward, GmConfig};

/// Denominator floor of the relative gradient error; below it the error is absolute.
pub const GRADIENT_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Every tree regresses the target on its own.
    PerTree,
    /// The robust average of all trees regresses the target.
    Egm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub gm: GmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 20,
            learning_rate: 0.001,
            seed: 0,
            loss_mode: LossMode::PerTree,
            gm: GmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-set loss before the first epoch and after each epoch.
    pub losses: Vec<f64>,
}

fn unit(r: Vector3<f64>) -> Vector3<f64> {
    let n = r.norm();
    if n > 0.0 {
        r / n
    } else {
        Vector3::zeros()
    }
}

/// Loss of one sample and its gradients, one entry per tree.
fn sample_gradients(
    fnet: &ForestNet,
    feature: &[f32],
    target: &Vector3<f64>,
    mode: LossMode,
    gm: &GmConfig,
    grads: &mut [NetGradients],
) -> Result<f64, NetError> {
    let acts = fnet
        .nets
        .iter()
        .map(|n| n.forward(feature))
        .collect::<Result<Vec<_>, _>>()?;
    match mode {
        LossMode::PerTree => {
            let mut loss = 0.0;
            for ((net, act), g) in fnet.nets.iter().zip(&acts).zip(grads.iter_mut()) {
                let r = act.output - target;
                loss += r.norm();
                net.backward_into(act, &unit(r), g)?;
            }
            Ok(loss)
        }
        LossMode::Egm => {
            let qs: Vec<_> = acts.iter().map(|a| a.output).collect();
            let (q, state) = gm_forward(&qs, gm)?;
            let r = q - target;
            let ups = gm_backward(&state, &unit(r));
            for (((net, act), g), up) in fnet.nets.iter().zip(&acts).zip(grads.iter_mut()).zip(&ups) {
                net.backward_into(act, up, g)?;
            }
            Ok(r.norm())
        }
    }
}

/// Loss of one sample: `Σ_t ‖q_t − m‖` per tree, `‖GM(q) − m‖` robust.
pub fn sample_loss(
    fnet: &ForestNet,
    feature: &[f32],
    target: &Vector3<f64>,
    mode: LossMode,
    gm: &GmConfig,
) -> Result<f64, NetError> {
    let qs = fnet.forward_ensemble(feature)?;
    Ok(match mode {
        LossMode::PerTree => qs.iter().map(|q| (q - target).norm()).sum(),
        LossMode::Egm => (gm_forward(&qs, gm)?.0 - target).norm(),
    })
}

/// Mean training loss; per-tree losses are also averaged over trees.
pub fn dataset_loss(
    fnet: &ForestNet,
    samples: &SampleSet,
    mode: LossMode,
    gm: &GmConfig,
) -> Result<f64, NetError> {
    if samples.is_empty() {
        return Err(NetError::InvalidConfig("empty training set".into()));
    }
    let per: Vec<f64> = (0..samples.len())
        .into_par_iter()
        .map(|i| sample_loss(fnet, samples.feature(i), &samples.targets[i], mode, gm))
        .collect::<Result<_, _>>()?;
    let scale = match mode {
        LossMode::PerTree => fnet.n_trees() as f64,
        LossMode::Egm => 1.0,
    };
    Ok(per.iter().sum::<f64>() / (samples.len() as f64 * scale))
}

/// Fine-tunes the blocks selected by `fnet.variant`.
///
/// Gradients are summed over each mini-batch. Sample order is reshuffled
/// every epoch from `seed`.
pub fn train(fnet: &mut ForestNet, samples: &SampleSet, cfg: &TrainConfig) -> Result<TrainReport, NetError> {
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(NetError::InvalidConfig(format!(
            "batch size {} / learning rate {}",
            cfg.batch_size, cfg.learning_rate
        )));
    }
    if samples.dim != fnet.bank.len() {
        return Err(NetError::FeatureLength {
            expected: fnet.bank.len(),
            got: samples.dim,
        });
    }
    let variant = fnet.variant;
    let mut losses = vec![dataset_loss(fnet, samples, cfg.loss_mode, &cfg.gm)?];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        // an overflowing update surfaces as a non-finite activation later on
        let diverged = |e: NetError| match e {
            NetError::NonFinite(_) => NetError::Divergence { epoch, loss: f64::NAN },
            other => other,
        };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x2545_f491)));
        match cfg.loss_mode {
            LossMode::PerTree => {
                let order = &order;
                fnet.nets.par_iter_mut().try_for_each(|net| {
                    for batch in order.chunks(cfg.batch_size) {
                        let mut g = NetGradients::zeros(net, variant);
                        for &i in batch {
                            let act = net.forward(samples.feature(i))?;
                            let r = act.output - samples.targets[i];
                            net.backward_into(&act, &unit(r), &mut g)?;
                        }
                        net.apply(&g, cfg.learning_rate);
                    }
                    Ok::<_, NetError>(())
                })
                .map_err(diverged)?;
            }
            LossMode::Egm => {
                for batch in order.chunks(cfg.batch_size) {
                    let mut grads: Vec<_> = fnet
                        .nets
                        .iter()
                        .map(|n| NetGradients::zeros(n, variant))
                        .collect();
                    for &i in batch {
                        sample_gradients(
                            fnet,
                            samples.feature(i),
                            &samples.targets[i],
                            LossMode::Egm,
                            &cfg.gm,
                            &mut grads,
                        )
                        .map_err(diverged)?;
                    }
                    for (net, g) in fnet.nets.iter_mut().zip(&grads) {
                        net.apply(g, cfg.learning_rate);
                    }
                }
            }
        }
        let loss = dataset_loss(fnet, samples, cfg.loss_mode, &cfg.gm).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(NetError::Divergence { epoch, loss });
        }
        log::info!("epoch {} loss {:.6}", epoch + 1, loss);
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub tree: usize,
    pub block: ParamBlock,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub blocks: Vec<BlockCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_ERROR_FLOOR)
}

/// Compares analytic gradients of the single-sample loss with central
/// differences of step `step`, for every trainable block of every tree.
pub fn gradient_check(
    fnet: &ForestNet,
    feature: &[f32],
    target: &Vector3<f64>,
    mode: LossMode,
    gm: &GmConfig,
    step: f64,
) -> Result<GradientReport, NetError> {
    let mut grads: Vec<_> = fnet
        .nets
        .iter()
        .map(|n| NetGradients::zeros(n, fnet.variant))
        .collect();
    sample_gradients(fnet, feature, target, mode, gm, &mut grads)?;

    let mut probe = fnet.clone();
    let mut blocks = Vec::new();
    for t in 0..fnet.n_trees() {
        for &block in fnet.variant.blocks() {
            let analytic = grads[t].block(block);
            let mut numeric = Vec::with_capacity(analytic.len());
            for i in 0..fnet.nets[t].block_len(block) {
                let orig = *probe.nets[t].param_mut(block, i);
                *probe.nets[t].param_mut(block, i) = orig + step;
                let plus = sample_loss(&probe, feature, target, mode, gm)?;
                *probe.nets[t].param_mut(block, i) = orig - step;
                let minus = sample_loss(&probe, feature, target, mode, gm)?;
                *probe.nets[t].param_mut(block, i) = orig;
                numeric.push((plus - minus) / (2.0 * step));
            }
            let max_rel_error = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| relative_error(*a, *n))
                .fold(0.0, f64::max);
            blocks.push(BlockCheck {
                tree: t,
                block,
                analytic,
                numeric,
                max_rel_error,
            });
        }
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        blocks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::Tree;
    use crate::forestnet::tests::{random_feature, random_forest};
    use crate::forestnet::{NetConstants, Variant};
    use crate::robust::GmConfig;
    use rand::Rng;

    fn samples_for(fnet: &ForestNet, n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SampleSet::new(fnet.bank.len());
        for _ in 0..n {
            let f = random_feature(&mut rng, fnet.bank.len());
            let noise = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.1);
            let m = fnet.nets[0].predict(&f).unwrap() + noise;
            set.push(&f, m);
        }
        set
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let forest = random_forest(1, 2, 3, 6);
        for variant in Variant::ALL {
            let mut fnet = ForestNet::from_forest(&forest, variant).unwrap();
            let before = fnet.clone();
            let set = samples_for(&fnet, 50, 1);
            let cfg = TrainConfig {
                learning_rate: 0.0,
                epochs: 2,
                ..Default::default()
            };
            train(&mut fnet, &set, &cfg).unwrap();
            assert_eq!(fnet, before);
        }
    }

    #[test]
    fn one_step_decreases_sample_loss() {
        let forest = random_forest(2, 2, 3, 6);
        for variant in Variant::ALL {
            for mode in [LossMode::PerTree, LossMode::Egm] {
                let mut fnet = ForestNet::from_forest(&forest, variant).unwrap();
                let set = samples_for(&fnet, 1, 2);
                let gm = GmConfig::default();
                let before = sample_loss(&fnet, set.feature(0), &set.targets[0], mode, &gm).unwrap();
                let cfg = TrainConfig {
                    epochs: 1,
                    batch_size: 1,
                    learning_rate: 1e-4,
                    loss_mode: mode,
                    ..Default::default()
                };
                let report = train(&mut fnet, &set, &cfg).unwrap();
                assert_eq!(report.losses.len(), 2);
                let after = sample_loss(&fnet, set.feature(0), &set.targets[0], mode, &gm).unwrap();
                assert!(after < before, "{variant} {mode:?}: {after} !< {before}");
            }
        }
    }

    #[test]
    fn masks_survive_training() {
        let forest = random_forest(3, 2, 4, 8);
        for variant in [Variant::L, Variant::LS] {
            let mut fnet = ForestNet::from_forest(&forest, variant).unwrap();
            let set = samples_for(&fnet, 200, 3);
            train(&mut fnet, &set, &TrainConfig::default()).unwrap();
            for net in &fnet.nets {
                for k in 0..net.n_leaves() {
                    for j in 0..net.n_splits() {
                        if !net.is_active(k, j) {
                            assert_eq!(net.leaf_weights[(k, j)].to_bits(), 0f64.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_leaf_converges_to_geometric_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let forest = crate::forest::Forest {
            trees: vec![Tree::leaf(Vector3::zeros(), 1)],
            bank: crate::features::FeatureBank::random(2, 4, 0),
            config: Default::default(),
        };
        let mut fnet = ForestNet::from_forest(&forest, Variant::L).unwrap();
        let mut set = SampleSet::new(2);
        let mut pts = Vec::new();
        for i in 0..60 {
            let p = if i % 6 == 0 {
                Vector3::new(3.0, 3.0, 3.0)
            } else {
                Vector3::new(1.0, 1.0, 1.0)
                    + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))
            };
            pts.push(p);
            set.push(&[0.0, 0.0], p);
        }
        let oracle = crate::robust::geometric_median(
            &pts,
            &GmConfig {
                weiszfeld_iters: 2000,
                meanshift_iters: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 1,
            learning_rate: 0.002,
            ..Default::default()
        };
        train(&mut fnet, &set, &cfg).unwrap();
        let q = fnet.nets[0].predict(&[0.0, 0.0]).unwrap();
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        assert!((q - oracle).norm() < 0.01, "{q:?} vs {oracle:?}");
        assert!((mean - oracle).norm() > 0.1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let gm = GmConfig::default();
        for seed in 0..4 {
            let forest = random_forest(10 + seed, 3, 3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for variant in Variant::ALL {
                let mut fnet = ForestNet::from_forest(&forest, variant).unwrap();
                if variant != Variant::L {
                    // perturb the masked entries so lifted connections matter
                    for net in fnet.nets.iter_mut().filter(|n| n.masks_lifted) {
                        for v in net.leaf_weights.iter_mut() {
                            *v += rng.random_range(-0.1..0.1);
                        }
                    }
                }
                let f: Vec<f32> = random_feature(&mut rng, 5).iter().map(|v| v / 20.0).collect();
                let target = Vector3::new(1.0, 1.5, 1.0);
                for mode in [LossMode::PerTree, LossMode::Egm] {
                    let r = gradient_check(&fnet, &f, &target, mode, &gm, 1e-4).unwrap();
                    assert_eq!(r.blocks.len(), 3 * variant.blocks().len());
                    assert!(r.max_rel_error < 1e-4, "{variant} {mode:?} {}", r.max_rel_error);
                }
            }
        }
    }

    #[test]
    fn hard_constants_with_soft_activation_are_accepted() {
        let forest = random_forest(5, 1, 2, 3);
        let c = NetConstants {
            activation: crate::forestnet::LeafActivation::Softmax,
            ..NetConstants::HARD
        };
        let fnet = ForestNet::with_constants(&forest, Variant::L, c).unwrap();
        assert!(fnet.forward_ensemble(&[0.0, 1.0, 2.0]).is_ok());
    }
}
