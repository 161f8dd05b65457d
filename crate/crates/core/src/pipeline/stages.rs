//! The pipeline stages. Each reads verified upstream artifacts, writes its
//! own artifact atomically and records a JSON log under `logs/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::artifact::{sha256_json, write_atomic, write_json_atomic, Store};
use super::report::{build_report, render_table};
use super::{ExperimentConfig, PipelineError};
use crate::features::{extract_samples, FeatureBank};
use crate::forest::{train_forest, Forest};
use crate::forestnet::{train, ForestNet, LossMode, MapBackMode, TrainConfig, Variant};
use crate::metrics::{coord_metrics, pose_metrics, CoordMetrics, PoseMetrics};
use crate::netsplit::{plan_split, reduction_factor};
use crate::pose::{build_correspondences, predict_pixels, ransac_pose, sample_pixels, CoordPredictor};
use crate::scene::{load_dataset, render_synthetic, trajectory, write_dataset, Dataset};

/// Artifact names.
pub mod names {
    use crate::forestnet::Variant;

    pub const TRAIN_DATA: &str = "train-data";
    pub const TEST_DATA: &str = "test-data";
    pub const FOREST: &str = "forest";
    pub const MAPPED_FOREST: &str = "forest-mapback";
    pub const LOCALIZATION: &str = "localization";
    pub const REPORT: &str = "report";

    pub fn initial_net(v: Variant) -> String {
        format!("fnet-{v}-init")
    }

    /// Network fine-tuned with per-tree losses (used for noGM and pGM).
    pub fn tuned_net(v: Variant) -> String {
        format!("fnet-{v}")
    }

    /// Network fine-tuned through the geometric median (used for eGM).
    pub fn robust_net(v: Variant) -> String {
        format!("fnet-{v}-egm")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Synth,
    TrainForest,
    Map,
    Finetune,
    Mapback,
    Localize,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::TrainForest,
        Stage::Map,
        Stage::Finetune,
        Stage::Mapback,
        Stage::Localize,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainForest => "train-forest",
            Stage::Map => "map",
            Stage::Finetune => "finetune",
            Stage::Mapback => "mapback",
            Stage::Localize => "localize",
            Stage::Report => "report",
        }
    }

    pub fn run(self, cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
        match self {
            Stage::Synth => cmd_synth(cfg),
            Stage::TrainForest => cmd_train_forest(cfg),
            Stage::Map => cmd_map(cfg),
            Stage::Finetune => cmd_finetune(cfg),
            Stage::Mapback => cmd_mapback(cfg),
            Stage::Localize => cmd_localize(cfg),
            Stage::Report => cmd_report(cfg),
        }
    }
}

/// Runs every stage in order. `synth` is skipped when both sequences come
/// from external directories.
pub fn run_all(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        if stage == Stage::Synth && cfg.data.train_dir.is_some() && cfg.data.test_dir.is_some() {
            continue;
        }
        stage.run(cfg)?;
    }
    Ok(())
}

fn store(cfg: &ExperimentConfig) -> Store {
    Store::new(&cfg.output_dir)
}

fn write_log(cfg: &ExperimentConfig, stage: Stage, log: &serde_json::Value) -> Result<(), PipelineError> {
    write_json_atomic(&cfg.output_dir.join("logs").join(format!("{}.json", stage.name())), log)
}

fn begin(cfg: &ExperimentConfig, stage: Stage) -> Result<Instant, PipelineError> {
    cfg.validate()?;
    info!("stage {} -> {}", stage.name(), cfg.output_dir.display());
    Ok(Instant::now())
}

fn finish(
    cfg: &ExperimentConfig,
    stage: Stage,
    start: Instant,
    mut log: serde_json::Value,
) -> Result<serde_json::Value, PipelineError> {
    log["stage"] = json!(stage.name());
    log["seconds"] = json!(start.elapsed().as_secs_f64());
    write_log(cfg, stage, &log)?;
    Ok(log)
}

/// Renders both synthetic sequences into the dataset layout.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Synth)?;
    let st = store(cfg);
    let s = &cfg.synth;
    let mut counts = serde_json::Map::new();
    for (name, traj, dir, external) in [
        (names::TRAIN_DATA, &s.train, cfg.train_dir(), cfg.data.train_dir.is_some()),
        (names::TEST_DATA, &s.test, cfg.test_dir(), cfg.data.test_dir.is_some()),
    ] {
        if external {
            continue;
        }
        let frames = trajectory(&s.scene, traj)
            .par_iter()
            .map(|pose| render_synthetic(&s.scene, pose, &s.intrinsics))
            .collect::<Result<Vec<_>, _>>()?;
        replace_dir(&dir, |tmp| Ok(write_dataset(tmp, &s.intrinsics, &frames)?))?;
        st.commit(name, Stage::Synth.name(), &dir, &[], sha256_json(&(&s.scene, &s.intrinsics, traj)))?;
        counts.insert(name.into(), json!(frames.len()));
    }
    finish(cfg, Stage::Synth, start, json!({ "frames": counts }))
}

/// Builds a directory next to `dir`, then swaps it into place.
fn replace_dir(dir: &Path, build: impl FnOnce(&Path) -> Result<(), PipelineError>) -> Result<(), PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    let mut tmp = dir.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    build(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::rename(&tmp, dir).map_err(io(dir))
}

/// Verifies and loads a sequence. External directories are registered on
/// first use so later modification is still detected.
fn dataset(cfg: &ExperimentConfig, st: &Store, name: &str) -> Result<Dataset, PipelineError> {
    let (dir, external) = if name == names::TRAIN_DATA {
        (cfg.train_dir(), cfg.data.train_dir.is_some())
    } else {
        (cfg.test_dir(), cfg.data.test_dir.is_some())
    };
    if external {
        if !dir.is_dir() {
            return Err(PipelineError::ConfigInvalid(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let registered = st
            .read_manifest(name)
            .map(|m| st.root.join(&m.payload) == dir || m.payload == dir)
            .unwrap_or(false);
        if !registered {
            st.commit(name, "external", &dir, &[], sha256_json(&dir))?;
        }
    }
    let path = st.verify(name)?;
    Ok(load_dataset(&path)?)
}

fn load_forest(st: &Store, name: &str) -> Result<Forest, PipelineError> {
    let path = st.verify(name)?;
    Ok(Forest::load(&path)?)
}

fn load_net(st: &Store, name: &str) -> Result<ForestNet, PipelineError> {
    let path = st.verify(name)?;
    Ok(ForestNet::load(&path)?)
}

pub fn cmd_train_forest(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::TrainForest)?;
    let st = store(cfg);
    let data = dataset(cfg, &st, names::TRAIN_DATA)?;
    let f = &cfg.features;
    let bank = FeatureBank::random(f.count, f.max_offset, f.seed);
    let samples = extract_samples(&data.frames, &bank, f.samples_per_frame, f.sample_seed);
    info!("training on {} samples", samples.len());
    let forest = train_forest(&samples, &bank, &cfg.forest)?;
    let path = cfg.output_dir.join("forest.json");
    write_atomic(&path, forest.to_json()?.as_bytes())?;
    st.commit(
        names::FOREST,
        Stage::TrainForest.name(),
        &path,
        &[names::TRAIN_DATA],
        sha256_json(&(&cfg.features, &cfg.forest)),
    )?;
    let trees: Vec<_> = forest
        .trees
        .iter()
        .map(|t| json!({ "depth": t.depth(), "splits": t.split_count(), "leaves": t.leaf_count() }))
        .collect();
    finish(cfg, Stage::TrainForest, start, json!({ "samples": samples.len(), "trees": trees }))
}

/// Maps the forest onto one network per configured variant.
pub fn cmd_map(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Map)?;
    let st = store(cfg);
    let forest = load_forest(&st, names::FOREST)?;
    let forest_hash = st.read_manifest(names::FOREST)?.payload_sha256;
    let mut nets = Vec::new();
    let mut split_log = serde_json::Value::Null;
    for &v in &cfg.mapping.variants {
        let constants = cfg.mapping.constants(v);
        let mut net = ForestNet::with_constants(&forest, v, constants)?;
        net.source_forest_sha256 = Some(forest_hash.clone());
        let name = names::initial_net(v);
        let path = cfg.output_dir.join(format!("{name}.json"));
        write_atomic(&path, net.to_json()?.as_bytes())?;
        st.commit(&name, Stage::Map.name(), &path, &[names::FOREST], sha256_json(&(v, constants)))?;
        nets.push(json!({
            "variant": v.to_string(),
            "c01": constants.c01,
            "c12": constants.c12,
            "splits": net.nets.iter().map(|n| n.n_splits()).sum::<usize>(),
            "leaves": net.nets.iter().map(|n| n.n_leaves()).sum::<usize>(),
        }));
        if split_log.is_null() && !net.nets.iter().any(|n| n.masks_lifted) {
            split_log = split_analysis(cfg, &net);
        }
    }
    finish(cfg, Stage::Map, start, json!({ "networks": nets, "splitting": split_log }))
}

fn split_analysis(cfg: &ExperimentConfig, net: &ForestNet) -> serde_json::Value {
    let Some(sub) = cfg.mapping.subtree_depth else {
        return serde_json::Value::Null;
    };
    let depth = cfg.forest.max_depth;
    let complete = reduction_factor(depth as u32, sub as u32)
        .map(|r| json!({ "numerator": r.numerator, "denominator": r.denominator, "value": r.as_f64() }))
        .unwrap_or_else(|e| json!({ "error": e.to_string() }));
    let trees: Vec<_> = net
        .nets
        .iter()
        .map(|n| match plan_split(n, sub) {
            Ok(p) => json!({
                "subnets": p.subnets.len(),
                "total_splits": p.total_splits,
                "max_subnet_splits": p.max_subnet_splits(),
                "factor": p.actual_factor().as_f64(),
            }),
            Err(e) => json!({ "error": e.to_string() }),
        })
        .collect();
    json!({ "depth": depth, "subtree_depth": sub, "complete_tree_factor": complete, "trees": trees })
}

fn train_config(cfg: &ExperimentConfig, mode: LossMode) -> TrainConfig {
    let ft = &cfg.finetune;
    TrainConfig {
        epochs: ft.epochs,
        batch_size: ft.batch_size,
        learning_rate: ft.learning_rate,
        seed: ft.seed,
        loss_mode: mode,
        gm: cfg.gm,
    }
}

pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Finetune)?;
    let st = store(cfg);
    let data = dataset(cfg, &st, names::TRAIN_DATA)?;
    let mut curves = Vec::new();
    let mut samples = None;
    for &v in &cfg.mapping.variants {
        let init_name = names::initial_net(v);
        let init = load_net(&st, &init_name)?;
        let samples = samples.get_or_insert_with(|| {
            extract_samples(&data.frames, &init.bank, cfg.finetune.samples_per_frame, cfg.finetune.sample_seed)
        });
        let mut modes = vec![(LossMode::PerTree, names::tuned_net(v))];
        if cfg.finetune.robust_training {
            modes.push((LossMode::Egm, names::robust_net(v)));
        }
        for (mode, name) in modes {
            let mut net = init.clone();
            let tc = train_config(cfg, mode);
            let report = train(&mut net, samples, &tc)?;
            info!("{name}: loss {:?}", report.losses);
            let path = cfg.output_dir.join(format!("{name}.json"));
            write_atomic(&path, net.to_json()?.as_bytes())?;
            st.commit(
                &name,
                Stage::Finetune.name(),
                &path,
                &[init_name.as_str(), names::TRAIN_DATA],
                sha256_json(&(&cfg.finetune, &tc)),
            )?;
            curves.push(json!({ "network": name, "variant": v.to_string(), "loss_mode": mode, "losses": report.losses }));
        }
    }
    let n = samples.map_or(0, |s| s.len());
    finish(cfg, Stage::Finetune, start, json!({ "samples": n, "runs": curves }))
}

/// Rebuilds a forest from the fine-tuned network of `cfg.mapback.variant`.
///
/// Leaf-only training maps back exactly; threshold training approximately;
/// trained split-to-leaf connections cannot be mapped back and fail with
/// the `variant-not-mappable` category.
pub fn cmd_mapback(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Mapback)?;
    let st = store(cfg);
    let v = cfg.mapback.variant;
    let net_name = names::tuned_net(v);
    let forest = load_forest(&st, names::FOREST)?;
    let net = load_net(&st, &net_name)?;
    let mode = if v == Variant::L {
        MapBackMode::Exact
    } else {
        MapBackMode::Approximate
    };
    let mapped = net.map_back(&forest, mode)?;

    // agreement between the mapped forest and the network on training pixels
    let data = dataset(cfg, &st, names::TRAIN_DATA)?;
    let probe = extract_samples(&data.frames, &net.bank, 50, cfg.features.sample_seed ^ 0x5eed);
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..probe.len() {
        let f = probe.feature(i);
        let a = mapped.predict_features(f);
        let b = net.forward_ensemble(f)?;
        for (x, y) in a.iter().zip(&b) {
            total += 1;
            if (x - y).norm() <= 1e-6 {
                agree += 1;
            }
        }
    }
    let path = cfg.output_dir.join("forest-mapback.json");
    write_atomic(&path, mapped.to_json()?.as_bytes())?;
    st.commit(
        names::MAPPED_FOREST,
        Stage::Mapback.name(),
        &path,
        &[names::FOREST, net_name.as_str()],
        sha256_json(&(v, mode.to_string())),
    )?;
    finish(
        cfg,
        Stage::Mapback,
        start,
        json!({ "variant": v.to_string(), "mode": mode.to_string(), "agreement": agree as f64 / total.max(1) as f64, "compared": total }),
    )
}

/// Scene-coordinate source of a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Forest,
    Net(Variant),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Forest => f.write_str("RF2"),
            Method::Net(v) => write!(f, "fNET-{v}"),
        }
    }
}

/// How per-tree predictions are combined into correspondences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Averaging {
    /// One correspondence per tree prediction.
    NoGm,
    /// Geometric median at test time only.
    PGm,
    /// Geometric median, with a network trained through it.
    EGm,
}

impl Averaging {
    pub const ALL: [Averaging; 3] = [Averaging::NoGm, Averaging::PGm, Averaging::EGm];
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::NoGm => "noGM",
            Averaging::PGm => "pGM",
            Averaging::EGm => "eGM",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub coords: CoordMetrics,
    /// `None` when RANSAC found no pose.
    pub pose: Option<PoseMetrics>,
    pub error: Option<String>,
    pub correspondences: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    pub averaging: Averaging,
    /// Why the cell is not applicable; `None` for evaluated cells.
    pub not_applicable: Option<String>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub scene: String,
    pub cells: Vec<CellRecord>,
}

fn evaluate_frame(
    index: usize,
    frame: &crate::scene::Frame,
    data: &Dataset,
    predictions: &[Vec<Vector3<f64>>],
    pixels: &[(usize, usize)],
    averaging: Averaging,
    cfg: &ExperimentConfig,
) -> Result<FrameRecord, PipelineError> {
    let robust = (averaging != Averaging::NoGm).then_some(&cfg.gm);
    let corr = build_correspondences(pixels, predictions, robust).map_err(|e| PipelineError::Internal(e.to_string()))?;
    // ground truth per correspondence, in the order build_correspondences emits them
    let mut gt = Vec::with_capacity(corr.len());
    for (&(x, y), preds) in pixels.iter().zip(predictions) {
        let copies = match robust {
            Some(_) => usize::from(!preds.is_empty()),
            None => preds.len(),
        };
        gt.extend(std::iter::repeat_n(frame.scene_coord(x, y), copies));
    }
    let pts: Vec<Vector3<f64>> = corr.iter().map(|c| c.scene_point).collect();
    let coords = coord_metrics(&pts, &gt).unwrap_or(CoordMetrics {
        count: 0,
        inliers: 0,
        inlier_fraction: 0.0,
        mean_inlier_distance: None,
    });
    let (pose, error, inliers) = match ransac_pose(&corr, &data.intrinsics, &cfg.ransac) {
        Ok(r) => (Some(pose_metrics(&r.pose, &frame.pose)), None, r.inliers.len()),
        Err(e) => (None, Some(e.to_string()), 0),
    };
    Ok(FrameRecord {
        frame: index,
        coords,
        pose,
        error,
        correspondences: corr.len(),
        inliers,
    })
}

fn evaluate_cells(
    cfg: &ExperimentConfig,
    data: &Dataset,
    predictor: &dyn CoordPredictor,
    method: Method,
    averagings: &[Averaging],
) -> Result<Vec<CellRecord>, PipelineError> {
    let n = cfg.localize.max_frames.map_or(data.frames.len(), |m| m.min(data.frames.len()));
    let mut cells: Vec<CellRecord> = averagings
        .iter()
        .map(|&a| CellRecord {
            method,
            averaging: a,
            not_applicable: None,
            frames: Vec::new(),
        })
        .collect();
    for (i, frame) in data.frames.iter().take(n).enumerate() {
        let pixels = sample_pixels(
            frame.width,
            frame.height,
            cfg.localize.samples,
            cfg.ransac.seed.wrapping_add(i as u64),
        );
        let preds = predict_pixels(frame, predictor, &pixels).map_err(|e| PipelineError::Data(e.to_string()))?;
        for cell in cells.iter_mut() {
            cell.frames.push(evaluate_frame(i, frame, data, &preds, &pixels, cell.averaging, cfg)?);
        }
    }
    Ok(cells)
}

fn not_applicable(method: Method, averaging: Averaging, why: &str) -> CellRecord {
    CellRecord {
        method,
        averaging,
        not_applicable: Some(why.into()),
        frames: Vec::new(),
    }
}

/// Localizes every test frame with every method and averaging scheme.
pub fn cmd_localize(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Localize)?;
    let st = store(cfg);
    let data = dataset(cfg, &st, names::TEST_DATA)?;
    let mut inputs = vec![names::TEST_DATA.to_string(), names::FOREST.to_string()];
    let forest = load_forest(&st, names::FOREST)?;
    let mut cells = evaluate_cells(cfg, &data, &forest, Method::Forest, &[Averaging::NoGm, Averaging::PGm])?;
    cells.push(not_applicable(
        Method::Forest,
        Averaging::EGm,
        "a forest can only be averaged post-hoc",
    ));
    for &v in &cfg.mapping.variants {
        let m = Method::Net(v);
        let name = names::tuned_net(v);
        let net = load_net(&st, &name)?;
        inputs.push(name);
        cells.extend(evaluate_cells(cfg, &data, &net, m, &[Averaging::NoGm, Averaging::PGm])?);
        if cfg.finetune.robust_training {
            let name = names::robust_net(v);
            let net = load_net(&st, &name)?;
            inputs.push(name);
            cells.extend(evaluate_cells(cfg, &data, &net, m, &[Averaging::EGm])?);
        } else {
            cells.push(not_applicable(m, Averaging::EGm, "robust training disabled"));
        }
    }
    let scene = cfg
        .test_dir()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let loc = Localization { scene, cells };
    let path = cfg.output_dir.join("localization.json");
    write_json_atomic(&path, &loc)?;
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    st.commit(
        names::LOCALIZATION,
        Stage::Localize.name(),
        &path,
        &refs,
        sha256_json(&(&cfg.gm, &cfg.ransac, &cfg.localize)),
    )?;
    let evaluated = loc.cells.iter().filter(|c| c.not_applicable.is_none()).count();
    finish(cfg, Stage::Localize, start, json!({ "cells": evaluated, "frames": data.frames.len() }))
}

/// Assembles the method × averaging matrix as JSON and an aligned table.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<serde_json::Value, PipelineError> {
    let start = begin(cfg, Stage::Report)?;
    let st = store(cfg);
    let path = st.verify(names::LOCALIZATION)?;
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io {
        path: path.clone(),
        source: e,
    })?;
    let loc: Localization = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
    let report = build_report(&loc);
    let json_path = cfg.output_dir.join("report.json");
    write_json_atomic(&json_path, &report)?;
    write_atomic(&cfg.output_dir.join("report.txt"), render_table(&report).as_bytes())?;
    st.commit(names::REPORT, Stage::Report.name(), &json_path, &[names::LOCALIZATION], sha256_json(&()))?;
    finish(cfg, Stage::Report, start, json!({ "cells": report.cells.len() }))
}
