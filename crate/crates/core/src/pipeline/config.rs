//! One structured experiment configuration shared by every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::features::DEFAULT_FEATURE_COUNT;
use crate::forest::ForestConfig;
use crate::forestnet::{NetConstants, Variant};
use crate::pose::RansacConfig;
use crate::robust::GmConfig;
use crate::scene::{CameraIntrinsics, SyntheticScene, TrajectoryConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every artifact, log and report is written below this directory.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub mapping: MappingConfig,
    pub finetune: FinetuneConfig,
    pub gm: GmConfig,
    pub ransac: RansacConfig,
    pub localize: LocalizeConfig,
    pub mapback: MapbackConfig,
}

/// Where the train and test sequences live. Unset directories default to
/// the synthetic sequences written by `synth` under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: SyntheticScene,
    pub intrinsics: CameraIntrinsics,
    pub train: TrajectoryConfig,
    pub test: TrajectoryConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Both sequences sweep the same one-radian arc facing a room corner,
        // so every test view is covered by training views and sees two walls.
        let arc = TrajectoryConfig {
            position_jitter: [0.25, 0.175, 0.1],
            yaw_jitter: 0.075,
            max_pitch: 0.125,
            yaw_start: 0.14,
            yaw_span: 1.0,
            ..Default::default()
        };
        Self {
            scene: SyntheticScene::default(),
            intrinsics: CameraIntrinsics {
                focal_x: 144.0,
                focal_y: 144.0,
                center_x: 80.0,
                center_y: 60.0,
                width: 160,
                height: 120,
            },
            train: TrajectoryConfig {
                frames: 30,
                seed: 7,
                ..arc.clone()
            },
            test: TrajectoryConfig {
                frames: 20,
                seed: 8,
                ..arc
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub count: usize,
    pub max_offset: i32,
    pub seed: u64,
    /// Training pixels sampled per frame for the forest.
    pub samples_per_frame: usize,
    pub sample_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_FEATURE_COUNT,
            max_offset: 32,
            seed: 3,
            samples_per_frame: 5000,
            sample_seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub variants: Vec<Variant>,
    /// Per-variant overrides of the mapping constants.
    pub constants_l: Option<NetConstants>,
    pub constants_ls: Option<NetConstants>,
    pub constants_lst: Option<NetConstants>,
    /// Depth of the sub-networks reported for network splitting; `None`
    /// skips the split analysis.
    pub subtree_depth: Option<usize>,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            constants_l: None,
            constants_ls: None,
            constants_lst: None,
            subtree_depth: Some(4),
        }
    }
}

impl MappingConfig {
    pub fn constants(&self, variant: Variant) -> NetConstants {
        let over = match variant {
            Variant::L => self.constants_l,
            Variant::LS => self.constants_ls,
            Variant::LST => self.constants_lst,
        };
        over.unwrap_or_else(|| variant.default_constants())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Training pixels per frame for fine-tuning (a fresh draw, independent
    /// of the forest's samples).
    pub samples_per_frame: usize,
    pub sample_seed: u64,
    /// Also train each variant end-to-end through the geometric median.
    pub robust_training: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 20,
            learning_rate: 0.001,
            seed: 11,
            samples_per_frame: 200,
            sample_seed: 13,
            robust_training: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Pixels sampled per test frame.
    pub samples: usize,
    /// Evaluate at most this many test frames (in order); `None` = all.
    pub max_frames: Option<usize>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapbackConfig {
    /// Fine-tuned variant to turn back into a forest.
    pub variant: Variant,
}

impl Default for MapbackConfig {
    fn default() -> Self {
        Self { variant: Variant::L }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            forest: ForestConfig::default(),
            mapping: MappingConfig::default(),
            finetune: FinetuneConfig::default(),
            gm: GmConfig::default(),
            ransac: RansacConfig {
                // 10 px at 640 columns, scaled to the 160-column synthetic camera
                inlier_px: 3.0,
                ..RansacConfig::default()
            },
            localize: LocalizeConfig::default(),
            mapback: MapbackConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data
            .train_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join("train"))
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data
            .test_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join("test"))
    }

    /// Checks every numeric field against its documented bounds.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.synth
            .intrinsics
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let s = &self.synth.scene;
        if !s.extent.iter().all(|e| *e > 0.0 && e.is_finite())
            || !(s.coarse_cell > 0.0 && s.fine_cell > 0.0)
        {
            return Err(invalid("scene extent and texture cells must be positive"));
        }
        for (name, t) in [("train", &self.synth.train), ("test", &self.synth.test)] {
            if t.frames == 0 {
                return Err(invalid(format!("synth.{name}.frames must be >= 1")));
            }
            if !(t.yaw_span.is_finite() && t.max_pitch.abs() < std::f64::consts::FRAC_PI_2) {
                return Err(invalid(format!("synth.{name}: yaw_span finite, |max_pitch| < pi/2")));
            }
        }
        let f = &self.features;
        if f.count == 0 || f.max_offset < 0 || f.samples_per_frame == 0 {
            return Err(invalid("features: count and samples_per_frame >= 1, max_offset >= 0"));
        }
        self.forest.validate().map_err(|e| invalid(e.to_string()))?;
        if self.mapping.variants.is_empty() {
            return Err(invalid("mapping.variants must name at least one variant"));
        }
        for v in Variant::ALL {
            self.mapping
                .constants(v)
                .validate()
                .map_err(|e| invalid(e.to_string()))?;
        }
        if self.mapping.subtree_depth == Some(0) {
            return Err(invalid("mapping.subtree_depth must be >= 1"));
        }
        let ft = &self.finetune;
        if ft.batch_size == 0 || !(ft.learning_rate >= 0.0 && ft.learning_rate.is_finite()) {
            return Err(invalid("finetune: batch_size >= 1 and finite learning_rate >= 0"));
        }
        if ft.samples_per_frame == 0 {
            return Err(invalid("finetune.samples_per_frame must be >= 1"));
        }
        self.gm.validate().map_err(|e| invalid(e.to_string()))?;
        self.ransac.validate().map_err(|e| invalid(e.to_string()))?;
        if self.localize.samples < 4 || self.localize.max_frames == Some(0) {
            return Err(invalid("localize: samples >= 4 and max_frames >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_stated_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.forest.n_trees, 5);
        assert_eq!(c.forest.max_depth, 8);
        assert_eq!(c.features.count, 1000);
        assert_eq!(c.finetune.batch_size, 20);
        assert_eq!(c.finetune.learning_rate, 0.001);
        assert_eq!(c.gm.sigma, 0.025);
        assert_eq!(c.ransac.hypotheses, 1280);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("output_dir = \"x\"\n[forest]\nmax_depth = 3\n").unwrap();
        assert_eq!(c.forest.max_depth, 3);
        assert_eq!(c.forest.n_trees, 5);
        assert_eq!(c.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(PipelineError::ConfigInvalid(_))
        ));
        let mut c = ExperimentConfig::default();
        c.gm.sigma = 0.0;
        assert!(matches!(c.validate(), Err(PipelineError::ConfigInvalid(_))));
        let mut c = ExperimentConfig::default();
        c.finetune.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.synth.intrinsics.center_x = 1000.0;
        assert!(c.validate().is_err());
    }
}
