//! Stage-per-subcommand experiment pipeline.
//!
//! `synth` → `train-forest` → `map` → `finetune` → `mapback` / `localize` →
//! `report`. Every stage reads its inputs through [`artifact::Store::verify`]
//! and writes a content-hashed artifact plus a JSON log under the output
//! directory.

pub mod artifact;
mod config;
mod report;
mod stages;

pub use config::{
    DataConfig, ExperimentConfig, FeatureConfig, FinetuneConfig, LocalizeConfig, MapbackConfig,
    MappingConfig, SynthConfig,
};
pub use report::{build_report, render_table, CellSummary, Report, REPORT_FORMAT};
pub use stages::{
    cmd_finetune, cmd_localize, cmd_map, cmd_mapback, cmd_report, cmd_synth, cmd_train_forest,
    names, run_all, Averaging, CellRecord, FrameRecord, Localization, Method, Stage,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stale provenance: {0}")]
    StaleProvenance(String),
    #[error("missing artifact {0}; run the upstream stage first")]
    MissingArtifact(String),
    #[error("{0}")]
    VariantNotMappable(String),
    #[error("{0}")]
    TrainingDiverged(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// Stable machine-parsable category.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::ConfigInvalid(_) => "config-invalid",
            PipelineError::Io { .. } => "io-failure",
            PipelineError::StaleProvenance(_) => "stale-provenance",
            PipelineError::MissingArtifact(_) => "missing-artifact",
            PipelineError::VariantNotMappable(_) => "variant-not-mappable",
            PipelineError::TrainingDiverged(_) => "training-diverged",
            PipelineError::Data(_) => "data-invalid",
            PipelineError::Internal(_) => "internal",
        }
    }

    /// Process exit code; 0 is success and 1 is left to panics.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) => 2,
            PipelineError::Io { .. } => 3,
            PipelineError::StaleProvenance(_) => 4,
            PipelineError::MissingArtifact(_) => 5,
            PipelineError::VariantNotMappable(_) => 6,
            PipelineError::TrainingDiverged(_) => 7,
            PipelineError::Data(_) => 8,
            PipelineError::Internal(_) => 9,
        }
    }
}

impl From<crate::scene::SceneError> for PipelineError {
    fn from(e: crate::scene::SceneError) -> Self {
        match e {
            crate::scene::SceneError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<crate::forest::ForestError> for PipelineError {
    fn from(e: crate::forest::ForestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<crate::forestnet::NetError> for PipelineError {
    fn from(e: crate::forestnet::NetError) -> Self {
        use crate::forestnet::NetError;
        match e {
            NetError::VariantNotMappable { .. } => PipelineError::VariantNotMappable(e.to_string()),
            NetError::Divergence { .. } => PipelineError::TrainingDiverged(e.to_string()),
            NetError::InvalidConfig(m) => PipelineError::ConfigInvalid(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_and_codes_are_distinct() {
        let all = [
            PipelineError::ConfigInvalid(String::new()),
            PipelineError::Io {
                path: PathBuf::new(),
                source: std::io::Error::other("x"),
            },
            PipelineError::StaleProvenance(String::new()),
            PipelineError::MissingArtifact(String::new()),
            PipelineError::VariantNotMappable(String::new()),
            PipelineError::TrainingDiverged(String::new()),
            PipelineError::Data(String::new()),
            PipelineError::Internal(String::new()),
        ];
        let mut cats: Vec<_> = all.iter().map(|e| e.category()).collect();
        let mut codes: Vec<_> = all.iter().map(|e| e.exit_code()).collect();
        cats.sort();
        cats.dedup();
        codes.sort();
        codes.dedup();
        assert_eq!(cats.len(), all.len());
        assert_eq!(codes.len(), all.len());
        assert!(codes.iter().all(|c| *c >= 2));
    }
}
