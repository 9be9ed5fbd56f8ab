//! The JSON run configuration.
//!
//! Every field is optional; missing fields take the values of
//! [`RunConfigFile::default`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use catome_core::attention::SimilarityFeatures;
use catome_core::cache::canonical_name;
use catome_core::pipeline::{calibrate_threshold, default_stages, PipelineConfig, PipelineMode, StageConfig};
use catome_core::{CheckpointSchedule, PartitionConfig, NAMED_SCHEDULES};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// A checkpoint schedule given by name (`"CONFIG_3"`, `"EVERY_STEP"`, ...)
/// or as an explicit step list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Named(String),
    Steps(Vec<usize>),
}

impl ScheduleSpec {
    pub fn resolve(&self, total_steps: usize) -> catome_core::Result<CheckpointSchedule> {
        match self {
            ScheduleSpec::Named(name) => CheckpointSchedule::named(name, total_steps),
            ScheduleSpec::Steps(steps) => CheckpointSchedule::from_steps("custom", steps, total_steps),
        }
    }
}

/// Threshold grid swept by default.
pub const DEFAULT_THRESHOLDS: [f32; 7] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub steps: usize,
    pub step_size: f32,
    pub seed: u64,
    pub smoothing_radius: usize,
    pub amplitude: f32,
    pub heads: usize,
    pub stages: Vec<StageConfig>,
    pub partition: PartitionConfig,
    pub proportional_attention: bool,
    pub features: SimilarityFeatures,
    /// Merge rate of the fixed-rate comparison mode.
    pub rate: f64,
    /// Merge threshold; when absent it is calibrated so that
    /// `calibrate_fraction` of sources merge at step 0.
    pub threshold: Option<f32>,
    pub calibrate_fraction: f64,
    pub schedule: ScheduleSpec,
    /// Thresholds for `sweep-threshold`.
    pub thresholds: Vec<f32>,
    /// Schedule names for `sweep-schedule`.
    pub schedules: Vec<String>,
    pub warmup: usize,
    pub repetitions: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            height: p.height,
            width: p.width,
            channels: p.channels,
            steps: p.steps,
            step_size: p.step_size,
            seed: p.seed,
            smoothing_radius: p.smoothing_radius,
            amplitude: p.amplitude,
            heads: p.heads,
            stages: default_stages(),
            partition: p.partition,
            proportional_attention: p.proportional_attention,
            features: p.features,
            rate: 0.5,
            threshold: None,
            calibrate_fraction: 0.6,
            schedule: ScheduleSpec::Named("CONFIG_3".into()),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            schedules: NAMED_SCHEDULES.iter().map(|s| s.to_string()).collect(),
            warmup: catome_core::bench::DEFAULT_WARMUP,
            repetitions: catome_core::bench::MIN_REPETITIONS,
            output_dir: PathBuf::from("reports"),
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks everything a run needs before any run starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |msg: String| Err(CliError::Config(msg));
        self.baseline()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.rate) {
            return invalid(format!("rate {} outside [0, 1]", self.rate));
        }
        if let Some(t) = self.threshold {
            if !(-1.0..=1.0).contains(&t) {
                return invalid(format!("threshold {t} outside [-1, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.calibrate_fraction) {
            return invalid(format!("calibrate_fraction {} outside [0, 1]", self.calibrate_fraction));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
            return invalid(format!("sweep threshold {t} outside [-1, 1]"));
        }
        if self.repetitions < catome_core::bench::MIN_REPETITIONS {
            return invalid(format!(
                "repetitions must be at least {}, got {}",
                catome_core::bench::MIN_REPETITIONS,
                self.repetitions
            ));
        }
        if self.warmup == 0 {
            return invalid("at least one warmup run is required".into());
        }
        self.checkpoint_schedule()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(name) = self.schedules.iter().find(|n| canonical_name(n).is_none()) {
            return invalid(format!("unknown checkpoint schedule '{name}'"));
        }
        Ok(())
    }

    /// The pipeline in baseline mode; other modes are derived from it.
    pub fn baseline(&self) -> PipelineConfig {
        PipelineConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            steps: self.steps,
            stages: self.stages.clone(),
            mode: PipelineMode::Baseline,
            step_size: self.step_size,
            seed: self.seed,
            smoothing_radius: self.smoothing_radius,
            amplitude: self.amplitude,
            heads: self.heads,
            partition: self.partition,
            proportional_attention: self.proportional_attention,
            features: self.features,
        }
    }

    pub fn checkpoint_schedule(&self) -> catome_core::Result<CheckpointSchedule> {
        self.schedule.resolve(self.steps)
    }

    /// The configured threshold, or the calibrated one when none is set.
    pub fn resolve_threshold(&self) -> catome_core::Result<f32> {
        match self.threshold {
            Some(t) => Ok(t),
            None => calibrate_threshold(&self.baseline(), self.calibrate_fraction),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let cfg = RunConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.thresholds.len(), 7);
        assert_eq!(cfg.checkpoint_schedule().unwrap().len(), 13);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfigFile::from_json(r#"{"hieght": 8}"#),
            Err(CliError::Config(_))
        ));
        let nested = r#"{"partition": {"stride_x": 2, "stride_z": 2}}"#;
        assert!(matches!(RunConfigFile::from_json(nested), Err(CliError::Config(_))));
    }

    #[test]
    fn schedules_by_name_or_list() {
        let cfg = RunConfigFile::from_json(r#"{"steps": 10, "schedule": [0, 4, 8, 12]}"#).unwrap();
        assert_eq!(cfg.checkpoint_schedule().unwrap().steps, vec![0, 4, 8]);
        let cfg =
            RunConfigFile::from_json(r#"{"steps": 50, "schedule": "conf_five", "schedules": ["CONFIG_1"]}"#).unwrap();
        assert_eq!(cfg.checkpoint_schedule().unwrap().name, "CONFIG_Five");
        assert!(RunConfigFile::from_json(r#"{"schedule": "CONFIG_7"}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"schedule": [1, 2]}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"rate": 1.5}"#,
            r#"{"threshold": 2.0}"#,
            r#"{"repetitions": 3}"#,
            r#"{"height": 63}"#,
            r#"{"stages": []}"#,
            r#"{"thresholds": [0.5, -3.0]}"#,
            r#"{"steps": "many"}"#,
        ] {
            assert!(
                matches!(RunConfigFile::from_json(doc), Err(CliError::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn explicit_threshold_wins() {
        let cfg = RunConfigFile::from_json(r#"{"threshold": 0.7}"#).unwrap();
        assert_eq!(cfg.resolve_threshold().unwrap(), 0.7);
    }
}
