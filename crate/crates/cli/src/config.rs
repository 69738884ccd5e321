//! Experiment configuration: one YAML file drives every subcommand.
//!
//! Every field has a default, so a config file only states what it
//! changes. The same file is passed to scenegen, sense, corrupt, train,
//! eval, stats, and the report commands; each reads the sections it needs,
//! which is what makes a whole experiment reproducible from one document
//! plus a seed.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use v2x_core::detection::DetectionLossConfig;
use v2x_core::evaluation::EvalRegion;
use v2x_core::mdd::MddLossConfig;
use v2x_core::nn::AdamConfig;
use v2x_core::perception::PipelineConfig;
use v2x_core::scene::ScenarioConfig;
use v2x_core::sensing::{LidarConfig, RadarConfig};
use v2x_core::weather::{FogConfig, SnowConfig};

/// Optimizer and loss settings for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub detection: DetectionLossConfig,
    pub denoising: MddLossConfig,
    /// Weather domains sampled per training frame, e.g. `[normal, fog]`.
    /// Snow stays out of this list so it remains an unseen test domain.
    pub weather_mix: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            detection: DetectionLossConfig::default(),
            denoising: MddLossConfig::default(),
            weather_mix: vec!["normal".into(), "fog".into()],
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// What the eval command measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ious: Vec<f64>,
    pub region: EvalRegion,
    /// Detections below this score are dropped before matching.
    pub score_thresh: f64,
    /// Suppression threshold between kept detections.
    pub nms_iou: f64,
    /// Peer localization noise sweep, meters.
    pub pose_noise_stds: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ious: vec![0.3, 0.5, 0.7],
            region: EvalRegion::default(),
            score_thresh: 0.3,
            nms_iou: 0.2,
            pose_noise_stds: vec![0.0, 0.2, 0.4, 0.6],
        }
    }
}

/// Radial bins for the radar occupancy statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsSection {
    pub bin_edges: Vec<f64>,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection { bin_edges: vec![0.0, 25.0, 50.0, 75.0, 100.0, 125.0, 150.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Procedural scene knobs shared by all scenarios.
    pub scenario: ScenarioConfig,
    /// How many scenarios to generate.
    pub scenarios: usize,
    /// The first `train_scenarios` go in the train split, the rest in test.
    pub train_scenarios: usize,
    pub lidar: LidarConfig,
    pub radar: RadarConfig,
    pub fog: FogConfig,
    pub snow: SnowConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub stats: StatsSection,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            scenarios: 4,
            train_scenarios: 3,
            lidar: LidarConfig::default(),
            radar: RadarConfig::default(),
            fog: FogConfig::default(),
            snow: SnowConfig::default(),
            pipeline: PipelineConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            stats: StatsSection::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios == 0 {
            bail!("scenarios must be positive");
        }
        if self.train_scenarios >= self.scenarios {
            bail!(
                "train_scenarios ({}) must leave at least one test scenario of {}",
                self.train_scenarios,
                self.scenarios
            );
        }
        if self.train.epochs == 0 {
            bail!("train.epochs must be positive");
        }
        if !(self.train.lr > 0.0) {
            bail!("train.lr must be positive");
        }
        if self.eval.ious.is_empty() {
            bail!("eval.ious must list at least one IoU threshold");
        }
        for d in &self.train.weather_mix {
            if !matches!(d.as_str(), "normal" | "fog" | "snow") {
                bail!("unknown weather domain {d:?} in train.weather_mix");
            }
        }
        self.pipeline.validate().context("pipeline section")?;
        self.eval.region.validate().context("eval.region section")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let doc = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_yaml::from_str(&doc).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_yaml::to_string(self).context("encoding config")?;
        std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
