//! Experiment configuration file: a TOML document covering scene and shift
//! generation, every training field, and the sweep axes. Missing sections
//! fall back to the desk-scale profile.

use anyhow::{bail, Context, Result};
use idm_core::datagen::{DomainShift, SceneSpec};
use idm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_scene")]
    pub scene: SceneSpec,
    #[serde(default = "default_shift")]
    pub shift: DomainShift,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "TrainConfig::desk_scale")]
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: RunOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_scene() -> SceneSpec {
    SceneSpec {
        rng_seed: 7,
        ..SceneSpec::default()
    }
}

fn default_shift() -> DomainShift {
    idm_core::pipeline::BenchmarkSpec::shapes_world(7).shift
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: default_scene(),
            shift: default_shift(),
            data: DataConfig::default(),
            train: TrainConfig::desk_scale(),
            experiment: RunOptions::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source_count: usize,
    pub target_pool_count: usize,
    pub eval_count: usize,
    /// Ingest an existing dataset directory instead of generating scenes.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_count: 48,
            target_pool_count: 8,
            eval_count: 24,
            source_dir: None,
            target_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub precision: Precision,
    /// Adaptation seeds; results are averaged across them.
    pub seeds: Vec<u64>,
    /// Fixed target image id; otherwise each seed picks from the pool.
    pub target_id: Option<String>,
    /// Emit an mIoU-vs-iteration SVG next to the metrics.
    pub plot: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            precision: Precision::F32,
            seeds: vec![101, 202, 303],
            target_id: None,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// One result row per value, varying each axis alone around the base
    /// config.
    #[serde(default)]
    pub p_patches: Vec<usize>,
    #[serde(default)]
    pub lambda_ent: Vec<f64>,
    #[serde(default)]
    pub lambda_sim: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
    /// Run the full 2^3 toggle grid over {ssm, patchmix, pim}.
    #[serde(default)]
    pub ablation: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every validation error is reported before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.scene.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.shift.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if self.data.source_count == 0 && self.data.source_dir.is_none() {
            problems.push("data.source_count must be >= 1 (or set data.source_dir)".into());
        }
        if self.data.target_pool_count == 0 && self.data.target_dir.is_none() {
            problems.push("data.target_pool_count must be >= 1 (or set data.target_dir)".into());
        }
        if self.experiment.seeds.is_empty() {
            problems.push("experiment.seeds must not be empty".into());
        }
        if self.scene.width % 4 != 0 || self.scene.height % 4 != 0 {
            problems.push("scene dimensions must be multiples of 4".into());
        }
        if !problems.is_empty() {
            bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
        }
        Ok(())
    }

    pub fn write_default(path: &Path) -> Result<()> {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).context("serializing default config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
