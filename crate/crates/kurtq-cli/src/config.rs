//! JSON experiment configuration.
//!
//! The document mirrors the model and training configs plus the task rule
//! and initialization policy. Unknown keys are rejected with the offending
//! key and position; nothing runs until the whole document validates.

use std::path::{Path, PathBuf};

use kurtq_core::model::{HeavySite, ModelConfig};
use kurtq_core::pipeline::{ExperimentConfig, InitSpec, TaskRule, TrainConfig};
use serde::Deserialize;

use crate::checkpoint;
use crate::CliError;

fn default_heavy_dof() -> f32 {
    2.5
}

fn default_heavy_scale() -> f32 {
    1e-3
}

fn default_heavy_site() -> HeavySite {
    HeavySite::FfnFc2
}

/// Initialization policy, tagged by `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// Planted heavy-tailed model (the pretrained stand-in).
    PretrainedLike {
        #[serde(default = "default_heavy_site")]
        heavy_site: HeavySite,
        #[serde(default = "default_heavy_dof")]
        dof: f32,
        #[serde(default = "default_heavy_scale")]
        scale: f32,
    },
    Random,
    Checkpoint { path: PathBuf },
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig::PretrainedLike {
            heavy_site: default_heavy_site(),
            dof: default_heavy_dof(),
            scale: default_heavy_scale(),
        }
    }
}

fn default_task() -> TaskRule {
    TaskRule::MajorityToken
}

/// Top-level config document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_task")]
    pub task: TaskRule,
    #[serde(default)]
    pub init: InitConfig,
}

impl CliConfig {
    /// Parses and validates a config file; errors carry line/column and the
    /// offending key.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg: CliConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!(
                "{}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// True when the requested stages include a training stage.
    pub fn init_is_checkpoint(&self) -> bool {
        matches!(self.init, InitConfig::Checkpoint { .. })
    }

    /// Resolves into the core experiment config, loading the initial
    /// checkpoint when one is configured.
    pub fn into_experiment(self) -> Result<ExperimentConfig, CliError> {
        let init = match self.init {
            InitConfig::PretrainedLike {
                heavy_site,
                dof,
                scale,
            } => InitSpec::PretrainedLike {
                heavy_site,
                dof,
                scale,
            },
            InitConfig::Random => InitSpec::Random,
            InitConfig::Checkpoint { path } => {
                let ckpt = checkpoint::load(&path)?;
                let (params, act_absmax) = ckpt.into_model();
                InitSpec::Params { params, act_absmax }
            }
        };
        Ok(ExperimentConfig {
            model: self.model,
            train: self.train,
            rule: self.task,
            init,
        })
    }
}

/// Seed precedence: `--seed` flag, then `KURTQ_SEED`, then the config file
/// (whose default is 42).
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("KURTQ_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("KURTQ_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(config_seed),
    }
}
