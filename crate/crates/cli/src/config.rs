//! Layered experiment configuration: defaults < config file < environment
//! < command-line flags. The fully resolved config is embedded verbatim in
//! every report so a run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use genmark_core::finetune::FinetuneConfig;
use genmark_core::pretrain::PretrainConfig;
use genmark_core::registry::REGISTRY_ENV;
use genmark_core::{seeds, Error, Result};
use serde::{Deserialize, Serialize};

/// Environment override for the master seed.
pub const SEED_ENV: &str = "GENMARK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registry root; flag and `GENMARK_REGISTRY` take precedence.
    pub registry: Option<PathBuf>,
    /// Master seed. Per-stage seeds are derived from it (see [`StageSeeds`]),
    /// so the nested `pretrain.seed` / `finetune.seed` fields are overwritten
    /// during resolution and need not be set in the file.
    pub seed: u64,
    pub resolution: usize,
    pub channels: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Optimizer steps for training a synthesis proxy.
    pub synth_steps: usize,
    /// Reverse-process steps when sampling from a diffusion proxy.
    pub sampling_steps: usize,
    /// Length of the proxy noise schedule.
    pub schedule_len: usize,
    /// Prompts visible to the protector (rest of the bank is held out).
    pub known_prompt_count: usize,
    pub prompt_split_seed: u64,
    pub images_per_known_prompt: usize,
    pub images_per_held_out_prompt: usize,
    pub uniqueness_per_side: usize,
    /// Source config file, recorded for provenance when one was given.
    pub config_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            registry: None,
            seed: 0,
            resolution: 64,
            channels: 3,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synth_steps: 6500,
            sampling_steps: 20,
            schedule_len: 1000,
            known_prompt_count: 25,
            prompt_split_seed: 0,
            images_per_known_prompt: 10,
            images_per_held_out_prompt: 50,
            uniqueness_per_side: 250,
            config_path: None,
        }
    }
}

/// Seeds for each pipeline stage, all derived from the master seed so no two
/// stages ever share a raw seed.
#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub pretrain: u64,
    pub protect: u64,
    pub synth: u64,
    pub finetune: u64,
    pub evaluate: u64,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| {
            Error::config(format!("malformed config file {}: {e}", path.display()))
        })?;
        cfg.config_path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Fold environment overrides in: registry root and master seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(v) = std::env::var_os(REGISTRY_ENV) {
            self.registry = Some(PathBuf::from(v));
        }
        if let Some(v) = std::env::var_os(SEED_ENV) {
            let text = v.to_string_lossy();
            self.seed = text
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV} must be an integer, got {text:?}")))?;
        }
        Ok(())
    }

    /// Propagate shared knobs into the nested stage configs and derive the
    /// per-stage seed chain. Call after all layers have been applied.
    pub fn resolve(&mut self) -> StageSeeds {
        self.pretrain.resolution = self.resolution;
        self.pretrain.channels = self.channels;
        let stages = self.stage_seeds();
        self.pretrain.seed = stages.pretrain;
        self.finetune.seed = stages.finetune;
        stages
    }

    pub fn stage_seeds(&self) -> StageSeeds {
        StageSeeds {
            pretrain: seeds::derive(self.seed, "pretrain"),
            protect: seeds::derive(self.seed, "protect"),
            synth: seeds::derive(self.seed, "synth"),
            finetune: seeds::derive(self.seed, "finetune"),
            evaluate: seeds::derive(self.seed, "evaluate"),
        }
    }

    /// Registry root after all layers; errors if still unset.
    pub fn registry_root(&self) -> Result<PathBuf> {
        genmark_core::registry::resolve_root(self.registry.as_deref())
    }

    /// JSON value embedded in reports: the full resolved config.
    pub fn to_value(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::config(format!("unencodable config: {e}")))
    }
}

/// Flags shared by every subcommand, applied as the outermost layer.
#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Path to a JSON config file (lowest-precedence layer).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Registry root directory (overrides file and GENMARK_REGISTRY).
    #[arg(long, global = true, value_name = "DIR")]
    pub registry: Option<PathBuf>,
    /// Master seed (overrides file and GENMARK_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working resolution in pixels (images are resized on ingestion).
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
}

impl CommonArgs {
    /// Build the layered config: defaults < file < env < these flags.
    pub fn layered(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(r) = &self.registry {
            cfg.registry = Some(r.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        Ok(cfg)
    }
}
