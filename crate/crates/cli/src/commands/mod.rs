pub mod countermeasure;
pub mod evaluate;
pub mod finetune;
pub mod pretrain;
pub mod report;
pub mod synth;
pub mod watermark;

use std::path::{Path, PathBuf};

use genmark_core::imagery::{split_prompts, PromptSet};
use genmark_core::synthesis::{
    AutoencoderProxy, DiffusionProxy, NoiseSchedule, SubjectSynthesizer,
};
use genmark_core::{seeds, Error, Image32, Result};

use crate::config::{ExperimentConfig, StageSeeds};

/// Nonzero exit that names the artifact a prerequisite stage should have
/// produced.
pub fn missing_artifact(path: &Path, hint: &str) -> Error {
    Error::config(format!("missing artifact {} ({hint})", path.display()))
}

/// Sorted PNG ingestion; every image is resized to the working resolution.
pub fn read_png_dir(dir: &Path, resolution: usize) -> Result<Vec<Image32>> {
    if !dir.is_dir() {
        return Err(missing_artifact(dir, "expected a directory of PNG images"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    if paths.is_empty() {
        return Err(missing_artifact(dir, "directory holds no PNG images"));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| Image32::read_png(p)?.resize(resolution))
        .collect()
}

/// Write images as `img_0000.png`, `img_0001.png`, ... into `dir`.
pub fn write_png_dir(dir: &Path, images: &[Image32]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        img.write_png(&dir.join(format!("img_{i:04}.png")))?;
    }
    Ok(())
}

/// Which synthesis model a command is reconstructing. The seed tags are part
/// of the on-disk contract: `synth`, `finetune`, and `evaluate` all derive
/// the same chains, so they rebuild bitwise-identical proxies from the same
/// registry state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyRole {
    KnownClean,
    KnownWatermarked,
    AltClean,
    AltWatermarked,
}

impl ProxyRole {
    pub fn tag(self) -> &'static str {
        match self {
            ProxyRole::KnownClean => "known-clean",
            ProxyRole::KnownWatermarked => "known-watermarked",
            ProxyRole::AltClean => "alt-clean",
            ProxyRole::AltWatermarked => "alt-watermarked",
        }
    }
}

pub fn proxy_seed(stages: &StageSeeds, subject_id: &str, role: ProxyRole) -> u64 {
    seeds::derive(seeds::derive(stages.synth, subject_id), role.tag())
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.schedule_len, 1e-4, 2e-2)
}

/// Train the known-family (diffusion) proxy for one side of a subject.
pub fn train_known_proxy(
    cfg: &ExperimentConfig,
    images: &[Image32],
    seed: u64,
    steps: usize,
) -> Result<DiffusionProxy<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::config("cannot train a synthesizer on an empty image set"))?;
    let mut proxy = DiffusionProxy::new(first.resolution(), first.channels(), schedule(cfg)?)?
        .with_sampling_steps(cfg.sampling_steps);
    proxy.train(images, steps, seed)?;
    Ok(proxy)
}

/// Train the alternate-family (autoencoder) proxy for one side of a subject.
pub fn train_alt_proxy(
    images: &[Image32],
    seed: u64,
    steps: usize,
) -> Result<AutoencoderProxy<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::config("cannot train a synthesizer on an empty image set"))?;
    let mut proxy = AutoencoderProxy::new(first.resolution(), first.channels())?;
    proxy.train(images, steps, seed)?;
    Ok(proxy)
}

/// The protector-visible / held-out prompt partition for this config.
pub fn prompt_partition(cfg: &ExperimentConfig) -> Result<(PromptSet, PromptSet)> {
    split_prompts(&PromptSet::default_bank(), cfg.known_prompt_count, cfg.prompt_split_seed)
}

/// Per-subject image directories under the registry.
pub fn clean_dir(subject_dir: &Path) -> PathBuf {
    subject_dir.join("clean")
}

pub fn watermarked_dir(subject_dir: &Path) -> PathBuf {
    subject_dir.join("watermarked")
}

/// Parse a comma-separated list of values, e.g. `--fractions 0.25,0.5,1`.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::config(format!("cannot parse {what} entry {s:?}")))
        })
        .collect()
}
