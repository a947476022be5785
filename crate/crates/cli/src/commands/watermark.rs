//! Watermark a subject's images with the pretrained generator and register
//! the subject. The latent seed is persisted in the registry entry, so a
//! re-run reproduces the identical watermark unless `--force` rotates it.

use std::path::PathBuf;

use genmark_core::checkpoint::load_generator;
use genmark_core::metrics::{default_extractor, perceptual_distance};
use genmark_core::registry::{Registry, SubjectEntry};
use genmark_core::watermark::protect_images;
use genmark_core::{seeds, Result};

use crate::commands::{clean_dir, missing_artifact, read_png_dir, watermarked_dir, write_png_dir};
use crate::config::CommonArgs;

#[derive(Debug, clap::Args)]
pub struct WatermarkArgs {
    /// Directory holding the subject's original PNG images.
    #[arg(long, value_name = "DIR")]
    pub subject_dir: PathBuf,
    /// Registry id for the subject (default: the directory name).
    #[arg(long)]
    pub subject_id: Option<String>,
    /// Generator checkpoint (default: `<registry>/generator.ckpt`).
    #[arg(long, value_name = "FILE")]
    pub generator: Option<PathBuf>,
    /// Rotate to a fresh latent seed instead of reusing the persisted one.
    #[arg(long)]
    pub force: bool,
}

pub fn run(common: &CommonArgs, args: WatermarkArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    let stages = cfg.resolve();
    let registry = Registry::open(cfg.registry_root()?)?;

    let gen_path = args
        .generator
        .clone()
        .unwrap_or_else(|| registry.root().join("generator.ckpt"));
    if !gen_path.is_file() {
        return Err(missing_artifact(&gen_path, "run `genmark pretrain` first"));
    }
    let generator = load_generator::<f32>(&gen_path)?;

    let subject_id = match &args.subject_id {
        Some(id) => id.clone(),
        None => args
            .subject_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| missing_artifact(&args.subject_dir, "subject directory has no name"))?,
    };
    let images = read_png_dir(&args.subject_dir, cfg.resolution)?;

    // First run derives the latent seed from the master seed; later runs
    // reuse the persisted value so the watermark is stable, and --force
    // rotates deterministically by entry version.
    let existing = registry.get(&subject_id)?;
    let base = seeds::derive(stages.protect, &subject_id);
    let latent_seed = match (&existing, args.force) {
        (Some(e), false) => {
            println!("reusing persisted latent seed {}", e.latent_seed);
            e.latent_seed
        }
        (Some(e), true) => seeds::derive_n(base, "v", u64::from(e.entry_version) + 1),
        (None, _) => seeds::derive_n(base, "v", 1),
    };

    let watermarked = protect_images(&generator, &images, latent_seed)?;

    let subject_dir = registry.subject_dir(&subject_id);
    write_png_dir(&clean_dir(&subject_dir), &images)?;
    write_png_dir(&watermarked_dir(&subject_dir), &watermarked)?;

    let extractor = default_extractor::<f32>(cfg.resolution, images[0].channels())?;
    let mut dist = 0.0f64;
    for (x, xw) in images.iter().zip(&watermarked) {
        dist += f64::from(perceptual_distance(x, xw, &extractor)?);
    }
    dist /= images.len() as f64;

    let entry = registry.upsert(SubjectEntry {
        subject_id: subject_id.clone(),
        entry_version: 0, // assigned by the registry
        latent_seed,
        generator_version: generator.version,
        detector_checkpoint: existing.as_ref().and_then(|e| e.detector_checkpoint.clone()),
        finetune: existing.and_then(|e| e.finetune),
    })?;
    println!(
        "registered {subject_id} v{} ({} images, latent seed {latent_seed}, mean perceptual distance {dist:.5})",
        entry.entry_version,
        watermarked.len(),
    );
    println!("watermarked images in {}", watermarked_dir(&subject_dir).display());
    Ok(())
}
