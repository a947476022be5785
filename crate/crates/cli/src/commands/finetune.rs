//! Per-subject detector fine-tuning. Trains the two known-family proxies on
//! the subject's registered clean and watermarked images, synthesizes the
//! paired fine-tuning sets, fine-tunes the pretrained detector, and stores
//! checkpoint plus provenance in the registry.

use std::path::PathBuf;

use genmark_core::checkpoint::{load_detector, save_detector};
use genmark_core::finetune::{build_finetune_set, finetune_detector};
use genmark_core::registry::{FinetuneProvenance, Registry};
use genmark_core::{seeds, Error, Result};

use crate::commands::{
    clean_dir, missing_artifact, prompt_partition, proxy_seed, read_png_dir, train_known_proxy,
    watermarked_dir, ProxyRole,
};
use crate::config::CommonArgs;

#[derive(Debug, clap::Args)]
pub struct FinetuneArgs {
    /// Registered subject whose detector to fine-tune.
    #[arg(long)]
    pub subject_id: String,
    /// Base detector checkpoint (default: `<registry>/detector.ckpt`).
    #[arg(long, value_name = "FILE")]
    pub detector: Option<PathBuf>,
    /// Proxy training steps (overrides the config file's synth_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Synthesized images per prompt and side.
    #[arg(long)]
    pub images_per_prompt: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Re-run even if the stored provenance matches this configuration.
    #[arg(long)]
    pub force: bool,
}

pub fn run(common: &CommonArgs, args: FinetuneArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    if let Some(steps) = args.steps {
        cfg.synth_steps = steps;
    }
    let stages = cfg.resolve();
    if let Some(n) = args.images_per_prompt {
        cfg.finetune.images_per_prompt = n;
    }
    if let Some(e) = args.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.finetune.learning_rate = lr;
    }
    let registry = Registry::open(cfg.registry_root()?)?;
    let subject_id = &args.subject_id;
    let entry = registry
        .get(subject_id)?
        .ok_or_else(|| Error::config(format!("subject {subject_id:?} is not registered; run `genmark watermark` first")))?;

    let mut ft_cfg = cfg.finetune.clone();
    ft_cfg.subject_id = subject_id.clone();
    ft_cfg.seed = seeds::derive(stages.finetune, subject_id);

    let ckpt_path = registry.detector_checkpoint_path(subject_id);
    if !args.force && ckpt_path.is_file() {
        if let Some(prov) = &entry.finetune {
            if prov.config == ft_cfg {
                println!(
                    "reusing fine-tuned detector {} (pass --force to re-run)",
                    ckpt_path.display()
                );
                return Ok(());
            }
        }
    }

    let det_path = args
        .detector
        .clone()
        .unwrap_or_else(|| registry.root().join("detector.ckpt"));
    if !det_path.is_file() {
        return Err(missing_artifact(&det_path, "run `genmark pretrain` first"));
    }
    let base = load_detector::<f32>(&det_path)?;

    let subject_dir = registry.subject_dir(subject_id);
    let clean_images = read_png_dir(&clean_dir(&subject_dir), cfg.resolution)?;
    let marked_images = read_png_dir(&watermarked_dir(&subject_dir), cfg.resolution)?;

    println!("training clean/watermarked proxies ({} steps each)", cfg.synth_steps);
    let m = train_known_proxy(
        &cfg,
        &clean_images,
        proxy_seed(&stages, subject_id, ProxyRole::KnownClean),
        cfg.synth_steps,
    )?;
    let m_w = train_known_proxy(
        &cfg,
        &marked_images,
        proxy_seed(&stages, subject_id, ProxyRole::KnownWatermarked),
        cfg.synth_steps,
    )?;

    let (known, _held_out) = prompt_partition(&cfg)?;
    println!(
        "synthesizing {} images per prompt and side over {} prompts",
        ft_cfg.images_per_prompt,
        known.len()
    );
    let (s, s_w) = build_finetune_set(&m, &m_w, &known, &ft_cfg)?;
    let runs_dir = subject_dir.join("runs");
    s.save(&runs_dir.join("finetune-clean"))?;
    s_w.save(&runs_dir.join("finetune-watermarked"))?;

    println!("fine-tuning detector ({} epochs on {} images)", ft_cfg.epochs, s.len() + s_w.len());
    let tuned = finetune_detector(&base, &s, &s_w, &ft_cfg)?;
    save_detector(&tuned, &ckpt_path)?;

    let mut entry = entry;
    entry.detector_checkpoint = Some("detector.ckpt".into());
    entry.finetune = Some(FinetuneProvenance {
        config: ft_cfg,
        clean_checksum: s.checksum.clone(),
        watermarked_checksum: s_w.checksum.clone(),
    });
    let entry = registry.upsert(entry)?;
    println!(
        "wrote {} (subject entry v{})",
        ckpt_path.display(),
        entry.entry_version
    );
    Ok(())
}
