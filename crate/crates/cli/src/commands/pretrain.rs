//! Joint generator/detector pretraining. Writes `generator.ckpt`,
//! `detector.ckpt`, and `training_log.csv` into the output directory
//! (default: the registry root). Checkpoints are written atomically, so a
//! failed run never leaves a partial checkpoint behind.

use std::path::PathBuf;

use genmark_core::checkpoint::{save_detector, save_generator};
use genmark_core::imagery::{generate_synthetic_subjects, load_image_folder, DatasetManifest, Task};
use genmark_core::pretrain::pretrain_with_callback;
use genmark_core::{Error, Image32, Result};

use crate::config::CommonArgs;

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    /// Output directory for checkpoints and the training log.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Optimizer steps (overrides the config file).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Pretraining corpus: a folder with a manifest.json. Without it, a
    /// procedural corpus is generated.
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Procedural corpus: subjects per task.
    #[arg(long, default_value_t = 20)]
    pub corpus_subjects: usize,
    /// Procedural corpus: images per subject.
    #[arg(long, default_value_t = 25)]
    pub corpus_images: usize,
    /// Also snapshot checkpoints every N steps under `<out>/checkpoints/`.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
    /// Retrain even if checkpoints already exist in the output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(common: &CommonArgs, args: PretrainArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    let stages = cfg.resolve();
    if let Some(steps) = args.steps {
        cfg.pretrain.steps = steps;
    }

    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => cfg.registry_root()?,
    };
    let gen_path = out.join("generator.ckpt");
    let det_path = out.join("detector.ckpt");
    if gen_path.exists() && det_path.exists() && !args.force {
        println!("reusing existing checkpoints in {} (pass --force to retrain)", out.display());
        return Ok(());
    }
    // Fail before training, not after half an hour of it.
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Io(std::io::Error::other(format!("cannot create output directory {}: {e}", out.display()))))?;
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"probe")
        .map_err(|e| Error::Io(std::io::Error::other(format!("output directory {} is not writable: {e}", out.display()))))?;
    std::fs::remove_file(&probe)?;

    let corpus = build_corpus(&args, &cfg)?;
    println!(
        "pretraining on {} images at {}x{} for {} steps (seed {})",
        corpus.len(),
        cfg.resolution,
        cfg.resolution,
        cfg.pretrain.steps,
        stages.pretrain,
    );

    let every = args.checkpoint_every.unwrap_or(0);
    let snap_root = out.join("checkpoints");
    let (g, d, log) = pretrain_with_callback(&corpus, &cfg.pretrain, |rec, g, d| {
        if let Some(acc) = rec.val_accuracy {
            println!("step {:>6}  loss {:.4}  val acc {acc:.3}", rec.step, rec.loss_total);
        }
        if every > 0 && rec.step % every == 0 {
            let dir = snap_root.join(format!("step_{:06}", rec.step));
            std::fs::create_dir_all(&dir)?;
            save_generator(g, &dir.join("generator.ckpt"))?;
            save_detector(d, &dir.join("detector.ckpt"))?;
        }
        Ok(())
    })?;

    save_generator(&g, &gen_path)?;
    save_detector(&d, &det_path)?;
    log.write_csv(&out.join("training_log.csv"))?;

    let last = log.records.last();
    println!(
        "wrote {} and {} ({} steps, {:.1}s, final loss {})",
        gen_path.display(),
        det_path.display(),
        log.records.len(),
        log.wall_secs,
        last.map_or_else(|| "n/a".into(), |r| format!("{:.4}", r.loss_total)),
    );
    Ok(())
}

fn build_corpus(args: &PretrainArgs, cfg: &crate::config::ExperimentConfig) -> Result<Vec<Image32>> {
    let datasets = match &args.corpus {
        Some(root) => {
            let manifest = DatasetManifest::read(&root.join("manifest.json"))?;
            load_image_folder(root, &manifest, cfg.resolution)?
        }
        None => {
            let mut all = Vec::new();
            for task in [Task::ArtisticStyle, Task::HumanFace] {
                all.extend(generate_synthetic_subjects(
                    task,
                    args.corpus_subjects,
                    args.corpus_images,
                    cfg.resolution,
                    cfg.seed,
                )?);
            }
            all
        }
    };
    Ok(datasets.into_iter().flat_map(|d| d.images).collect())
}
