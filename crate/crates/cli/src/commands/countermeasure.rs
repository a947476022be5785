//! Countermeasure bench: forgery (false-attribution) and removal attacks
//! against a fine-tuned detector, reported as one CSV row per measurement.

use std::path::PathBuf;

use genmark_core::checkpoint::load_detector;
use genmark_core::evaluation::{
    eval_forgery, eval_removal, evaluate_sample_seeds, finetune_sample_seeds, AttackSide,
    CountermeasureAssets, CountermeasureOutcome, EvalReport, RemovalKind,
};
use genmark_core::metrics::default_extractor;
use genmark_core::registry::Registry;
use genmark_core::{seeds, Error, Result};

use crate::commands::{
    clean_dir, missing_artifact, parse_list, prompt_partition, proxy_seed, read_png_dir,
    schedule, train_known_proxy, watermarked_dir, ProxyRole,
};
use crate::config::CommonArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackArg {
    /// Add forged watermark noise to clean synthesis; measures false attribution.
    Forgery,
    /// Degrade the watermark (gaussian noise or JPEG), input- or output-side.
    Removal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Gaussian,
    Jpeg,
}

impl From<KindArg> for RemovalKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Gaussian => RemovalKind::Gaussian,
            KindArg::Jpeg => RemovalKind::Jpeg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SideArg {
    /// Attack the subject's watermarked images, then retrain the synthesizer.
    Input,
    /// Attack the synthesized images directly.
    Output,
    /// Measure both sides.
    Both,
}

#[derive(Debug, clap::Args)]
pub struct CountermeasureArgs {
    /// Registered subject to attack.
    #[arg(long)]
    pub subject_id: String,
    #[arg(long, value_enum)]
    pub attack: AttackArg,
    /// Forgery: comma-separated noise magnitudes to sweep.
    #[arg(long, default_value = "0.0005,0.005,0.05")]
    pub sigmas: String,
    /// Removal: degradation family.
    #[arg(long, value_enum, required_if_eq("attack", "removal"))]
    pub kind: Option<KindArg>,
    /// Removal: noise sigma for gaussian, quality for jpeg.
    #[arg(long, required_if_eq("attack", "removal"), allow_negative_numbers = true)]
    pub param: Option<f64>,
    #[arg(long, value_enum, default_value_t = SideArg::Both)]
    pub side: SideArg,
    /// Synthesized images per prompt and side.
    #[arg(long, default_value_t = 10)]
    pub images_per_prompt: usize,
    /// Proxy training steps (overrides the config file's synth_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory (default: `<registry>/<id>/reports`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(common: &CommonArgs, args: CountermeasureArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    if let Some(steps) = args.steps {
        cfg.synth_steps = steps;
    }
    let stages = cfg.resolve();
    let registry = Registry::open(cfg.registry_root()?)?;
    let subject_id = &args.subject_id;
    if registry.get(subject_id)?.is_none() {
        return Err(Error::config(format!("subject {subject_id:?} is not registered")));
    }
    let ckpt = registry.detector_checkpoint_path(subject_id);
    if !ckpt.is_file() {
        return Err(missing_artifact(&ckpt, "run `genmark finetune` first"));
    }
    let detector = load_detector::<f32>(&ckpt)?;

    let subject_dir = registry.subject_dir(subject_id);
    let clean_images = read_png_dir(&clean_dir(&subject_dir), cfg.resolution)?;
    let marked_images = read_png_dir(&watermarked_dir(&subject_dir), cfg.resolution)?;
    let (known, _) = prompt_partition(&cfg)?;

    println!("rebuilding known-family proxies ({} steps each)", cfg.synth_steps);
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

    let eval_seed = seeds::derive(stages.evaluate, subject_id);
    let cm_seed = seeds::derive(eval_seed, "countermeasure");
    let assets = CountermeasureAssets {
        clean_synth: &m,
        watermarked_synth: &m_w,
        watermarked_subject_images: &marked_images,
        prompts: &known,
        images_per_prompt: args.images_per_prompt,
        schedule: schedule(&cfg)?,
        synth_steps: cfg.synth_steps,
        sampling_steps: cfg.sampling_steps,
        synth_seed: seeds::derive(seeds::derive(stages.synth, subject_id.as_str()), "removal-retrain"),
        eval_seed: cm_seed,
        attack_seed: seeds::derive(eval_seed, "attack"),
    };

    let mut rows: Vec<CountermeasureOutcome> = Vec::new();
    // Record the seeds actually drawn: merged_run derives per-attack roots.
    let sample_root = match args.attack {
        AttackArg::Forgery => seeds::derive(cm_seed, "forgery"),
        AttackArg::Removal => seeds::derive(cm_seed, "removal"),
    };
    match args.attack {
        AttackArg::Forgery => {
            let sigmas: Vec<f64> = parse_list(&args.sigmas, "sigma")?;
            if sigmas.is_empty() {
                return Err(Error::config("forgery needs at least one sigma"));
            }
            for sigma in sigmas {
                rows.push(eval_forgery(&detector, sigma, &assets)?);
            }
        }
        AttackArg::Removal => {
            let kind: RemovalKind = args.kind.expect("enforced by clap").into();
            let param = args.param.expect("enforced by clap");
            let sides: &[AttackSide] = match args.side {
                SideArg::Input => &[AttackSide::Input],
                SideArg::Output => &[AttackSide::Output],
                SideArg::Both => &[AttackSide::Input, AttackSide::Output],
            };
            for &side in sides {
                rows.push(eval_removal(&detector, kind, param, side, &assets)?);
            }
        }
    }
    for row in &rows {
        println!(
            "{} kind={} side={} param={}: accuracy {:.3} over {} images",
            row.attack,
            row.kind.map_or_else(|| "-".into(), |k| k.to_string()),
            row.side.map_or_else(|| "-".into(), |s| s.to_string()),
            row.param,
            row.accuracy,
            row.n_images
        );
    }

    let extractor_version = default_extractor::<f32>(cfg.resolution, clean_images[0].channels())?
        .version()
        .to_string();
    let ft_seed = seeds::derive(stages.finetune, subject_id);
    let report = EvalReport {
        subject_id: subject_id.clone(),
        scenarios: Vec::new(),
        uniqueness: None,
        quality: None,
        partial_watermarking: Vec::new(),
        countermeasures: rows,
        extractor_version,
        finetune_seed: ft_seed,
        evaluate_seed: eval_seed,
        finetune_sample_seeds: finetune_sample_seeds(ft_seed, &known.ids()),
        evaluate_sample_seeds: evaluate_sample_seeds(sample_root, &known.ids()),
        config: cfg.to_value()?,
    };
    report.validate()?;

    let out = args.out.clone().unwrap_or_else(|| subject_dir.join("reports"));
    std::fs::create_dir_all(&out)?;
    let json_path = out.join("countermeasure_report.json");
    std::fs::write(&json_path, report.to_json()?)?;
    let csv_path = out.join("countermeasure_table.csv");
    std::fs::write(&csv_path, report.countermeasure_csv())?;
    println!("wrote {}", json_path.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}
