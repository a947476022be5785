//! Scenario evaluation for one registered subject. Rebuilds the synthesis
//! proxies deterministically from the registry state, scores the requested
//! scenario grid (plus optional uniqueness, quality, and partial-watermarking
//! cells), and writes a report with tables and plots.

use std::path::PathBuf;

use genmark_core::checkpoint::{load_detector, load_generator};
use genmark_core::evaluation::{
    eval_partial_watermarking, eval_quality, eval_scenario, eval_uniqueness,
    evaluate_sample_seeds, finetune_sample_seeds, EvalReport, PartialAssets, ScenarioAssets,
    ScenarioOutcome, ScenarioSpec,
};
use genmark_core::metrics::default_extractor;
use genmark_core::registry::Registry;
use genmark_core::synthesis::SynthesisRun;
use genmark_core::{seeds, Error, Result};

use crate::commands::{
    clean_dir, missing_artifact, parse_list, prompt_partition, proxy_seed, read_png_dir,
    schedule, train_alt_proxy, train_known_proxy, watermarked_dir, ProxyRole,
};
use crate::config::CommonArgs;

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Registered subject to evaluate.
    #[arg(long)]
    pub subject_id: String,
    /// Scenario ids to run, e.g. `1,2,4` (default: all four).
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Partial-watermarking fractions to sweep, e.g. `0,0.25,0.5,1`.
    #[arg(long)]
    pub partial: Option<String>,
    /// Also compute the synthesis-quality (FID) cell.
    #[arg(long)]
    pub quality: bool,
    /// This subject's watermarked run directory for the uniqueness protocol
    /// (default: `<registry>/<id>/runs/watermarked-ddpm` when present).
    #[arg(long, value_name = "DIR")]
    pub own_run: Option<PathBuf>,
    /// Watermarked run directory of a different subject; repeatable. With at
    /// least one, the uniqueness cell is computed.
    #[arg(long = "other-run", value_name = "DIR")]
    pub other_runs: Vec<PathBuf>,
    /// Proxy training steps (overrides the config file's synth_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Report directory (default: `<registry>/<id>/reports`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn run(common: &CommonArgs, args: EvaluateArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    if let Some(steps) = args.steps {
        cfg.synth_steps = steps;
    }
    let stages = cfg.resolve();
    let registry = Registry::open(cfg.registry_root()?)?;
    let subject_id = &args.subject_id;
    let entry = registry
        .get(subject_id)?
        .ok_or_else(|| Error::config(format!("subject {subject_id:?} is not registered")))?;

    let ckpt = registry.detector_checkpoint_path(subject_id);
    if !ckpt.is_file() {
        return Err(missing_artifact(&ckpt, "run `genmark finetune` first"));
    }
    let detector = load_detector::<f32>(&ckpt)?;

    let scenario_ids: Vec<u8> = match &args.scenarios {
        Some(text) => parse_list(text, "scenario id")?,
        None => vec![1, 2, 3, 4],
    };
    let specs = scenario_ids.iter().map(|&id| ScenarioSpec::new(id)).collect::<Result<Vec<_>>>()?;

    let subject_dir = registry.subject_dir(subject_id);
    let clean_images = read_png_dir(&clean_dir(&subject_dir), cfg.resolution)?;
    let marked_images = read_png_dir(&watermarked_dir(&subject_dir), cfg.resolution)?;
    let (known, held_out) = prompt_partition(&cfg)?;

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
    let need_alt = specs.iter().any(|s| !s.model_known);
    let alt = if need_alt {
        println!("rebuilding alternate-family proxies");
        Some((
            train_alt_proxy(
                &clean_images,
                proxy_seed(&stages, subject_id, ProxyRole::AltClean),
                cfg.synth_steps,
            )?,
            train_alt_proxy(
                &marked_images,
                proxy_seed(&stages, subject_id, ProxyRole::AltWatermarked),
                cfg.synth_steps,
            )?,
        ))
    } else {
        None
    };

    let eval_seed = seeds::derive(stages.evaluate, subject_id);
    let scenario_seed = seeds::derive(eval_seed, "scenario");
    let mut assets = ScenarioAssets::new(&m, &m_w, &known, scenario_seed);
    assets.held_out_prompts = Some(&held_out);
    assets.images_per_known_prompt = cfg.images_per_known_prompt;
    assets.images_per_held_out_prompt = cfg.images_per_held_out_prompt;
    if let Some((ac, aw)) = &alt {
        assets.alternate_clean = Some(ac);
        assets.alternate_watermarked = Some(aw);
    }

    let mut cells = Vec::new();
    let mut s1_outcome: Option<ScenarioOutcome<f32>> = None;
    for spec in &specs {
        let outcome = eval_scenario(&detector, *spec, &assets)?;
        println!(
            "scenario {}: accuracy {:.3} over {} images per side",
            spec.id, outcome.accuracy, outcome.n_per_side
        );
        cells.push(outcome.cell());
        if spec.id == 1 {
            s1_outcome = Some(outcome);
        }
    }

    let quality = if args.quality {
        // The quality cell compares subject inputs against known-model
        // synthesis, which is exactly the scenario-1 image pool.
        let outcome = match s1_outcome {
            Some(o) => o,
            None => eval_scenario(&detector, ScenarioSpec::new(1)?, &assets)?,
        };
        let extractor = default_extractor::<f32>(cfg.resolution, clean_images[0].channels())?;
        let q = eval_quality(
            &clean_images,
            &marked_images,
            &outcome.clean.images,
            &outcome.watermarked.images,
            &extractor,
        )?;
        println!(
            "quality: fid clean {:.4}, watermarked {:.4} (relative change {:+.3})",
            q.fid_clean, q.fid_watermarked, q.relative_change
        );
        Some(q)
    } else {
        None
    };

    let uniqueness = {
        let own_path = args.own_run.clone().or_else(|| {
            let p = subject_dir.join("runs").join("watermarked-ddpm");
            p.join("run.json").exists().then_some(p)
        });
        match (own_path, args.other_runs.is_empty()) {
            (Some(own), false) => {
                let own = SynthesisRun::<f32>::load(&own)?;
                let others = args
                    .other_runs
                    .iter()
                    .map(|p| SynthesisRun::<f32>::load(p))
                    .collect::<Result<Vec<_>>>()?;
                let u = eval_uniqueness(&detector, &own, &others, cfg.uniqueness_per_side)?;
                println!("uniqueness: accuracy {:.3} over {} per side", u.accuracy, u.n_per_side);
                Some(u)
            }
            (None, false) => {
                return Err(Error::config(
                    "uniqueness needs --own-run (or a default watermarked-ddpm run) next to --other-run",
                ))
            }
            _ => None,
        }
    };

    let partial = match &args.partial {
        Some(text) => {
            let fractions: Vec<f64> = parse_list(text, "fraction")?;
            let gen_path = registry.root().join("generator.ckpt");
            if !gen_path.is_file() {
                return Err(missing_artifact(&gen_path, "run `genmark pretrain` first"));
            }
            let base_det_path = registry.root().join("detector.ckpt");
            if !base_det_path.is_file() {
                return Err(missing_artifact(&base_det_path, "run `genmark pretrain` first"));
            }
            let generator = load_generator::<f32>(&gen_path)?;
            let base_detector = load_detector::<f32>(&base_det_path)?;
            let mut ft_cfg = cfg.finetune.clone();
            ft_cfg.subject_id = subject_id.clone();
            ft_cfg.seed = seeds::derive(stages.finetune, subject_id);
            let partial_assets = PartialAssets {
                generator: &generator,
                subject_images: &clean_images,
                base_detector: &base_detector,
                known_prompts: &known,
                finetune: ft_cfg,
                schedule: schedule(&cfg)?,
                synth_steps: cfg.synth_steps,
                sampling_steps: cfg.sampling_steps,
                synth_seed: seeds::derive(seeds::derive(stages.synth, subject_id.as_str()), "partial"),
                protect_seed: entry.latent_seed,
                images_per_known_prompt: cfg.images_per_known_prompt,
                eval_seed: seeds::derive(eval_seed, "partial"),
            };
            let outcomes = eval_partial_watermarking(&fractions, &partial_assets)?;
            for o in &outcomes {
                println!(
                    "partial {:.2}: accuracy {:.3} ({} of {} images watermarked)",
                    o.fraction,
                    o.accuracy,
                    o.n_watermarked,
                    clean_images.len()
                );
            }
            outcomes
        }
        None => Vec::new(),
    };

    let extractor_version = default_extractor::<f32>(cfg.resolution, clean_images[0].channels())?
        .version()
        .to_string();
    let all_prompt_ids: Vec<u32> = known.ids().into_iter().chain(held_out.ids()).collect();
    let ft_seed = seeds::derive(stages.finetune, subject_id);
    let report = EvalReport {
        subject_id: subject_id.clone(),
        scenarios: cells,
        uniqueness,
        quality,
        partial_watermarking: partial,
        countermeasures: Vec::new(),
        extractor_version,
        finetune_seed: ft_seed,
        evaluate_seed: eval_seed,
        finetune_sample_seeds: finetune_sample_seeds(ft_seed, &known.ids()),
        evaluate_sample_seeds: evaluate_sample_seeds(scenario_seed, &all_prompt_ids),
        config: cfg.to_value()?,
    };

    let out = args.out.clone().unwrap_or_else(|| subject_dir.join("reports"));
    let written = crate::commands::report::write_artifacts(&report, &out)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
