//! Train a synthesis proxy on a subject's registered images (clean or
//! watermarked side) and sample a provenance-tracked run, or ingest an
//! externally synthesized set into the same run format.

use std::path::PathBuf;

use genmark_core::imagery::DatasetManifest;
use genmark_core::registry::Registry;
use genmark_core::seeds::{self, sample_seed, SeedDomain};
use genmark_core::synthesis::{
    ingest_external_synthesis, synthesize_run, ModelKind, ProvenanceFields, SubjectSynthesizer,
    SynthesisRun,
};
use genmark_core::{Error, Result};

use crate::commands::{
    clean_dir, missing_artifact, parse_list, proxy_seed, read_png_dir, train_alt_proxy,
    train_known_proxy, watermarked_dir, ProxyRole,
};
use crate::config::CommonArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Clean,
    Watermarked,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Clean => ModelKind::Clean,
            KindArg::Watermarked => ModelKind::Watermarked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FamilyArg {
    /// Known family: the toy diffusion proxy.
    Ddpm,
    /// Alternate family: the autoencoder proxy.
    Ae,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Registered subject to synthesize.
    #[arg(long)]
    pub subject_id: String,
    /// Which side of the subject's images to train on.
    #[arg(long, value_enum, default_value_t = KindArg::Watermarked)]
    pub model_kind: KindArg,
    /// Proxy family to train.
    #[arg(long, value_enum, default_value_t = FamilyArg::Ddpm)]
    pub family: FamilyArg,
    /// Comma-separated prompt ids (default: the known prompt split).
    #[arg(long)]
    pub prompts: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub images_per_prompt: usize,
    /// Proxy training steps (overrides the config file's synth_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run directory (default: `<registry>/<id>/runs/<kind>-<family>`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Ingest an external synthesis directory (with manifest.json) instead
    /// of training a proxy.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["prompts", "steps", "family"])]
    pub external: Option<PathBuf>,
    /// Provenance for --external: who synthesized the images.
    #[arg(long, requires = "external")]
    pub external_id: Option<String>,
    /// Provenance for --external: prompt id the images answer.
    #[arg(long, requires = "external")]
    pub external_prompt: Option<u32>,
    /// Provenance for --external: seed the external sampler used.
    #[arg(long, requires = "external")]
    pub external_seed: Option<u64>,
    /// Resynthesize even if the run directory already exists.
    #[arg(long)]
    pub force: bool,
}

pub fn run(common: &CommonArgs, args: SynthArgs) -> Result<()> {
    let mut cfg = common.layered()?;
    if let Some(steps) = args.steps {
        cfg.synth_steps = steps;
    }
    let stages = cfg.resolve();
    let registry = Registry::open(cfg.registry_root()?)?;
    let subject_dir = registry.subject_dir(&args.subject_id);
    let kind: ModelKind = args.model_kind.into();

    let out = args.out.clone().unwrap_or_else(|| {
        let family = match args.family {
            FamilyArg::Ddpm => "ddpm",
            FamilyArg::Ae => "ae",
        };
        let side = match kind {
            ModelKind::Clean => "clean",
            ModelKind::Watermarked => "watermarked",
        };
        subject_dir.join("runs").join(format!("{side}-{family}"))
    });
    if out.join("run.json").exists() && !args.force {
        println!("reusing existing run in {} (pass --force to resynthesize)", out.display());
        return Ok(());
    }

    let run = if let Some(external) = &args.external {
        let manifest = DatasetManifest::read(&external.join("manifest.json"))?;
        ingest_external_synthesis::<f32>(
            external,
            &manifest,
            ProvenanceFields {
                synthesizer_id: args.external_id.clone(),
                model_kind: Some(kind),
                prompt_id: args.external_prompt,
                seed: args.external_seed,
            },
            cfg.resolution,
        )?
    } else {
        if registry.get(&args.subject_id)?.is_none() {
            return Err(Error::config(format!(
                "subject {:?} is not registered; run `genmark watermark` first",
                args.subject_id
            )));
        }
        let images_dir = match kind {
            ModelKind::Clean => clean_dir(&subject_dir),
            ModelKind::Watermarked => watermarked_dir(&subject_dir),
        };
        if !images_dir.is_dir() {
            return Err(missing_artifact(&images_dir, "run `genmark watermark` first"));
        }
        let images = read_png_dir(&images_dir, cfg.resolution)?;

        let role = match (args.family, kind) {
            (FamilyArg::Ddpm, ModelKind::Clean) => ProxyRole::KnownClean,
            (FamilyArg::Ddpm, ModelKind::Watermarked) => ProxyRole::KnownWatermarked,
            (FamilyArg::Ae, ModelKind::Clean) => ProxyRole::AltClean,
            (FamilyArg::Ae, ModelKind::Watermarked) => ProxyRole::AltWatermarked,
        };
        let seed = proxy_seed(&stages, &args.subject_id, role);
        let proxy: Box<dyn SubjectSynthesizer<f32>> = match args.family {
            FamilyArg::Ddpm => Box::new(train_known_proxy(&cfg, &images, seed, cfg.synth_steps)?),
            FamilyArg::Ae => Box::new(train_alt_proxy(&images, seed, cfg.synth_steps)?),
        };

        let prompt_ids: Vec<u32> = match &args.prompts {
            Some(text) => parse_list(text, "prompt id")?,
            None => crate::commands::prompt_partition(&cfg)?.0.ids(),
        };
        if prompt_ids.is_empty() {
            return Err(Error::config("no prompts to synthesize"));
        }
        let sample_root = seeds::derive(seed, "sample");
        let runs = prompt_ids
            .iter()
            .map(|&p| {
                synthesize_run(
                    proxy.as_ref(),
                    kind,
                    p,
                    args.images_per_prompt,
                    sample_seed(sample_root, SeedDomain::Evaluate, p, 0),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        SynthesisRun::merge(runs)?
    };

    run.save(&out)?;
    println!(
        "wrote run {} ({} images, checksum {})",
        out.display(),
        run.len(),
        run.checksum,
    );
    Ok(())
}
