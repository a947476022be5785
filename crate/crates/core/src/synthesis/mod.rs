//! Subject-driven synthesis stage: the synthesizer contract, a toy
//! diffusion proxy, an autoencoder variant, and ingestion of externally
//! synthesized images.
//!
//! Real personalization pipelines (Textual Inversion, DreamBooth) are out of
//! desk-scale reach, so the proxies here preserve the causal structure that
//! matters: a model is trained on a subject's (possibly watermarked) images,
//! and whatever trace of the watermark survives training must be learned by
//! the phase-2 detector from synthesized outputs alone. Critically, both
//! proxies draw every bit of training and sampling stochasticity from seed
//! chains that never touch pixel content, so two models trained on identical
//! image lists are bitwise identical — the fraction-zero partial-watermarking
//! control then sits at chance by construction.

mod proxy;

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::imagery::{self, DatasetManifest};
use crate::{sc, Error, Result, Scalar};

pub use proxy::{AutoencoderProxy, DiffusionProxy};

/// Per-step noise variances β_t, with cumulative products cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        if let Some(bad) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config(format!(
                "every beta must lie strictly inside (0,1), got {bad}"
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced betas from `start` to `end` inclusive.
    pub fn linear(len: usize, start: f64, end: f64) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        let betas = (0..len)
            .map(|t| {
                if len == 1 {
                    start
                } else {
                    start + (end - start) * t as f64 / (len - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    /// The stock schedule: 1000 steps, 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("stock schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// ᾱ_t = ∏_{s ≤ t} (1 − β_s), zero-indexed.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// One diffusion step: √(1−β)·x + √β·ε, unclamped.
pub fn forward_diffuse<S: Scalar>(
    x_prev: &Array3<S>,
    beta_t: f64,
    noise: &Array3<S>,
) -> Result<Array3<S>> {
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::config(format!("beta must lie in [0,1], got {beta_t}")));
    }
    if x_prev.dim() != noise.dim() {
        return Err(Error::dimension("diffusion input and noise shapes differ"));
    }
    let a = sc::<S>((1.0 - beta_t).sqrt());
    let b = sc::<S>(beta_t.sqrt());
    Ok(x_prev * a + noise * b)
}

/// Mean squared error between true and estimated noise.
pub fn denoise_loss<S: Scalar>(eps: &Array3<S>, eps_hat: &Array3<S>) -> Result<S> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::dimension("noise and estimate shapes differ"));
    }
    let mut sum = S::zero();
    ndarray::Zip::from(eps).and(eps_hat).for_each(|&a, &b| {
        let d = a - b;
        sum += d * d;
    });
    Ok(sum / sc(eps.len() as f64))
}

/// Contract every synthesizer honours: train on one subject's images, then
/// deterministically sample prompt-conditioned images at the same resolution.
pub trait SubjectSynthesizer<S: Scalar> {
    fn train(&mut self, images: &[ImageTensor<S>], steps: usize, seed: u64) -> Result<()>;
    fn synthesize(&self, prompt_id: u32, n: usize, seed: u64) -> Result<Vec<ImageTensor<S>>>;
    /// Stable identifier recorded in provenance.
    fn id(&self) -> String;
    fn resolution(&self) -> usize;
}

/// Train the stock toy-diffusion proxy on a subject's images.
pub fn train_proxy<S: Scalar>(
    images: &[ImageTensor<S>],
    steps: usize,
    seed: u64,
    schedule: NoiseSchedule,
) -> Result<DiffusionProxy<S>> {
    let first = images
        .first()
        .ok_or_else(|| Error::config("cannot train a synthesizer on an empty image set"))?;
    let mut proxy = DiffusionProxy::new(first.resolution(), first.channels(), schedule)?;
    proxy.train(images, steps, seed)?;
    Ok(proxy)
}

/// Which side of the experiment a model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Clean,
    Watermarked,
}

/// Lineage of one synthesized image within its run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub prompt_id: u32,
    /// Seed passed to the synthesize call that produced this image.
    pub seed: u64,
    /// Position within that call's batch.
    pub index: usize,
}

/// Possibly incomplete provenance supplied by an external caller.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceFields {
    pub synthesizer_id: Option<String>,
    pub model_kind: Option<ModelKind>,
    pub prompt_id: Option<u32>,
    pub seed: Option<u64>,
}

/// A batch of synthesized images with complete, serializable lineage.
#[derive(Debug, Clone)]
pub struct SynthesisRun<S: Scalar> {
    pub images: Vec<ImageTensor<S>>,
    pub synthesizer_id: String,
    pub model_kind: ModelKind,
    /// One record per image, same order as `images`.
    pub per_image: Vec<ImageProvenance>,
    /// SHA-256 over the 8-bit pixel content of every image, in order.
    pub checksum: String,
}

fn run_checksum<S: Scalar>(images: &[ImageTensor<S>]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for img in images {
        h.update((img.resolution() as u64).to_le_bytes());
        h.update((img.channels() as u64).to_le_bytes());
        h.update(&img.to_rgb8());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct RunFileEntry {
    file: String,
    prompt_id: u32,
    seed: u64,
    index: usize,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    synthesizer_id: String,
    model_kind: ModelKind,
    checksum: String,
    images: Vec<RunFileEntry>,
}

impl<S: Scalar> SynthesisRun<S> {
    pub fn from_images(
        images: Vec<ImageTensor<S>>,
        synthesizer_id: String,
        model_kind: ModelKind,
        per_image: Vec<ImageProvenance>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InsufficientData("a synthesis run needs at least one image".into()));
        }
        if images.len() != per_image.len() {
            return Err(Error::validation(format!(
                "{} images but {} provenance records",
                images.len(),
                per_image.len()
            )));
        }
        let checksum = run_checksum(&images);
        Ok(Self { images, synthesizer_id, model_kind, per_image, checksum })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Concatenate runs from the same synthesizer and model kind.
    pub fn merge(runs: Vec<Self>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InsufficientData("cannot merge zero runs".into()))?;
        let synthesizer_id = first.synthesizer_id.clone();
        let model_kind = first.model_kind;
        let mut images = Vec::new();
        let mut per_image = Vec::new();
        for run in runs {
            if run.synthesizer_id != synthesizer_id || run.model_kind != model_kind {
                return Err(Error::validation(
                    "cannot merge runs from different synthesizers or model kinds",
                ));
            }
            images.extend(run.images);
            per_image.extend(run.per_image);
        }
        Self::from_images(images, synthesizer_id, model_kind, per_image)
    }

    /// Write images as PNGs plus a `run.json` provenance manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.images.len());
        for (i, (img, prov)) in self.images.iter().zip(&self.per_image).enumerate() {
            let file = format!("img_{i:04}.png");
            let path = dir.join(&file);
            img.write_png(&path)?;
            let bytes = std::fs::read(&path)?;
            entries.push(RunFileEntry {
                file,
                prompt_id: prov.prompt_id,
                seed: prov.seed,
                index: prov.index,
                checksum: imagery::sha256_hex(&bytes),
            });
        }
        let manifest = RunManifest {
            synthesizer_id: self.synthesizer_id.clone(),
            model_kind: self.model_kind,
            checksum: self.checksum.clone(),
            images: entries,
        };
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Read a saved run back, verifying every file checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("run.json");
        let text = std::fs::read_to_string(&mpath)
            .map_err(|e| Error::ingestion(&mpath, format!("cannot read run manifest: {e}")))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::ingestion(&mpath, format!("malformed run manifest: {e}")))?;
        let mut images = Vec::with_capacity(manifest.images.len());
        let mut per_image = Vec::with_capacity(manifest.images.len());
        for entry in &manifest.images {
            let path = dir.join(&entry.file);
            let bytes = std::fs::read(&path)
                .map_err(|e| Error::ingestion(&path, format!("missing image: {e}")))?;
            let found = imagery::sha256_hex(&bytes);
            if found != entry.checksum {
                return Err(Error::ingestion(
                    &path,
                    format!("checksum mismatch: manifest {} vs file {found}", entry.checksum),
                ));
            }
            let decoded = image::load_from_memory(&bytes)
                .map_err(|e| Error::ingestion(&path, format!("undecodable image: {e}")))?;
            images.push(ImageTensor::<S>::from_dynamic(&decoded));
            per_image.push(ImageProvenance {
                prompt_id: entry.prompt_id,
                seed: entry.seed,
                index: entry.index,
            });
        }
        Self::from_images(images, manifest.synthesizer_id, manifest.model_kind, per_image)
    }
}

/// Synthesize one batch and wrap it with full provenance.
pub fn synthesize_run<S: Scalar>(
    synth: &dyn SubjectSynthesizer<S>,
    model_kind: ModelKind,
    prompt_id: u32,
    n: usize,
    seed: u64,
) -> Result<SynthesisRun<S>> {
    let images = synth.synthesize(prompt_id, n, seed)?;
    let per_image = (0..images.len())
        .map(|index| ImageProvenance { prompt_id, seed, index })
        .collect();
    SynthesisRun::from_images(images, synth.id(), model_kind, per_image)
}

/// Wrap externally synthesized images (e.g. real DreamBooth outputs) so the
/// identical phase-2 and evaluation code can run on them.
pub fn ingest_external_synthesis<S: Scalar>(
    root: &Path,
    manifest: &DatasetManifest,
    fields: ProvenanceFields,
    resolution: usize,
) -> Result<SynthesisRun<S>> {
    let missing = |what: &str| Error::validation(format!("provenance is missing {what}"));
    let synthesizer_id = fields.synthesizer_id.ok_or_else(|| missing("synthesizer_id"))?;
    let model_kind = fields.model_kind.ok_or_else(|| missing("model_kind"))?;
    let prompt_id = fields.prompt_id.ok_or_else(|| missing("prompt_id"))?;
    let seed = fields.seed.ok_or_else(|| missing("seed"))?;
    let mut images = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        images.push(imagery::read_entry_image::<S>(root, entry, resolution)?);
    }
    let per_image = (0..images.len())
        .map(|index| ImageProvenance { prompt_id, seed, index })
        .collect();
    SynthesisRun::from_images(images, synthesizer_id, model_kind, per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::{export_subjects, generate_synthetic_subjects, Task};
    use crate::seeds;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand_distr::Distribution;

    fn noise(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = seeds::rng(seed);
        Array3::from_shape_simple_fn(shape, || {
            rand_distr::StandardNormal.sample(&mut rng)
        })
    }

    #[test]
    fn schedule_construction() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(0) - 1e-4).abs() < 1e-12);
        assert!((s.beta(999) - 0.02).abs() < 1e-12);
        assert!(s.alpha_bar(999) < 1e-3, "late alpha-bar should be tiny");
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![0.0]).is_err());
        assert!(NoiseSchedule::new(vec![1.0]).is_err());
        assert!(NoiseSchedule::new(vec![0.5, -0.1]).is_err());
    }

    #[test]
    fn alpha_bar_matches_product() {
        let s = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let mut prod = 1.0;
        for t in 0..10 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_boundaries() {
        let x = noise((3, 4, 4), 1);
        let n = noise((3, 4, 4), 2);
        assert_eq!(forward_diffuse(&x, 0.0, &n).unwrap(), x);
        assert_eq!(forward_diffuse(&x, 1.0, &n).unwrap(), n);
        let one = Array3::from_elem((1, 1, 1), 1.0f64);
        let zero = Array3::zeros((1, 1, 1));
        let out = forward_diffuse(&one, 0.19, &zero).unwrap();
        assert!((out[[0, 0, 0]] - 0.9).abs() < 1e-12);
        assert!(forward_diffuse(&x, 1.5, &n).is_err());
        assert!(forward_diffuse(&x, 0.5, &noise((3, 2, 2), 3)).is_err());
    }

    #[test]
    fn repeated_diffusion_approaches_standard_normal() {
        let s = NoiseSchedule::default_linear();
        let mut x = Array3::from_elem((3, 32, 32), 0.7f64);
        for t in 0..s.len() {
            let eps = noise(x.dim(), seeds::derive_n(42, "diffusion-noise", t as u64));
            x = forward_diffuse(&x, s.beta(t), &eps).unwrap();
        }
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn denoise_loss_examples() {
        let e = noise((3, 8, 8), 4);
        assert_eq!(denoise_loss(&e, &e).unwrap(), 0.0);
        let zeros = Array3::zeros((3, 8, 8));
        let half = Array3::from_elem((3, 8, 8), 0.5f64);
        assert!((denoise_loss(&zeros, &half).unwrap() - 0.25).abs() < 1e-15);
        assert!(denoise_loss(&zeros, &Array3::zeros((3, 4, 4))).is_err());
    }

    #[test]
    fn denoise_loss_matches_scalar_oracle() {
        let a = noise((3, 8, 8), 5);
        let b = noise((3, 8, 8), 6);
        let fast = denoise_loss(&a, &b).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (&x, &y) in a.iter().zip(b.iter()) {
            sum += (x - y) * (x - y);
            count += 1;
        }
        assert!((fast - sum / count as f64).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn denoise_loss_symmetric_and_definite(sa in 0u64..1000, sb in 1000u64..2000) {
            let a = noise((2, 4, 4), sa);
            let b = noise((2, 4, 4), sb);
            prop_assert_eq!(denoise_loss(&a, &b).unwrap(), denoise_loss(&b, &a).unwrap());
            prop_assert!(denoise_loss(&a, &b).unwrap() > 0.0);
        }
    }

    fn toy_images(n: usize) -> Vec<ImageTensor<f32>> {
        generate_synthetic_subjects(Task::ArtisticStyle, 1, n, 32, 21).unwrap().remove(0).images
    }

    #[test]
    fn run_round_trip_preserves_provenance() {
        let images = toy_images(3);
        let per_image: Vec<ImageProvenance> = (0..3)
            .map(|index| ImageProvenance { prompt_id: 7, seed: 99, index })
            .collect();
        let run = SynthesisRun::from_images(
            images,
            "toy-ddpm-v1-r32".into(),
            ModelKind::Watermarked,
            per_image,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let back = SynthesisRun::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.synthesizer_id, run.synthesizer_id);
        assert_eq!(back.model_kind, run.model_kind);
        assert_eq!(back.per_image, run.per_image);
        assert_eq!(back.checksum, run.checksum);
        // PNG persistence quantizes to 8 bits; that content must round-trip.
        for (a, b) in back.images.iter().zip(&run.images) {
            assert_eq!(a.to_rgb8(), b.to_rgb8());
        }
    }

    #[test]
    fn run_load_detects_tampering() {
        let run = SynthesisRun::from_images(
            toy_images(2),
            "x".into(),
            ModelKind::Clean,
            vec![
                ImageProvenance { prompt_id: 0, seed: 1, index: 0 },
                ImageProvenance { prompt_id: 0, seed: 1, index: 1 },
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let victim = dir.path().join("img_0001.png");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        std::fs::write(&victim, bytes).unwrap();
        match SynthesisRun::<f32>::load(dir.path()) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn provenance_must_cover_every_image() {
        let images = toy_images(2);
        let short = vec![ImageProvenance { prompt_id: 0, seed: 1, index: 0 }];
        assert!(
            SynthesisRun::from_images(images, "x".into(), ModelKind::Clean, short).is_err()
        );
    }

    #[test]
    fn merge_concatenates_and_rejects_mixtures() {
        let mk = |kind, n| {
            SynthesisRun::from_images(
                toy_images(n),
                "x".into(),
                kind,
                (0..n).map(|index| ImageProvenance { prompt_id: 1, seed: 2, index }).collect(),
            )
            .unwrap()
        };
        let merged =
            SynthesisRun::merge(vec![mk(ModelKind::Clean, 2), mk(ModelKind::Clean, 3)]).unwrap();
        assert_eq!(merged.len(), 5);
        assert!(SynthesisRun::merge(vec![
            mk(ModelKind::Clean, 2),
            mk(ModelKind::Watermarked, 2)
        ])
        .is_err());
    }

    #[test]
    fn ingestion_requires_complete_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_synthetic_subjects::<f32>(Task::HumanFace, 1, 2, 32, 3).unwrap();
        let manifest = export_subjects(dir.path(), &subjects).unwrap();
        let full = ProvenanceFields {
            synthesizer_id: Some("external-dreambooth".into()),
            model_kind: Some(ModelKind::Watermarked),
            prompt_id: Some(4),
            seed: Some(11),
        };
        let run =
            ingest_external_synthesis::<f32>(dir.path(), &manifest, full.clone(), 32).unwrap();
        assert_eq!(run.len(), 2);
        assert_eq!(run.model_kind, ModelKind::Watermarked);
        assert_eq!(run.per_image[0].prompt_id, 4);

        let incomplete = ProvenanceFields { model_kind: None, ..full };
        match ingest_external_synthesis::<f32>(dir.path(), &manifest, incomplete, 32) {
            Err(Error::Validation(msg)) => assert!(msg.contains("model_kind")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn ingestion_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_synthetic_subjects::<f32>(Task::HumanFace, 1, 2, 32, 3).unwrap();
        let mut manifest = export_subjects(dir.path(), &subjects).unwrap();
        manifest.entries[1].relative_path = "gone.png".into();
        let fields = ProvenanceFields {
            synthesizer_id: Some("x".into()),
            model_kind: Some(ModelKind::Clean),
            prompt_id: Some(0),
            seed: Some(0),
        };
        match ingest_external_synthesis::<f32>(dir.path(), &manifest, fields, 32) {
            Err(Error::Ingestion { path, .. }) => {
                assert!(path.to_string_lossy().contains("gone.png"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
