//! The experimental grid around a fine-tuned detector.
//!
//! Four knowledge scenarios probe what an attacker must know to evade
//! detection — whether they use the same synthesis model the subject
//! anticipated (`model_known`) and whether they prompt with the contexts the
//! detector was fine-tuned on (`prompts_known`):
//!
//! | scenario | model known | prompts known |
//! |----------|-------------|---------------|
//! | 1        | yes         | yes           |
//! | 2        | yes         | no            |
//! | 3        | no          | yes           |
//! | 4        | no          | no            |
//!
//! Around the scenarios sit partial watermarking (only a fraction of the
//! subject's images carry the pattern), uniqueness (one subject's detector
//! against other subjects' watermarks), synthesis-quality impact (Fréchet
//! distance with and without the watermark), and the forgery/removal
//! countermeasures from [`attacks`].
//!
//! Every test set is synthesized fresh under the evaluation seed domain, so
//! no image can collide with the detector's fine-tuning set; the report
//! records both seed chains and re-checks their disjointness.

mod attacks;

pub use attacks::{forgery_attack, jpeg_roundtrip, removal_attack, RemovalKind};

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{build_finetune_set, detector_accuracy, finetune_detector, FinetuneConfig};
use crate::image::ImageTensor;
use crate::imagery::PromptSet;
use crate::metrics::{embed_features, frechet_distance, FeatureExtractor};
use crate::seeds::{self, sample_seed, SeedDomain};
use crate::synthesis::{
    synthesize_run, DiffusionProxy, ModelKind, NoiseSchedule, SubjectSynthesizer, SynthesisRun,
};
use crate::watermark::{protect_images, DetectorModel, GeneratorModel, Label};
use crate::Scalar;

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// One cell of the attacker-knowledge grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub model_known: bool,
    pub prompts_known: bool,
}

impl ScenarioSpec {
    pub fn new(id: u8) -> Result<Self> {
        let (model_known, prompts_known) = match id {
            1 => (true, true),
            2 => (true, false),
            3 => (false, true),
            4 => (false, false),
            _ => return Err(Error::config(format!("scenario id must be 1..=4, got {id}"))),
        };
        Ok(Self { id, model_known, prompts_known })
    }

    pub fn all() -> [Self; 4] {
        [1, 2, 3, 4].map(|id| Self::new(id).expect("static scenario ids"))
    }
}

/// Everything a scenario evaluation may draw on. The known pair is the
/// synthesizer family the detector was fine-tuned against; the alternate pair
/// is a different family standing in for an unanticipated model. Unknown
/// prompts come from the held-out split.
pub struct ScenarioAssets<'a, S: Scalar> {
    pub known_clean: &'a dyn SubjectSynthesizer<S>,
    pub known_watermarked: &'a dyn SubjectSynthesizer<S>,
    pub alternate_clean: Option<&'a dyn SubjectSynthesizer<S>>,
    pub alternate_watermarked: Option<&'a dyn SubjectSynthesizer<S>>,
    pub known_prompts: &'a PromptSet,
    pub held_out_prompts: Option<&'a PromptSet>,
    /// Fresh images per known prompt (10 at full desk scale).
    pub images_per_known_prompt: usize,
    /// Fresh images per held-out prompt (50 at full desk scale).
    pub images_per_held_out_prompt: usize,
    pub seed: u64,
}

impl<'a, S: Scalar> ScenarioAssets<'a, S> {
    /// Known-model assets with the stock desk set sizes; alternates and
    /// held-out prompts start absent.
    pub fn new(
        known_clean: &'a dyn SubjectSynthesizer<S>,
        known_watermarked: &'a dyn SubjectSynthesizer<S>,
        known_prompts: &'a PromptSet,
        seed: u64,
    ) -> Self {
        Self {
            known_clean,
            known_watermarked,
            alternate_clean: None,
            alternate_watermarked: None,
            known_prompts,
            held_out_prompts: None,
            images_per_known_prompt: 10,
            images_per_held_out_prompt: 50,
            seed,
        }
    }
}

/// Result of one scenario evaluation, with the synthesized test sets kept for
/// reuse and provenance.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome<S: Scalar> {
    pub spec: ScenarioSpec,
    pub accuracy: f64,
    pub n_per_side: usize,
    pub clean: SynthesisRun<S>,
    pub watermarked: SynthesisRun<S>,
}

/// Serializable summary of a [`ScenarioOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCell {
    pub spec: ScenarioSpec,
    pub accuracy: f64,
    pub n_per_side: usize,
    pub clean_checksum: String,
    pub watermarked_checksum: String,
}

impl<S: Scalar> ScenarioOutcome<S> {
    pub fn cell(&self) -> ScenarioCell {
        ScenarioCell {
            spec: self.spec,
            accuracy: self.accuracy,
            n_per_side: self.n_per_side,
            clean_checksum: self.clean.checksum.clone(),
            watermarked_checksum: self.watermarked.checksum.clone(),
        }
    }
}

fn require_fine_tuned<S: Scalar>(detector: &DetectorModel<S>) -> Result<()> {
    if detector.fine_tuned_for.is_none() {
        return Err(Error::validation(
            "evaluation needs a detector fine-tuned for a subject",
        ));
    }
    Ok(())
}

fn labeled<S: Scalar>(
    images: &[ImageTensor<S>],
    label: Label,
    out: &mut Vec<(Array3<S>, Label)>,
) {
    for img in images {
        out.push((img.to_chw(), label));
    }
}

/// Classify a fresh, balanced clean/watermarked test set synthesized under
/// the scenario's knowledge assumptions; returns the fraction classified
/// correctly along with both runs.
pub fn eval_scenario<S: Scalar>(
    detector: &DetectorModel<S>,
    spec: ScenarioSpec,
    assets: &ScenarioAssets<'_, S>,
) -> Result<ScenarioOutcome<S>> {
    require_fine_tuned(detector)?;
    let (prompts, per_prompt) = if spec.prompts_known {
        (assets.known_prompts, assets.images_per_known_prompt)
    } else {
        let held = assets.held_out_prompts.ok_or_else(|| {
            Error::config(format!("scenario {} needs the held-out prompt split", spec.id))
        })?;
        (held, assets.images_per_held_out_prompt)
    };
    if prompts.is_empty() {
        return Err(Error::config(format!("scenario {} has an empty prompt set", spec.id)));
    }
    if per_prompt == 0 {
        return Err(Error::config("scenario needs at least one image per prompt"));
    }
    let (synth_clean, synth_wm) = if spec.model_known {
        (assets.known_clean, assets.known_watermarked)
    } else {
        match (assets.alternate_clean, assets.alternate_watermarked) {
            (Some(c), Some(w)) => (c, w),
            _ => {
                return Err(Error::config(format!(
                    "scenario {} needs the alternate synthesizer family",
                    spec.id
                )))
            }
        }
    };

    let mut clean_runs = Vec::new();
    let mut wm_runs = Vec::new();
    for id in prompts.ids() {
        let seed_clean = sample_seed(assets.seed, SeedDomain::Evaluate, id, 0);
        let seed_wm = sample_seed(assets.seed, SeedDomain::Evaluate, id, 1);
        clean_runs.push(synthesize_run(synth_clean, ModelKind::Clean, id, per_prompt, seed_clean)?);
        wm_runs.push(synthesize_run(synth_wm, ModelKind::Watermarked, id, per_prompt, seed_wm)?);
    }
    let clean = SynthesisRun::merge(clean_runs)?;
    let watermarked = SynthesisRun::merge(wm_runs)?;

    let mut samples = Vec::with_capacity(clean.images.len() + watermarked.images.len());
    labeled(&clean.images, Label::NonWatermarked, &mut samples);
    labeled(&watermarked.images, Label::Watermarked, &mut samples);
    let accuracy = detector_accuracy(detector, &samples)?;
    Ok(ScenarioOutcome { spec, accuracy, n_per_side: clean.images.len(), clean, watermarked })
}

// ---------------------------------------------------------------------------
// Uniqueness
// ---------------------------------------------------------------------------

/// Balanced accuracy of one subject's detector on its own watermarked
/// synthesis versus other subjects'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessOutcome {
    pub accuracy: f64,
    pub n_per_side: usize,
    pub own_checksum: String,
    pub other_checksums: Vec<String>,
}

/// Own watermarked images should read as watermarked; images watermarked for
/// *other* subjects should not. The caller guarantees `own` really belongs to
/// the detector's subject and `others` to different ones; both sides must be
/// watermarked-model synthesis.
pub fn eval_uniqueness<S: Scalar>(
    detector: &DetectorModel<S>,
    own: &SynthesisRun<S>,
    others: &[SynthesisRun<S>],
    n_per_side: usize,
) -> Result<UniquenessOutcome> {
    require_fine_tuned(detector)?;
    if n_per_side == 0 {
        return Err(Error::config("uniqueness needs at least one image per side"));
    }
    if own.model_kind != ModelKind::Watermarked
        || others.iter().any(|r| r.model_kind != ModelKind::Watermarked)
    {
        return Err(Error::validation(
            "uniqueness compares watermarked-model synthesis on both sides",
        ));
    }
    if own.images.len() < n_per_side {
        return Err(Error::InsufficientData(format!(
            "own side has {} images, need {n_per_side}",
            own.images.len()
        )));
    }
    let available: usize = others.iter().map(|r| r.images.len()).sum();
    if available < n_per_side {
        return Err(Error::InsufficientData(format!(
            "other subjects provide {available} images, need {n_per_side}"
        )));
    }

    // Round-robin over the other subjects so each contributes evenly.
    let mut other_images = Vec::with_capacity(n_per_side);
    let mut round = 0;
    while other_images.len() < n_per_side {
        for run in others {
            if other_images.len() == n_per_side {
                break;
            }
            if let Some(img) = run.images.get(round) {
                other_images.push(img);
            }
        }
        round += 1;
    }

    let mut samples = Vec::with_capacity(2 * n_per_side);
    for img in own.images.iter().take(n_per_side) {
        samples.push((img.to_chw(), Label::Watermarked));
    }
    for img in other_images {
        samples.push((img.to_chw(), Label::NonWatermarked));
    }
    let accuracy = detector_accuracy(detector, &samples)?;
    Ok(UniquenessOutcome {
        accuracy,
        n_per_side,
        own_checksum: own.checksum.clone(),
        other_checksums: others.iter().map(|r| r.checksum.clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Synthesis quality
// ---------------------------------------------------------------------------

/// Fréchet distances of clean-input and watermarked-input synthesis against
/// their respective input sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityOutcome {
    pub fid_clean: f64,
    pub fid_watermarked: f64,
    /// |fid_watermarked − fid_clean| / fid_clean.
    pub relative_change: f64,
    pub extractor_version: String,
    /// Sizes of (inputs_clean, inputs_watermarked, outputs_clean,
    /// outputs_watermarked).
    pub set_sizes: [usize; 4],
}

pub fn eval_quality<S: Scalar>(
    inputs_clean: &[ImageTensor<S>],
    inputs_watermarked: &[ImageTensor<S>],
    outputs_clean: &[ImageTensor<S>],
    outputs_watermarked: &[ImageTensor<S>],
    extractor: &FeatureExtractor<S>,
) -> Result<QualityOutcome> {
    let fid = |inputs: &[ImageTensor<S>], outputs: &[ImageTensor<S>]| -> Result<f64> {
        let d = frechet_distance(
            &embed_features(inputs, extractor)?,
            &embed_features(outputs, extractor)?,
        )?;
        Ok(d.to_f64().unwrap_or(f64::NAN))
    };
    let fid_clean = fid(inputs_clean, outputs_clean)?;
    let fid_watermarked = fid(inputs_watermarked, outputs_watermarked)?;
    let diff = (fid_watermarked - fid_clean).abs();
    let relative_change = if diff == 0.0 { 0.0 } else { diff / fid_clean };
    Ok(QualityOutcome {
        fid_clean,
        fid_watermarked,
        relative_change,
        extractor_version: extractor.version().to_string(),
        set_sizes: [
            inputs_clean.len(),
            inputs_watermarked.len(),
            outputs_clean.len(),
            outputs_watermarked.len(),
        ],
    })
}

// ---------------------------------------------------------------------------
// Partial watermarking
// ---------------------------------------------------------------------------

/// Inputs for the partial-watermarking sweep. The fine-tune config's
/// `subject_id` tags the retrained detectors; `protect_seed` fixes both the
/// per-image watermark latents and which images are selected at each
/// fraction (selections nest: the images watermarked at 0.25 are a subset of
/// those at 0.5).
pub struct PartialAssets<'a, S: Scalar> {
    pub generator: &'a GeneratorModel<S>,
    pub subject_images: &'a [ImageTensor<S>],
    pub base_detector: &'a DetectorModel<S>,
    pub known_prompts: &'a PromptSet,
    pub finetune: FinetuneConfig,
    pub schedule: NoiseSchedule,
    pub synth_steps: usize,
    pub sampling_steps: usize,
    pub synth_seed: u64,
    pub protect_seed: u64,
    pub images_per_known_prompt: usize,
    pub eval_seed: u64,
}

/// One point of the partial-watermarking curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialOutcome {
    pub fraction: f64,
    pub n_watermarked: usize,
    pub accuracy: f64,
    pub clean_checksum: String,
    pub watermarked_checksum: String,
}

/// For each fraction: watermark that share of the subject's images, retrain
/// the watermarked-side synthesizer on the mix, re-run detector fine-tuning,
/// and score scenario 1. Fraction 1.0 is exactly the standard pipeline;
/// fraction 0 trains both synthesizers on identical data, so any accuracy
/// above chance would expose a leak.
pub fn eval_partial_watermarking<S: Scalar>(
    fractions: &[f64],
    assets: &PartialAssets<'_, S>,
) -> Result<Vec<PartialOutcome>> {
    for &f in fractions {
        if !(f.is_finite() && (0.0..=1.0).contains(&f)) {
            return Err(Error::config(format!(
                "watermarked fraction must lie in [0,1], got {f}"
            )));
        }
    }
    let n = assets.subject_images.len();
    if n == 0 {
        return Err(Error::config("partial watermarking needs subject images"));
    }
    let resolution = assets.subject_images[0].resolution();
    let channels = assets.subject_images[0].channels();
    if assets.generator.config.resolution != resolution
        || assets.generator.config.channels != channels
    {
        return Err(Error::config(format!(
            "generator is {}x{} channels {}, subject images are {resolution} channels {channels}",
            assets.generator.config.resolution,
            assets.generator.config.resolution,
            assets.generator.config.channels,
        )));
    }

    // Watermarks are keyed by image index, not by fraction, so the same image
    // always carries the same pattern wherever it is selected.
    let watermarked = protect_images(assets.generator, assets.subject_images, assets.protect_seed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(assets.protect_seed, "partial-select")));

    let make_synth = |images: &[ImageTensor<S>]| -> Result<DiffusionProxy<S>> {
        let mut p = DiffusionProxy::new(resolution, channels, assets.schedule.clone())?
            .with_sampling_steps(assets.sampling_steps);
        p.train(images, assets.synth_steps, assets.synth_seed)?;
        Ok(p)
    };
    let clean_synth = make_synth(assets.subject_images)?;
    let spec1 = ScenarioSpec::new(1).expect("static scenario id");

    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let k = (fraction * n as f64).round() as usize;
        let mut mixed = assets.subject_images.to_vec();
        for &idx in order.iter().take(k) {
            mixed[idx] = watermarked[idx].clone();
        }
        let wm_synth = make_synth(&mixed)?;
        let (s, s_w) =
            build_finetune_set(&clean_synth, &wm_synth, assets.known_prompts, &assets.finetune)?;
        let tuned = finetune_detector(assets.base_detector, &s, &s_w, &assets.finetune)?;
        let mut scenario_assets =
            ScenarioAssets::new(&clean_synth, &wm_synth, assets.known_prompts, assets.eval_seed);
        scenario_assets.images_per_known_prompt = assets.images_per_known_prompt;
        let scored = eval_scenario(&tuned, spec1, &scenario_assets)?;
        out.push(PartialOutcome {
            fraction,
            n_watermarked: k,
            accuracy: scored.accuracy,
            clean_checksum: scored.clean.checksum,
            watermarked_checksum: scored.watermarked.checksum,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Countermeasure evaluations
// ---------------------------------------------------------------------------

/// Where a removal transform is applied: to the watermarked subject images
/// before the attacker trains on them, or to the synthesized outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSide {
    Input,
    Output,
}

impl std::fmt::Display for AttackSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackSide::Input => "input",
            AttackSide::Output => "output",
        })
    }
}

/// Shared inputs for the countermeasure probes.
pub struct CountermeasureAssets<'a, S: Scalar> {
    pub clean_synth: &'a dyn SubjectSynthesizer<S>,
    pub watermarked_synth: &'a dyn SubjectSynthesizer<S>,
    /// The subject's watermarked originals; input-side removal re-trains a
    /// synthesizer on transformed copies of these.
    pub watermarked_subject_images: &'a [ImageTensor<S>],
    pub prompts: &'a PromptSet,
    pub images_per_prompt: usize,
    pub schedule: NoiseSchedule,
    pub synth_steps: usize,
    pub sampling_steps: usize,
    pub synth_seed: u64,
    pub eval_seed: u64,
    pub attack_seed: u64,
}

/// One countermeasure measurement. For forgery, `accuracy` is the fraction of
/// forged clean images still (correctly) read as non-watermarked; for
/// removal, the balanced detection accuracy with the watermarked side
/// attacked. Transformed images are traceable through the listed source runs
/// plus the recorded attack parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountermeasureOutcome {
    pub attack: String,
    pub kind: Option<RemovalKind>,
    pub side: Option<AttackSide>,
    pub param: f64,
    pub accuracy: f64,
    pub n_images: usize,
    pub source_checksums: Vec<String>,
}

fn merged_run<S: Scalar>(
    synth: &dyn SubjectSynthesizer<S>,
    kind: ModelKind,
    prompts: &PromptSet,
    per_prompt: usize,
    root: u64,
    index: u64,
) -> Result<SynthesisRun<S>> {
    if prompts.is_empty() {
        return Err(Error::config("countermeasure evaluation has an empty prompt set"));
    }
    if per_prompt == 0 {
        return Err(Error::config("countermeasure evaluation needs images per prompt"));
    }
    let runs = prompts
        .ids()
        .into_iter()
        .map(|id| synthesize_run(synth, kind, id, per_prompt, sample_seed(root, SeedDomain::Evaluate, id, index)))
        .collect::<Result<Vec<_>>>()?;
    SynthesisRun::merge(runs)
}

/// Salt fresh clean synthesis with forged watermark noise and report how
/// often the detector still rejects it.
pub fn eval_forgery<S: Scalar>(
    detector: &DetectorModel<S>,
    sigma: f64,
    assets: &CountermeasureAssets<'_, S>,
) -> Result<CountermeasureOutcome> {
    require_fine_tuned(detector)?;
    let root = seeds::derive(assets.eval_seed, "forgery");
    let clean = merged_run(
        assets.clean_synth,
        ModelKind::Clean,
        assets.prompts,
        assets.images_per_prompt,
        root,
        0,
    )?;
    let forged = forgery_attack(&clean.images, sigma, assets.attack_seed)?;
    let mut samples = Vec::with_capacity(forged.len());
    labeled(&forged, Label::NonWatermarked, &mut samples);
    let accuracy = detector_accuracy(detector, &samples)?;
    Ok(CountermeasureOutcome {
        attack: "forgery".into(),
        kind: None,
        side: None,
        param: sigma,
        accuracy,
        n_images: forged.len(),
        source_checksums: vec![clean.checksum],
    })
}

/// Balanced detection accuracy with a removal transform applied to the
/// watermarked side, either to the subject's images before synthesis
/// training (input) or to the synthesized images (output).
pub fn eval_removal<S: Scalar>(
    detector: &DetectorModel<S>,
    kind: RemovalKind,
    param: f64,
    side: AttackSide,
    assets: &CountermeasureAssets<'_, S>,
) -> Result<CountermeasureOutcome> {
    require_fine_tuned(detector)?;
    let root = seeds::derive(assets.eval_seed, "removal");
    let clean = merged_run(
        assets.clean_synth,
        ModelKind::Clean,
        assets.prompts,
        assets.images_per_prompt,
        root,
        0,
    )?;
    let (wm_images, source_checksums) = match side {
        AttackSide::Output => {
            let wm = merged_run(
                assets.watermarked_synth,
                ModelKind::Watermarked,
                assets.prompts,
                assets.images_per_prompt,
                root,
                1,
            )?;
            let transformed = removal_attack(&wm.images, kind, param, assets.attack_seed)?;
            (transformed, vec![clean.checksum.clone(), wm.checksum])
        }
        AttackSide::Input => {
            if assets.watermarked_subject_images.is_empty() {
                return Err(Error::config(
                    "input-side removal needs the watermarked subject images",
                ));
            }
            let transformed =
                removal_attack(assets.watermarked_subject_images, kind, param, assets.attack_seed)?;
            let resolution = transformed[0].resolution();
            let channels = transformed[0].channels();
            let mut retrained =
                DiffusionProxy::new(resolution, channels, assets.schedule.clone())?
                    .with_sampling_steps(assets.sampling_steps);
            retrained.train(&transformed, assets.synth_steps, assets.synth_seed)?;
            let wm = merged_run(
                &retrained,
                ModelKind::Watermarked,
                assets.prompts,
                assets.images_per_prompt,
                root,
                1,
            )?;
            (wm.images.clone(), vec![clean.checksum.clone(), wm.checksum])
        }
    };

    let mut samples = Vec::with_capacity(clean.images.len() + wm_images.len());
    labeled(&clean.images, Label::NonWatermarked, &mut samples);
    labeled(&wm_images, Label::Watermarked, &mut samples);
    let accuracy = detector_accuracy(detector, &samples)?;
    Ok(CountermeasureOutcome {
        attack: "removal".into(),
        kind: Some(kind),
        side: Some(side),
        param,
        accuracy,
        n_images: samples.len(),
        source_checksums,
    })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Sample seeds the fine-tuning stage draws for the given prompts (two
/// synthesis calls per prompt: clean then watermarked).
pub fn finetune_sample_seeds(seed: u64, prompt_ids: &[u32]) -> Vec<u64> {
    prompt_ids
        .iter()
        .flat_map(|&p| {
            [
                sample_seed(seed, SeedDomain::Finetune, p, 0),
                sample_seed(seed, SeedDomain::Finetune, p, 1),
            ]
        })
        .collect()
}

/// Sample seeds the evaluation stage draws for the given prompts.
pub fn evaluate_sample_seeds(seed: u64, prompt_ids: &[u32]) -> Vec<u64> {
    prompt_ids
        .iter()
        .flat_map(|&p| {
            [
                sample_seed(seed, SeedDomain::Evaluate, p, 0),
                sample_seed(seed, SeedDomain::Evaluate, p, 1),
            ]
        })
        .collect()
}

/// Full evaluation record for one subject. Every accuracy cell names the
/// synthesis-run checksums it was computed from, and the two recorded seed
/// chains must not intersect — [`EvalReport::validate`] re-checks both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject_id: String,
    pub scenarios: Vec<ScenarioCell>,
    pub uniqueness: Option<UniquenessOutcome>,
    pub quality: Option<QualityOutcome>,
    pub partial_watermarking: Vec<PartialOutcome>,
    pub countermeasures: Vec<CountermeasureOutcome>,
    pub extractor_version: String,
    pub finetune_seed: u64,
    pub evaluate_seed: u64,
    pub finetune_sample_seeds: Vec<u64>,
    pub evaluate_sample_seeds: Vec<u64>,
    /// Free-form snapshot of the configuration the run used.
    pub config: serde_json::Value,
}

fn check_accuracy(what: &str, a: f64) -> Result<()> {
    if !(a.is_finite() && (0.0..=1.0).contains(&a)) {
        return Err(Error::validation(format!("{what} accuracy {a} outside [0,1]")));
    }
    Ok(())
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.is_empty() {
            return Err(Error::validation("report needs a subject id"));
        }
        for cell in &self.scenarios {
            check_accuracy(&format!("scenario {}", cell.spec.id), cell.accuracy)?;
            if cell.clean_checksum.is_empty() || cell.watermarked_checksum.is_empty() {
                return Err(Error::validation(format!(
                    "scenario {} cell is not traceable to synthesis runs",
                    cell.spec.id
                )));
            }
        }
        if let Some(u) = &self.uniqueness {
            check_accuracy("uniqueness", u.accuracy)?;
            if u.own_checksum.is_empty() || u.other_checksums.iter().any(String::is_empty) {
                return Err(Error::validation("uniqueness cell is not traceable"));
            }
        }
        if let Some(q) = &self.quality {
            for (name, v) in [
                ("fid_clean", q.fid_clean),
                ("fid_watermarked", q.fid_watermarked),
                ("relative_change", q.relative_change),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::validation(format!("quality {name} {v} is not usable")));
                }
            }
        }
        for p in &self.partial_watermarking {
            check_accuracy(&format!("partial fraction {}", p.fraction), p.accuracy)?;
            if p.clean_checksum.is_empty() || p.watermarked_checksum.is_empty() {
                return Err(Error::validation("partial-watermarking cell is not traceable"));
            }
        }
        for c in &self.countermeasures {
            check_accuracy(&c.attack, c.accuracy)?;
            if c.source_checksums.is_empty() || c.source_checksums.iter().any(String::is_empty) {
                return Err(Error::validation(format!("{} cell is not traceable", c.attack)));
            }
        }
        let eval: std::collections::BTreeSet<&u64> = self.evaluate_sample_seeds.iter().collect();
        if let Some(hit) = self.finetune_sample_seeds.iter().find(|s| eval.contains(s)) {
            return Err(Error::validation(format!(
                "sample seed {hit} appears in both the fine-tune and evaluation chains"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// CSV table of the scenario grid.
    pub fn scenario_csv(&self) -> String {
        let mut out = String::from("scenario,model_known,prompts_known,accuracy,n_per_side\n");
        for c in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.spec.id, c.spec.model_known, c.spec.prompts_known, c.accuracy, c.n_per_side
            ));
        }
        out
    }

    /// CSV table of the partial-watermarking curve.
    pub fn partial_csv(&self) -> String {
        let mut out = String::from("fraction,n_watermarked,accuracy\n");
        for p in &self.partial_watermarking {
            out.push_str(&format!("{},{},{}\n", p.fraction, p.n_watermarked, p.accuracy));
        }
        out
    }

    /// CSV table of the countermeasure grid.
    pub fn countermeasure_csv(&self) -> String {
        let mut out = String::from("attack,kind,side,param,accuracy,n_images\n");
        for c in &self.countermeasures {
            let kind = c.kind.map(|k| k.to_string()).unwrap_or_default();
            let side = c.side.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{kind},{side},{},{},{}\n",
                c.attack, c.param, c.accuracy, c.n_images
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::{generate_synthetic_subjects, Task};
    use crate::metrics::default_extractor;
    use crate::nn::ParamSet;
    use crate::watermark::{DetectorConfig, GeneratorConfig};
    use proptest::prelude::*;

    /// Deterministic stand-in synthesizer: near-flat images around a base
    /// brightness, jittered per (prompt, index) off the sampling seed.
    struct FabSynth {
        base: f64,
        tag: String,
        resolution: usize,
    }

    impl SubjectSynthesizer<f32> for FabSynth {
        fn train(&mut self, _images: &[ImageTensor<f32>], _steps: usize, _seed: u64) -> Result<()> {
            Ok(())
        }

        fn synthesize(&self, prompt_id: u32, n: usize, seed: u64) -> Result<Vec<ImageTensor<f32>>> {
            let root = seeds::derive_n(seeds::derive(seed, "fab"), "prompt", u64::from(prompt_id));
            (0..n)
                .map(|i| {
                    let mut rng = seeds::rng(seeds::derive_n(root, "image", i as u64));
                    let jitter: f64 = rng.random_range(-0.05..0.05);
                    ImageTensor::filled(self.resolution, 3, (self.base + jitter) as f32)
                })
                .collect()
        }

        fn id(&self) -> String {
            self.tag.clone()
        }

        fn resolution(&self) -> usize {
            self.resolution
        }
    }

    fn fab(base: f64, tag: &str) -> FabSynth {
        FabSynth { base, tag: tag.into(), resolution: 16 }
    }

    fn two_prompts() -> PromptSet {
        PromptSet::new(vec![(0, "studio portrait".into()), (1, "street scene".into())]).unwrap()
    }

    /// Detector fine-tuned to separate dark clean synthesis from bright
    /// watermarked synthesis, plus the synthesizer pair it was tuned on.
    fn tuned_fixture() -> (DetectorModel<f32>, FabSynth, FabSynth, PromptSet, FinetuneConfig) {
        let clean = fab(0.35, "fab-clean");
        let wm = fab(0.65, "fab-wm");
        let prompts = two_prompts();
        let cfg = FinetuneConfig {
            images_per_prompt: 8,
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 4,
            seed: 5,
            subject_id: "fab-subject".into(),
        };
        let (s, s_w) = build_finetune_set(&clean, &wm, &prompts, &cfg).unwrap();
        let base =
            DetectorModel::new(DetectorConfig { resolution: 16, channels: 3 }, 9).unwrap();
        let tuned = finetune_detector(&base, &s, &s_w, &cfg).unwrap();
        (tuned, clean, wm, prompts, cfg)
    }

    #[test]
    fn scenario_spec_grid() {
        let expect = [(1, true, true), (2, true, false), (3, false, true), (4, false, false)];
        for (id, model_known, prompts_known) in expect {
            let s = ScenarioSpec::new(id).unwrap();
            assert_eq!((s.model_known, s.prompts_known), (model_known, prompts_known));
        }
        assert!(ScenarioSpec::new(0).is_err());
        assert!(ScenarioSpec::new(5).is_err());
        assert_eq!(ScenarioSpec::all().map(|s| s.id), [1, 2, 3, 4]);
    }

    #[test]
    fn scenario_separable_accuracy_and_constant_detector_chance() {
        let (tuned, clean, wm, prompts, _) = tuned_fixture();
        let mut assets = ScenarioAssets::new(&clean, &wm, &prompts, 77);
        assets.images_per_known_prompt = 6;
        let spec1 = ScenarioSpec::new(1).unwrap();
        let out = eval_scenario(&tuned, spec1, &assets).unwrap();
        assert!(out.accuracy >= 0.9, "separable sides should score high, got {}", out.accuracy);
        assert_eq!(out.n_per_side, 12);
        assert_eq!(out.clean.images.len(), out.watermarked.images.len());
        assert_eq!(out.clean.model_kind, ModelKind::Clean);
        assert_eq!(out.watermarked.model_kind, ModelKind::Watermarked);

        // A constant-output detector lands exactly on chance for balanced sets.
        let mut flat =
            DetectorModel::<f32>::new(DetectorConfig { resolution: 16, channels: 3 }, 1).unwrap();
        for s in flat.param_slices_mut() {
            s.fill(0.0);
        }
        flat.fine_tuned_for = Some("fab-subject".into());
        let out = eval_scenario(&flat, spec1, &assets).unwrap();
        assert_eq!(out.accuracy, 0.5);
    }

    #[test]
    fn scenario_asset_requirements() {
        let (tuned, clean, wm, prompts, _) = tuned_fixture();
        let assets = ScenarioAssets::new(&clean, &wm, &prompts, 77);

        let base =
            DetectorModel::<f32>::new(DetectorConfig { resolution: 16, channels: 3 }, 9).unwrap();
        let err = eval_scenario(&base, ScenarioSpec::new(1).unwrap(), &assets).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");

        for id in [2u8, 4] {
            let err = eval_scenario(&tuned, ScenarioSpec::new(id).unwrap(), &assets).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "scenario {id}: {err}");
        }
        for id in [3u8, 4] {
            let mut with_prompts = ScenarioAssets::new(&clean, &wm, &prompts, 77);
            with_prompts.held_out_prompts = Some(&prompts);
            let err =
                eval_scenario(&tuned, ScenarioSpec::new(id).unwrap(), &with_prompts).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "scenario {id}: {err}");
        }
    }

    #[test]
    fn scenario_determinism_and_unknown_asset_routing() {
        let (tuned, clean, wm, prompts, _) = tuned_fixture();
        let held = PromptSet::new(vec![(7, "held-out".into())]).unwrap();
        let alt_clean = fab(0.30, "alt-clean");
        let alt_wm = fab(0.70, "alt-wm");
        let mut assets = ScenarioAssets::new(&clean, &wm, &prompts, 123);
        assets.held_out_prompts = Some(&held);
        assets.alternate_clean = Some(&alt_clean);
        assets.alternate_watermarked = Some(&alt_wm);
        assets.images_per_known_prompt = 4;
        assets.images_per_held_out_prompt = 5;

        let s1a = eval_scenario(&tuned, ScenarioSpec::new(1).unwrap(), &assets).unwrap();
        let s1b = eval_scenario(&tuned, ScenarioSpec::new(1).unwrap(), &assets).unwrap();
        assert_eq!(s1a.accuracy, s1b.accuracy);
        assert_eq!(s1a.clean.checksum, s1b.clean.checksum);
        assert_eq!(s1a.watermarked.checksum, s1b.watermarked.checksum);

        let s2 = eval_scenario(&tuned, ScenarioSpec::new(2).unwrap(), &assets).unwrap();
        assert_eq!(s2.n_per_side, 5);
        assert!(s2.clean.per_image.iter().all(|p| p.prompt_id == 7));
        assert_eq!(s2.clean.synthesizer_id, "fab-clean");

        let s3 = eval_scenario(&tuned, ScenarioSpec::new(3).unwrap(), &assets).unwrap();
        assert_eq!(s3.clean.synthesizer_id, "alt-clean");
        assert_eq!(s3.watermarked.synthesizer_id, "alt-wm");
        assert_eq!(s3.n_per_side, 8);
        // Same knowledge split, different families: the test sets differ.
        assert_ne!(s3.clean.checksum, s1a.clean.checksum);
    }

    #[test]
    fn uniqueness_sides_and_errors() {
        let (tuned, _, wm, _, _) = tuned_fixture();
        let own = synthesize_run(&wm, ModelKind::Watermarked, 0, 10, 42).unwrap();
        let other_a = synthesize_run(&fab(0.30, "other-a"), ModelKind::Watermarked, 0, 4, 43).unwrap();
        let other_b = synthesize_run(&fab(0.25, "other-b"), ModelKind::Watermarked, 0, 4, 44).unwrap();
        let others = vec![other_a, other_b];

        let out = eval_uniqueness(&tuned, &own, &others, 8).unwrap();
        assert!(out.accuracy >= 0.9, "got {}", out.accuracy);
        assert_eq!(out.n_per_side, 8);
        assert_eq!(out.other_checksums.len(), 2);

        assert!(matches!(
            eval_uniqueness(&tuned, &own, &others, 11).unwrap_err(),
            Error::InsufficientData(_)
        ));
        assert!(matches!(
            eval_uniqueness(&tuned, &own, &others, 9).unwrap_err(),
            Error::InsufficientData(_)
        ));
        assert!(eval_uniqueness(&tuned, &own, &others, 0).is_err());

        let clean_run = synthesize_run(&wm, ModelKind::Clean, 0, 10, 42).unwrap();
        assert!(matches!(
            eval_uniqueness(&tuned, &clean_run, &others, 4).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn quality_identity_swap_and_small_sets() {
        let subjects = generate_synthetic_subjects::<f64>(Task::ArtisticStyle, 2, 4, 32, 5).unwrap();
        let a = &subjects[0].images;
        let b = &subjects[1].images;
        let fx = default_extractor::<f64>(32, 3).unwrap();

        let same = eval_quality(a, a, a, a, &fx).unwrap();
        assert!(same.fid_clean.abs() < 1e-9, "identical sets gave {}", same.fid_clean);
        assert!(same.fid_watermarked.abs() < 1e-9);
        assert_eq!(same.relative_change, 0.0);
        assert_eq!(same.extractor_version, fx.version());
        assert_eq!(same.set_sizes, [4, 4, 4, 4]);

        // With a shared input reference, swapping the output sets swaps the
        // two FID values exactly.
        let q1 = eval_quality(a, a, a, b, &fx).unwrap();
        let q2 = eval_quality(a, a, b, a, &fx).unwrap();
        assert_eq!(q1.fid_clean, q2.fid_watermarked);
        assert_eq!(q1.fid_watermarked, q2.fid_clean);
        assert!(q1.fid_watermarked > 0.0);

        assert!(matches!(
            eval_quality(&a[..1], a, a, a, &fx).unwrap_err(),
            Error::InsufficientData(_)
        ));
    }

    fn tiny_subject_images(seed: u64) -> Vec<ImageTensor<f32>> {
        generate_synthetic_subjects::<f32>(Task::ArtisticStyle, 1, 6, 32, seed)
            .unwrap()
            .remove(0)
            .images
            .into_iter()
            .map(|im| im.resize(16).unwrap())
            .collect()
    }

    #[test]
    fn partial_watermarking_tiny_pipeline() {
        let generator = GeneratorModel::<f32>::new(
            GeneratorConfig { latent_dim: 8, resolution: 16, channels: 3 },
            21,
        )
        .unwrap();
        let base_detector =
            DetectorModel::<f32>::new(DetectorConfig { resolution: 16, channels: 3 }, 22).unwrap();
        let images = tiny_subject_images(31);
        let prompts = PromptSet::new(vec![(0, "lone prompt".into())]).unwrap();
        let assets = PartialAssets {
            generator: &generator,
            subject_images: &images,
            base_detector: &base_detector,
            known_prompts: &prompts,
            finetune: FinetuneConfig {
                images_per_prompt: 6,
                epochs: 2,
                learning_rate: 1e-3,
                batch_size: 4,
                seed: 3,
                subject_id: "tiny".into(),
            },
            schedule: NoiseSchedule::linear(40, 1e-4, 0.02).unwrap(),
            synth_steps: 30,
            sampling_steps: 4,
            synth_seed: 8,
            protect_seed: 9,
            images_per_known_prompt: 4,
            eval_seed: 10,
        };

        assert!(matches!(
            eval_partial_watermarking(&[0.5, 1.5], &assets).unwrap_err(),
            Error::Config(_)
        ));

        let curve = eval_partial_watermarking(&[0.0, 0.5, 1.0], &assets).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve.iter().map(|p| p.n_watermarked).collect::<Vec<_>>(), vec![0, 3, 6]);
        for p in &curve {
            assert!((0.0..=1.0).contains(&p.accuracy), "fraction {}: {}", p.fraction, p.accuracy);
            assert!(!p.clean_checksum.is_empty() && !p.watermarked_checksum.is_empty());
        }
        let again = eval_partial_watermarking(&[0.5], &assets).unwrap();
        assert_eq!(again[0].accuracy, curve[1].accuracy);
        assert_eq!(again[0].watermarked_checksum, curve[1].watermarked_checksum);
    }

    #[test]
    fn countermeasures_composed_on_separable_fixture() {
        let (tuned, clean, wm, prompts, _) = tuned_fixture();
        let wm_subject = tiny_subject_images(55);
        let assets = CountermeasureAssets {
            clean_synth: &clean,
            watermarked_synth: &wm,
            watermarked_subject_images: &wm_subject,
            prompts: &prompts,
            images_per_prompt: 5,
            schedule: NoiseSchedule::linear(40, 1e-4, 0.02).unwrap(),
            synth_steps: 30,
            sampling_steps: 4,
            synth_seed: 8,
            eval_seed: 60,
            attack_seed: 61,
        };

        // Mild forged noise on dark clean images: still read as clean.
        let forged = eval_forgery(&tuned, 0.02, &assets).unwrap();
        assert_eq!(forged.attack, "forgery");
        assert!(forged.accuracy >= 0.9, "got {}", forged.accuracy);
        assert_eq!(forged.n_images, 10);
        assert_eq!(forged.source_checksums.len(), 1);

        // A no-op removal leaves the separable sides intact.
        let noop =
            eval_removal(&tuned, RemovalKind::Gaussian, 0.0, AttackSide::Output, &assets).unwrap();
        assert!(noop.accuracy >= 0.9, "got {}", noop.accuracy);
        assert_eq!(noop.n_images, 20);
        assert_eq!(noop.source_checksums.len(), 2);
        assert_eq!(noop.side, Some(AttackSide::Output));

        let input_side =
            eval_removal(&tuned, RemovalKind::Jpeg, 20.0, AttackSide::Input, &assets).unwrap();
        assert!((0.0..=1.0).contains(&input_side.accuracy));
        assert_eq!(input_side.kind, Some(RemovalKind::Jpeg));
        assert_eq!(input_side.source_checksums.len(), 2);

        let base =
            DetectorModel::<f32>::new(DetectorConfig { resolution: 16, channels: 3 }, 9).unwrap();
        assert!(eval_forgery(&base, 0.02, &assets).is_err());
    }

    fn stub_report() -> EvalReport {
        EvalReport {
            subject_id: "style-1-0".into(),
            scenarios: vec![ScenarioCell {
                spec: ScenarioSpec::new(1).unwrap(),
                accuracy: 0.97,
                n_per_side: 250,
                clean_checksum: "aa".into(),
                watermarked_checksum: "bb".into(),
            }],
            uniqueness: Some(UniquenessOutcome {
                accuracy: 0.8,
                n_per_side: 250,
                own_checksum: "cc".into(),
                other_checksums: vec!["dd".into()],
            }),
            quality: Some(QualityOutcome {
                fid_clean: 10.0,
                fid_watermarked: 10.4,
                relative_change: 0.04,
                extractor_version: "tapnet-v1".into(),
                set_sizes: [30, 30, 250, 250],
            }),
            partial_watermarking: vec![PartialOutcome {
                fraction: 0.5,
                n_watermarked: 15,
                accuracy: 0.9,
                clean_checksum: "ee".into(),
                watermarked_checksum: "ff".into(),
            }],
            countermeasures: vec![CountermeasureOutcome {
                attack: "removal".into(),
                kind: Some(RemovalKind::Jpeg),
                side: Some(AttackSide::Output),
                param: 20.0,
                accuracy: 0.7,
                n_images: 500,
                source_checksums: vec!["gg".into(), "hh".into()],
            }],
            extractor_version: "tapnet-v1".into(),
            finetune_seed: 3,
            evaluate_seed: 3,
            finetune_sample_seeds: finetune_sample_seeds(3, &[0, 1, 2]),
            evaluate_sample_seeds: evaluate_sample_seeds(3, &[0, 1, 2]),
            config: serde_json::json!({"resolution": 64}),
        }
    }

    #[test]
    fn report_round_trip_and_tables() {
        let report = stub_report();
        report.validate().unwrap();
        let text = report.to_json().unwrap();
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back, report);

        let csv = report.scenario_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("scenario,model_known,prompts_known"));
        assert!(csv.contains("1,true,true,0.97,250"));
        assert_eq!(report.partial_csv().lines().count(), 2);
        let cm = report.countermeasure_csv();
        assert!(cm.contains("removal,jpeg,output,20,0.7,500"));
    }

    #[test]
    fn report_validation_rejects_bad_cells() {
        let mut bad = stub_report();
        bad.scenarios[0].accuracy = 1.5;
        assert!(bad.validate().is_err());

        let mut bad = stub_report();
        bad.partial_watermarking[0].clean_checksum.clear();
        assert!(bad.validate().is_err());

        let mut bad = stub_report();
        bad.quality.as_mut().unwrap().relative_change = f64::INFINITY;
        assert!(bad.validate().is_err());

        let mut bad = stub_report();
        bad.countermeasures[0].source_checksums.clear();
        assert!(bad.validate().is_err());

        // A forged overlap between the two seed chains must be caught.
        let mut bad = stub_report();
        let stolen = bad.evaluate_sample_seeds[0];
        bad.finetune_sample_seeds.push(stolen);
        let err = bad.validate().unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Domain separation keeps the fine-tune and evaluation sample-seed
        /// chains disjoint even when both stages share one root seed.
        #[test]
        fn seed_chains_never_collide(seed in 0u64..10_000, ids in proptest::collection::vec(0u32..64, 1..8)) {
            let ft = finetune_sample_seeds(seed, &ids);
            let ev = evaluate_sample_seeds(seed, &ids);
            for s in &ft {
                prop_assert!(!ev.contains(s));
            }
        }
    }
}
