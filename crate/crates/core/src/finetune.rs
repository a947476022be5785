//! Phase 2: per-subject detector fine-tuning.
//!
//! The pretrained generator never changes here — the watermark a subject
//! published is fixed. Only the detector adapts, learning which traces of
//! the watermark survive the adversary's synthesis by training on clean (S)
//! versus watermarked (S_w) synthesized sets.

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::imagery::PromptSet;
use crate::nn::{Activation, Adam, ParamSet};
use crate::synthesis::{synthesize_run, ModelKind, SubjectSynthesizer, SynthesisRun};
use crate::watermark::{detector_loss, detector_loss_logit_grad, DetectorModel, Label};
use crate::{sc, seeds, Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub images_per_prompt: usize,
    pub epochs: usize,
    /// One tenth of the pretraining default.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub subject_id: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            images_per_prompt: 40,
            epochs: 5,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
            subject_id: String::new(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_prompt == 0 {
            return Err(Error::config("images_per_prompt must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epoch count must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Synthesize the paired fine-tuning sets S (clean) and S_w (watermarked):
/// `images_per_prompt` images per prompt from each model, under the
/// fine-tune seed domain with disjoint seeds for the two sides.
pub fn build_finetune_set<S: Scalar>(
    m: &dyn SubjectSynthesizer<S>,
    m_w: &dyn SubjectSynthesizer<S>,
    prompts: &PromptSet,
    cfg: &FinetuneConfig,
) -> Result<(SynthesisRun<S>, SynthesisRun<S>)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::config("fine-tuning needs at least one prompt"));
    }
    if m.resolution() != m_w.resolution() {
        return Err(Error::config(format!(
            "clean model works at {} but watermarked model at {}",
            m.resolution(),
            m_w.resolution()
        )));
    }
    let mut clean_runs = Vec::with_capacity(prompts.len());
    let mut wm_runs = Vec::with_capacity(prompts.len());
    for &(prompt_id, _) in &prompts.prompts {
        let seed_clean = seeds::sample_seed(cfg.seed, seeds::SeedDomain::Finetune, prompt_id, 0);
        let seed_wm = seeds::sample_seed(cfg.seed, seeds::SeedDomain::Finetune, prompt_id, 1);
        clean_runs.push(synthesize_run(
            m,
            ModelKind::Clean,
            prompt_id,
            cfg.images_per_prompt,
            seed_clean,
        )?);
        wm_runs.push(synthesize_run(
            m_w,
            ModelKind::Watermarked,
            prompt_id,
            cfg.images_per_prompt,
            seed_wm,
        )?);
    }
    Ok((SynthesisRun::merge(clean_runs)?, SynthesisRun::merge(wm_runs)?))
}

/// Fraction of labeled samples the detector classifies correctly at the 0.5
/// threshold.
pub fn detector_accuracy<S: Scalar>(
    d: &DetectorModel<S>,
    samples: &[(Array3<S>, Label)],
) -> Result<f64> {
    let mut correct = 0usize;
    for (x, label) in samples {
        let (logit, _) = d.forward_logit(x)?;
        let y_hat = Activation::Sigmoid.apply(logit);
        let predicted = crate::watermark::classify_prob(y_hat, sc::<S>(0.5));
        if predicted == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Fine-tune a copy of `d` on S (label 0) versus S_w (label 1).
///
/// Warm start from the pretrained weights, reduced learning rate, 10%
/// deterministic validation split; the epoch snapshot with the best
/// validation accuracy is returned, tagged with the subject id. The input
/// detector is untouched.
pub fn finetune_detector<S: Scalar>(
    d: &DetectorModel<S>,
    s: &SynthesisRun<S>,
    s_w: &SynthesisRun<S>,
    cfg: &FinetuneConfig,
) -> Result<DetectorModel<S>> {
    cfg.validate()?;
    if s.model_kind != ModelKind::Clean || s_w.model_kind != ModelKind::Watermarked {
        return Err(Error::validation(
            "finetune_detector expects (clean, watermarked) runs in that order",
        ));
    }
    let (a, b) = (s.len(), s_w.len());
    let imbalance = (a.abs_diff(b)) as f64 / a.max(b) as f64;
    if imbalance > 0.01 {
        return Err(Error::validation(format!(
            "class imbalance {imbalance:.3} exceeds 1% ({a} clean vs {b} watermarked)"
        )));
    }

    let mut samples: Vec<(Array3<S>, Label)> = Vec::with_capacity(a + b);
    for img in &s.images {
        samples.push((img.to_chw(), Label::NonWatermarked));
    }
    for img in &s_w.images {
        samples.push((img.to_chw(), Label::Watermarked));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(cfg.seed, "finetune-split")));
    let val_n = samples.len() / 10;
    let (val_idx, train_idx) = order.split_at(val_n);

    let mut detector = d.clone();
    detector.fine_tuned_for = Some(cfg.subject_id.clone());
    let mut adam = Adam::new(cfg.learning_rate);
    let mut best: Option<(f64, DetectorModel<S>)> = None;

    let val_set: Vec<(Array3<S>, Label)> =
        val_idx.iter().map(|&i| samples[i].clone()).collect();

    for epoch in 0..cfg.epochs {
        let mut epoch_order = train_idx.to_vec();
        epoch_order.shuffle(&mut seeds::rng(seeds::derive_n(cfg.seed, "epoch", epoch as u64)));
        for batch in epoch_order.chunks(cfg.batch_size) {
            let mut grad = detector.zeros_like();
            let inv = sc::<S>(1.0 / batch.len() as f64);
            let mut batch_loss = S::zero();
            for &i in batch {
                let (x, label) = &samples[i];
                let (logit, cache) = detector.forward_logit(x)?;
                let y_hat = Activation::Sigmoid.apply(logit);
                batch_loss += detector_loss(*label, y_hat);
                let g_logit = detector_loss_logit_grad(*label, y_hat) * inv;
                let (_, twin) = detector.backward_logit(&cache, g_logit);
                grad.add_scaled(&twin, S::one());
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite fine-tuning loss in epoch {epoch}"
                )));
            }
            adam.step(&mut detector, &grad);
        }
        if !val_set.is_empty() {
            let acc = detector_accuracy(&detector, &val_set)?;
            // Ties go to the later epoch: on coarse validation sets the
            // extra training is worth more than the tie.
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, detector.clone()));
            }
        }
    }

    Ok(best.map(|(_, d)| d).unwrap_or(detector))
}
