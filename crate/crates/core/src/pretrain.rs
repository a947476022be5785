//! Phase 1: joint training of the watermark generator and detector on a
//! clean corpus.
//!
//! Each step draws a fresh latent, renders one watermark pattern, and feeds
//! the detector a class-balanced batch (half clean, half watermarked). Both
//! models update simultaneously against `alpha * L_G + L_D`; the detector
//! loss backpropagates into the generator through the watermarked images, so
//! the pair cooperates instead of competing.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::metrics::{self, FeatureExtractor};
use crate::nn::{Activation, Adam, ParamSet};
use crate::watermark::{
    apply_watermark, apply_watermark_chw, detector_loss, detector_loss_logit_grad,
    generate_watermark, sample_latent, visibility_hinge, DetectorConfig, DetectorModel,
    GeneratorConfig, GeneratorModel, Label,
};
use crate::{sc, seeds, Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Invisibility budget: perceptual distance the watermark may spend.
    pub p: f64,
    /// Balance between invisibility and detection objectives.
    pub alpha: f64,
    /// Must be even; every batch is half clean, half watermarked.
    pub batch_size: usize,
    pub steps: usize,
    pub lr_generator: f64,
    pub lr_detector: f64,
    pub seed: u64,
    pub resolution: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Images held out of training for periodic accuracy sampling.
    pub val_images: usize,
    /// Sample validation accuracy every this many steps (0 = never).
    pub val_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            p: 0.05,
            alpha: 1.0,
            batch_size: 32,
            steps: 600,
            lr_generator: 1e-3,
            lr_detector: 1e-3,
            seed: 0,
            resolution: 64,
            channels: 3,
            latent_dim: 128,
            val_images: 128,
            val_interval: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0) {
            return Err(Error::config(format!("invisibility level must be >= 0, got {}", self.p)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("step count must be at least 1"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.lr_generator <= 0.0 || self.lr_detector <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// One logged training step; losses are stored as f64 whatever the working
/// precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_total: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Optimizer identity and hyperparameters, for reproducibility.
    pub optimizer: String,
    pub records: Vec<StepRecord>,
    pub wall_secs: f64,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_g,loss_d,loss_total,val_accuracy\n");
        for r in &self.records {
            let acc = r.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss_g, r.loss_d, r.loss_total, acc
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Combined objective: `alpha * l_g + l_d`.
pub fn total_loss<S: Scalar>(l_g: S, l_d: S, alpha: S) -> S {
    debug_assert!(l_g >= S::zero() && l_d >= S::zero(), "losses are nonnegative");
    alpha * l_g + l_d
}

/// Held-out summary of a generator/detector pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainValidation {
    /// Balanced accuracy distinguishing clean originals from watermarked ones.
    pub accuracy: f64,
    /// Fraction of images whose perceptual distance stays within `budget`.
    pub hinge_rate: f64,
    pub mean_distance: f64,
}

/// Score a pair on held-out images: detection accuracy at threshold 0.5 and
/// invisibility against `budget` (callers usually pass `p` plus a small
/// slack). The watermark latent derives from `seed`.
pub fn evaluate_pretrain<S: Scalar>(
    generator: &GeneratorModel<S>,
    detector: &DetectorModel<S>,
    extractor: &FeatureExtractor<S>,
    images: &[ImageTensor<S>],
    budget: f64,
    seed: u64,
) -> Result<PretrainValidation> {
    if images.is_empty() {
        return Err(Error::InsufficientData("validation needs at least one image".into()));
    }
    let z = sample_latent(seeds::derive(seed, "val-latent"), generator.config.latent_dim);
    let w = generate_watermark(generator, &z)?;
    let mut correct = 0usize;
    let mut within = 0usize;
    let mut dist_sum = 0.0f64;
    for x in images {
        let x_w = apply_watermark(x, &w)?;
        let clean_hat = crate::watermark::detect(detector, x)?;
        let wm_hat = crate::watermark::detect(detector, &x_w)?;
        let half = sc::<S>(0.5);
        if clean_hat <= half {
            correct += 1;
        }
        if wm_hat > half {
            correct += 1;
        }
        let d = metrics::perceptual_distance(x, &x_w, extractor)?
            .to_f64()
            .expect("scalar converts to f64");
        dist_sum += d;
        if d <= budget {
            within += 1;
        }
    }
    let n = images.len() as f64;
    Ok(PretrainValidation {
        accuracy: correct as f64 / (2.0 * n),
        hinge_rate: within as f64 / n,
        mean_distance: dist_sum / n,
    })
}

fn check_corpus<S: Scalar>(corpus: &[ImageTensor<S>], cfg: &PretrainConfig) -> Result<()> {
    if corpus.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "corpus of {} images cannot fill batches of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    for img in corpus {
        if img.resolution() != cfg.resolution || img.channels() != cfg.channels {
            return Err(Error::dimension(format!(
                "corpus image is {}x{} c{}, config expects {}x{} c{}",
                img.resolution(),
                img.resolution(),
                img.channels(),
                cfg.resolution,
                cfg.resolution,
                cfg.channels
            )));
        }
    }
    Ok(())
}

pub fn pretrain<S: Scalar>(
    corpus: &[ImageTensor<S>],
    cfg: &PretrainConfig,
) -> Result<(GeneratorModel<S>, DetectorModel<S>, TrainingLog)> {
    pretrain_with_callback(corpus, cfg, |_, _, _| Ok(()))
}

/// As [`pretrain`], invoking `on_step` after every optimizer step (for
/// checkpointing or progress display).
pub fn pretrain_with_callback<S: Scalar>(
    corpus: &[ImageTensor<S>],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&StepRecord, &GeneratorModel<S>, &DetectorModel<S>) -> Result<()>,
) -> Result<(GeneratorModel<S>, DetectorModel<S>, TrainingLog)> {
    cfg.validate()?;
    check_corpus(corpus, cfg)?;
    let started = std::time::Instant::now();

    // Deterministic holdout that never starves the training side.
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut seeds::rng(seeds::derive(cfg.seed, "holdout")));
    let val_n = if cfg.val_interval == 0 {
        0
    } else {
        cfg.val_images.min(corpus.len() - cfg.batch_size)
    };
    let (val_idx, train_idx) = order.split_at(val_n);
    let val_images: Vec<ImageTensor<S>> = val_idx.iter().map(|&i| corpus[i].clone()).collect();
    let train_chw: Vec<Array3<S>> = train_idx.iter().map(|&i| corpus[i].to_chw()).collect();

    let gen_cfg = GeneratorConfig {
        latent_dim: cfg.latent_dim,
        resolution: cfg.resolution,
        channels: cfg.channels,
    };
    let det_cfg = DetectorConfig { resolution: cfg.resolution, channels: cfg.channels };
    let mut generator = GeneratorModel::new(gen_cfg, seeds::derive(cfg.seed, "generator-seed"))?;
    let mut detector = DetectorModel::new(det_cfg, seeds::derive(cfg.seed, "detector-seed"))?;
    let extractor = metrics::default_extractor::<S>(cfg.resolution, cfg.channels)?;
    let mut adam_g = Adam::new(cfg.lr_generator);
    let mut adam_d = Adam::new(cfg.lr_detector);

    let half = cfg.batch_size / 2;
    let inv_half = sc::<S>(1.0 / half as f64);
    let alpha = sc::<S>(cfg.alpha);
    let p = sc::<S>(cfg.p);
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut rng = seeds::rng(seeds::derive_n(cfg.seed, "batch", step as u64));
        let picks = rand::seq::index::sample(&mut rng, train_chw.len(), cfg.batch_size);

        let z = sample_latent::<S>(seeds::derive_n(cfg.seed, "latent", step as u64), cfg.latent_dim);
        let (w, gen_cache) = generator.forward(&z.values)?;

        let mut det_grad = detector.zeros_like();
        let mut gw_total: Array3<S> = Array3::zeros(w.dim());
        let mut l_g_sum = S::zero();
        let mut l_d_sum = S::zero();

        for (slot, pick) in picks.into_iter().enumerate() {
            let x = &train_chw[pick];
            if slot < half {
                let (logit, dcache) = detector.forward_logit(x)?;
                let y_hat = Activation::Sigmoid.apply(logit);
                l_d_sum += detector_loss(Label::NonWatermarked, y_hat);
                let g_logit = detector_loss_logit_grad(Label::NonWatermarked, y_hat) * inv_half;
                let (_, twin) = detector.backward_logit(&dcache, g_logit);
                det_grad.add_scaled(&twin, S::one());
            } else {
                let (x_w, mask) = apply_watermark_chw(x, &w);
                let (logit, dcache) = detector.forward_logit(&x_w)?;
                let y_hat = Activation::Sigmoid.apply(logit);
                l_d_sum += detector_loss(Label::Watermarked, y_hat);
                let g_logit = detector_loss_logit_grad(Label::Watermarked, y_hat) * inv_half;
                let (gx, twin) = detector.backward_logit(&dcache, g_logit);
                det_grad.add_scaled(&twin, S::one());

                let (dist, g_lpips) = metrics::perceptual_distance_chw_grad(x, &x_w, &extractor)?;
                l_g_sum += visibility_hinge(dist, p);
                let lpips_coef = if dist > p { alpha * inv_half } else { S::zero() };
                Zip::from(&mut gw_total).and(&g_lpips).and(&gx).and(&mask).for_each(
                    |acc, &gl, &gd, &m| {
                        *acc += m * (lpips_coef * gl + gd);
                    },
                );
            }
        }

        let l_g = l_g_sum * inv_half;
        let l_d = l_d_sum * inv_half;
        let l_total = total_loss(l_g, l_d, alpha);
        if !l_total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {step}: L_G={l_g} L_D={l_d}"
            )));
        }

        let (_, gen_grad) = generator.backward(&gen_cache, &gw_total);
        adam_g.step(&mut generator, &gen_grad);
        adam_d.step(&mut detector, &det_grad);

        let val_accuracy = if cfg.val_interval > 0
            && !val_images.is_empty()
            && (step + 1) % cfg.val_interval == 0
        {
            let z_val =
                sample_latent::<S>(seeds::derive(cfg.seed, "val-watermark"), cfg.latent_dim);
            let w_val = generate_watermark(&generator, &z_val)?;
            let mut correct = 0usize;
            for x in &val_images {
                let x_w = apply_watermark(x, &w_val)?;
                let half_prob = sc::<S>(0.5);
                if crate::watermark::detect(&detector, x)? <= half_prob {
                    correct += 1;
                }
                if crate::watermark::detect(&detector, &x_w)? > half_prob {
                    correct += 1;
                }
            }
            Some(correct as f64 / (2.0 * val_images.len() as f64))
        } else {
            None
        };

        let record = StepRecord {
            step,
            loss_g: l_g.to_f64().expect("loss converts"),
            loss_d: l_d.to_f64().expect("loss converts"),
            loss_total: l_total.to_f64().expect("loss converts"),
            val_accuracy,
        };
        on_step(&record, &generator, &detector)?;
        records.push(record);
    }

    let log = TrainingLog {
        optimizer: format!(
            "adam(beta1=0.9, beta2=0.999, eps=1e-8, lr_g={}, lr_d={})",
            cfg.lr_generator, cfg.lr_detector
        ),
        records,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok((generator, detector, log))
}
