//! Temporary tuning probe: tracks held-out detector accuracy and the
//! invisibility-budget fraction while pretraining runs long, to pick the
//! default step count. Not part of the library; deleted before release.

use genmark_core::imagery::{generate_synthetic_subjects, Task};
use genmark_core::metrics::{default_extractor, perceptual_distance};
use genmark_core::pretrain::{pretrain_with_callback, PretrainConfig};
use genmark_core::watermark::{apply_watermark, detect, generate_watermark, sample_latent};
use genmark_core::{seeds, Image32};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1800);
    let mut corpus: Vec<Image32> = Vec::with_capacity(5000);
    for task in [Task::ArtisticStyle, Task::HumanFace] {
        for ds in generate_synthetic_subjects::<f32>(task, 100, 25, 64, 404).unwrap() {
            corpus.extend(ds.images);
        }
    }
    let mut held_out: Vec<Image32> = Vec::new();
    for task in [Task::ArtisticStyle, Task::HumanFace] {
        for ds in generate_synthetic_subjects::<f32>(task, 10, 10, 64, 405).unwrap() {
            held_out.extend(ds.images);
        }
    }
    let extractor = default_extractor::<f32>(64, 3).unwrap();
    let cfg = PretrainConfig { seed: 42, steps, ..PretrainConfig::default() };
    let started = std::time::Instant::now();
    pretrain_with_callback(&corpus, &cfg, |rec, g, d| {
        if (rec.step + 1) % 100 == 0 {
            let (mut correct, mut within) = (0usize, 0usize);
            let mut max_d = 0.0f64;
            for (i, x) in held_out.iter().enumerate() {
                let z = sample_latent(seeds::derive_n(406, "latent", i as u64), g.config.latent_dim);
                let w = generate_watermark(g, &z).unwrap();
                let x_w = apply_watermark(x, &w).unwrap();
                if f64::from(detect(d, x).unwrap()) < 0.5 {
                    correct += 1;
                }
                if f64::from(detect(d, &x_w).unwrap()) >= 0.5 {
                    correct += 1;
                }
                let dist = f64::from(perceptual_distance(x, &x_w, &extractor).unwrap());
                max_d = max_d.max(dist);
                if dist <= 0.06 {
                    within += 1;
                }
            }
            println!(
                "step {:5}  L_G {:.4}  L_D {:.4}  held acc {:.3}  frac<=0.06 {:.3}  max_d {:.4}  ({:.0}s)",
                rec.step + 1,
                rec.loss_g,
                rec.loss_d,
                correct as f64 / (2 * held_out.len()) as f64,
                within as f64 / held_out.len() as f64,
                max_d,
                started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })
    .unwrap();
}
