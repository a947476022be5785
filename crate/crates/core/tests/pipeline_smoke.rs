//! Reduced end-to-end pass through the public API: pretrain a tiny
//! generator/detector pair, protect a subject, train synthesis proxies on
//! both sides, fine-tune the detector, and score one scenario plus the
//! report-level helpers. Everything runs at 16x16 in a few seconds; the
//! point is that the stages compose, not that the numbers are good.

use genmark_core::evaluation::{
    eval_quality, eval_scenario, eval_uniqueness, EvalReport, ScenarioAssets, ScenarioSpec,
};
use genmark_core::finetune::{build_finetune_set, finetune_detector, FinetuneConfig};
use genmark_core::imagery::{generate_synthetic_subjects, split_prompts, PromptSet, Task};
use genmark_core::metrics::default_extractor;
use genmark_core::pretrain::{pretrain, PretrainConfig};
use genmark_core::synthesis::{synthesize_run, DiffusionProxy, ModelKind, NoiseSchedule};
use genmark_core::watermark::protect_images;
use genmark_core::{seeds, Image32};

const RES: usize = 16;

#[test]
fn stages_compose_end_to_end() {
    // Corpus and pretrain, small enough to converge nowhere but run everywhere.
    let mut corpus: Vec<Image32> = Vec::new();
    for ds in generate_synthetic_subjects::<f32>(Task::ArtisticStyle, 4, 8, RES, 11).unwrap() {
        corpus.extend(ds.images);
    }
    let cfg = PretrainConfig {
        batch_size: 16,
        steps: 6,
        resolution: RES,
        latent_dim: 16,
        val_images: 8,
        val_interval: 0,
        seed: 12,
        ..PretrainConfig::default()
    };
    let (generator, base_detector, log) = pretrain(&corpus, &cfg).unwrap();
    assert_eq!(log.records.len(), cfg.steps);

    // Protect one subject; the same seed must reproduce the pattern bitwise.
    let subject = generate_synthetic_subjects::<f32>(Task::HumanFace, 1, 8, RES, 13)
        .unwrap()
        .remove(0);
    let marked = protect_images(&generator, &subject.images, 14).unwrap();
    let marked_again = protect_images(&generator, &subject.images, 14).unwrap();
    assert_eq!(marked.len(), subject.images.len());
    for (a, b) in marked.iter().zip(&marked_again) {
        assert_eq!(a.pixels(), b.pixels());
    }

    // Proxies for both sides of the subject.
    let schedule = NoiseSchedule::linear(20, 1e-4, 2e-2).unwrap();
    let mut m = DiffusionProxy::new(RES, 3, schedule.clone()).unwrap().with_sampling_steps(4);
    m.train(&subject.images, 12, 15).unwrap();
    let mut m_w = DiffusionProxy::new(RES, 3, schedule).unwrap().with_sampling_steps(4);
    m_w.train(&marked, 12, 16).unwrap();

    // Fine-tune on synthesized pairs; the result carries the subject tag the
    // evaluators require.
    let bank = PromptSet::default_bank();
    let (known, held_out) = split_prompts(&bank, 4, 0).unwrap();
    let ft_cfg = FinetuneConfig {
        images_per_prompt: 3,
        epochs: 2,
        batch_size: 8,
        seed: 17,
        subject_id: "smoke".into(),
        ..FinetuneConfig::default()
    };
    let (s, s_w) = build_finetune_set(&m, &m_w, &known, &ft_cfg).unwrap();
    assert_eq!(s.images.len(), known.len() * ft_cfg.images_per_prompt);
    let tuned = finetune_detector(&base_detector, &s, &s_w, &ft_cfg).unwrap();
    assert_eq!(tuned.fine_tuned_for.as_deref(), Some("smoke"));

    // One scenario end to end.
    let mut assets = ScenarioAssets::new(&m, &m_w, &known, seeds::derive(18, "scenario"));
    assets.held_out_prompts = Some(&held_out);
    assets.images_per_known_prompt = 2;
    assets.images_per_held_out_prompt = 2;
    let outcome = eval_scenario(&tuned, ScenarioSpec::all()[0], &assets).unwrap();
    assert!((0.0..=1.0).contains(&outcome.accuracy));
    assert_eq!(outcome.n_per_side, known.len() * assets.images_per_known_prompt);

    // Uniqueness across two watermarked runs and the quality cell.
    let own = synthesize_run(&m_w, ModelKind::Watermarked, known.ids()[0], 4, 19).unwrap();
    let other = synthesize_run(&m_w, ModelKind::Watermarked, known.ids()[0], 4, 20).unwrap();
    let uniq = eval_uniqueness(&tuned, &own, std::slice::from_ref(&other), 4).unwrap();
    assert!((0.0..=1.0).contains(&uniq.accuracy));

    let extractor = default_extractor::<f32>(RES, 3).unwrap();
    let quality = eval_quality(
        &subject.images,
        &marked,
        &outcome.clean.images,
        &outcome.watermarked.images,
        &extractor,
    )
    .unwrap();
    assert!(quality.fid_clean.is_finite() && quality.fid_watermarked.is_finite());

    // The assembled report validates.
    let report = EvalReport {
        subject_id: "smoke".into(),
        scenarios: vec![outcome.cell()],
        uniqueness: Some(uniq),
        quality: Some(quality),
        partial_watermarking: vec![],
        countermeasures: vec![],
        extractor_version: extractor.version().to_string(),
        finetune_seed: 17,
        evaluate_seed: 18,
        finetune_sample_seeds: vec![],
        evaluate_sample_seeds: vec![],
        config: serde_json::json!({"resolution": RES}),
    };
    report.validate().unwrap();
}
