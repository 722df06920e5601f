mod common;

use ctxopt::data::{make_synthetic, sample_shots, FeatureDataset, SynthConfig};
use ctxopt::encoder::{EncoderConfig, EncoderWeights};
use ctxopt::probe::{train_linear_probe, ProbeConfig};
use ctxopt::prompt::{ContextInit, PromptConfig, Sharing};
use ctxopt::tokenizer::Vocabulary;
use ctxopt::train::{train_coop, train_text_bias, train_text_transform, RunResult, TrainConfig};
use ctxopt::words::DEFAULT_TEMPLATE;

struct Setup {
    vocab: Vocabulary,
    encoder: EncoderWeights,
    dataset: FeatureDataset,
}

fn setup(classes: usize) -> Setup {
    setup_with(SynthConfig {
        classes,
        dim: 32,
        ..Default::default()
    })
}

fn setup_with(synth: SynthConfig) -> Setup {
    let vocab = common::vocab();
    let encoder = EncoderWeights::init_frozen(
        &EncoderConfig {
            vocab_size: vocab.len(),
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let dataset = make_synthetic(&synth).unwrap().dataset;
    Setup {
        vocab,
        encoder,
        dataset,
    }
}

fn coop(s: &Setup, prompt: &PromptConfig, shots: usize, seed: u64, cfg: TrainConfig) -> RunResult {
    let split = sample_shots(&s.dataset, shots, seed, true).unwrap();
    train_coop(&s.dataset, &split, prompt, &s.encoder, &s.vocab, &TrainConfig { seed, ..cfg })
        .unwrap()
        .0
}

/// Fails if any 10-step moving average rises more than 5% above the previous one.
fn assert_settles(trace: &[f32], what: &str) {
    assert!(trace.iter().all(|l| l.is_finite()), "{what}: non-finite loss");
    let ma: Vec<f32> = trace.windows(10).map(|w| w.iter().sum::<f32>() / 10.0).collect();
    for (i, pair) in ma.windows(2).enumerate() {
        assert!(pair[1] <= pair[0] * 1.05, "{what}: moving average rose at step {i}: {pair:?}");
    }
    assert!(ma.last() < ma.first(), "{what}: loss did not go down");
}

fn check_shape(r: &RunResult) {
    assert!((0.0..=1.0).contains(&r.accuracy));
    assert_eq!(r.loss_trace.len(), r.epochs * r.steps_per_epoch);
    assert_eq!(r.steps, r.loss_trace.len());
}

#[test]
fn sixteen_shot_losses_settle() {
    let s = setup(8);
    let r = coop(&s, &PromptConfig::default(), 16, 1, TrainConfig::default());
    check_shape(&r);
    assert_eq!((r.epochs, r.steps_per_epoch), (200, 1));
    assert_settles(&r.loss_trace, "coop");

    let split = sample_shots(&s.dataset, 16, 1, false).unwrap();
    let cfg = TrainConfig::default();
    let (bias, _) = train_text_bias(&s.dataset, &split, &s.encoder, &s.vocab, DEFAULT_TEMPLATE, &cfg).unwrap();
    let (map, _) = train_text_transform(&s.dataset, &split, &s.encoder, &s.vocab, DEFAULT_TEMPLATE, &cfg).unwrap();
    for (r, what) in [(&bias, "bias"), (&map, "transform")] {
        check_shape(r);
        assert_settles(&r.loss_trace, what);
    }
}

#[test]
fn identical_config_and_seed_reproduce_bit_for_bit() {
    let s = setup(8);
    let cfg = TrainConfig {
        max_epochs: Some(25),
        ..Default::default()
    };
    let prompt = PromptConfig {
        n_ctx: 4,
        ..Default::default()
    };
    let a = coop(&s, &prompt, 4, 2, cfg.clone());
    let b = coop(&s, &prompt, 4, 2, cfg.clone());
    let bits = |r: &RunResult| r.loss_trace.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
    let c = coop(&s, &prompt, 4, 3, cfg);
    assert_ne!(bits(&a), bits(&c));
    assert_ne!(a.fingerprint, c.fingerprint);
}

#[test]
fn class_specific_census_and_minibatches() {
    // 20 classes x 16 shots = 320 samples, above the full-batch limit.
    let s = setup(20);
    let prompt = PromptConfig {
        n_ctx: 2,
        sharing: Sharing::ClassSpecific,
        init: ContextInit::Manual { phrase: "a photo".into() },
        ..Default::default()
    };
    let r = coop(
        &s,
        &prompt,
        16,
        1,
        TrainConfig {
            max_epochs: Some(2),
            ..Default::default()
        },
    );
    check_shape(&r);
    assert_eq!(r.trainable_parameters, 20 * 2 * 64);
    assert_eq!(r.steps_per_epoch, 10);
}

fn std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[test]
fn linear_probe_census_and_seed_spread() {
    // Noisy enough that a single example per class is a poor estimate.
    let s = setup_with(SynthConfig {
        classes: 8,
        dim: 32,
        noise: 1.0,
        ..Default::default()
    });
    let cfg = ProbeConfig::default();
    let accs = |shots: usize| -> Vec<f64> {
        (1..=3)
            .map(|seed| {
                let split = sample_shots(&s.dataset, shots, seed, false).unwrap();
                let (r, probe) = train_linear_probe(&s.dataset, &split, &cfg).unwrap();
                assert_eq!(r.trainable_parameters, 8 * 33);
                assert_eq!(probe.parameter_count(), 8 * 33);
                r.accuracy
            })
            .collect()
    };
    let (one, sixteen) = (accs(1), accs(16));
    assert!(std(&one) > std(&sixteen), "1-shot {one:?} vs 16-shot {sixteen:?}");
}
