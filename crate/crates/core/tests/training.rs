//! End-to-end behaviour of the three trainers on generated scenes.

use cxs_core::checkpoint::save_checkpoint;
use cxs_core::config::RunConfig;
use cxs_core::encoders::OracleEncoders;
use cxs_core::pipeline::{encode_scenes, init_predictor, supervision_maps, train_head, EncodedScene, Pipeline};
use cxs_core::predictor::{loss_rep, predict, train_stage1, StageOneConfig, StageOneSample, Variant};
use cxs_core::sampler::{sampler_forward, train_sampler, SamplerParams, SelectionPolicy, SupervisionMode};
use cxs_core::scene::generate_scenes;
use numkernel::RngStream;

const SEEDS: u64 = 5;

fn scenes(cfg: &RunConfig, enc: &OracleEncoders, seed: u64, first: u64, n: usize) -> Vec<EncodedScene> {
    encode_scenes(&generate_scenes(&cfg.scene, seed, first, n).unwrap(), &cfg.scene, enc).unwrap()
}

fn setup() -> (RunConfig, OracleEncoders) {
    let cfg = RunConfig::default();
    let enc = OracleEncoders::new(&cfg.scene, cfg.dim, cfg.text_dim, cfg.encoder_seed).unwrap();
    (cfg, enc)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn sampler_fits_a_single_scene() {
    let (cfg, enc) = setup();
    let scene = scenes(&cfg, &enc, 21, 0, 1);
    let map = supervision_maps(&scene, &cfg.scene, &enc, cfg.lambda, SupervisionMode::Multiplicative).unwrap();
    let samples = vec![(scene[0].lr_image.clone(), map[0].g_star.clone())];
    let out = train_sampler(&cfg.scene, &samples, 2000, 0.05, &mut RngStream::new(3, 0)).unwrap();
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    let fitted = mse(&sampler_forward(&samples[0].0, &out.params).unwrap(), &samples[0].1);
    assert!(fitted < 1e-3, "final mse {fitted}");
    let again = train_sampler(&cfg.scene, &samples, 2000, 0.05, &mut RngStream::new(3, 0)).unwrap();
    assert_eq!(again.params, out.params);
    assert_ne!(out.params, SamplerParams::init(&cfg.scene, &mut RngStream::new(3, 0)));
}

#[test]
fn stage_one_learns_without_collapse() {
    let (cfg, enc) = setup();
    let stage = StageOneConfig {
        epochs: 30,
        learning_rate: 0.01,
        momentum: cfg.momentum,
    };
    let mut decreased = 0;
    for seed in 0..SEEDS {
        let samples: Vec<StageOneSample> = scenes(&cfg, &enc, 100 + seed, 0, 64).into_iter().map(|s| s.sample).collect();
        let out = train_stage1(&samples, init_predictor(&cfg, seed), &stage, Variant::Full, &mut RngStream::new(seed, 1)).unwrap();
        assert!(out.loss_trace.iter().all(|l| l.is_finite()));
        if out.loss_trace.last() < out.loss_trace.first() {
            decreased += 1;
        }
        let ratio = *out.variance_trace.last().unwrap();
        assert!(ratio >= 0.10, "seed {seed}: variance ratio {ratio}");

        if seed == 0 {
            // completion from every tile beats completion from none on new scenes
            let held_out = scenes(&cfg, &enc, 100, 64, 16);
            let all: Vec<usize> = (0..cfg.scene.tiles()).collect();
            let (mut full, mut empty) = (0.0, 0.0);
            for s in &held_out {
                let sample = &s.sample;
                full += loss_rep(&predict(&sample.observed(&all), &sample.lr_tokens, &out.params).unwrap().h_tilde, &sample.h_star, &out.running_mean.mu).unwrap();
                empty += loss_rep(&predict(&[], &sample.lr_tokens, &out.params).unwrap().h_tilde, &sample.h_star, &out.running_mean.mu).unwrap();
            }
            assert!(full < empty, "all tiles {full} vs none {empty}");
        }
    }
    assert!(decreased * 2 > SEEDS as usize, "loss fell in {decreased}/{SEEDS} seeds");
}

#[test]
fn stage_one_is_reproducible() {
    let (cfg, enc) = setup();
    let samples: Vec<StageOneSample> = scenes(&cfg, &enc, 7, 0, 6).into_iter().map(|s| s.sample).collect();
    let stage = StageOneConfig {
        epochs: 2,
        learning_rate: 0.01,
        momentum: cfg.momentum,
    };
    let run = || train_stage1(&samples, init_predictor(&cfg, 7), &stage, Variant::Full, &mut RngStream::new(7, 1)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.params.named_tensors(), b.params.named_tensors());
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn stage_two_learns_and_leaves_the_predictor_alone() {
    let (mut cfg, enc) = setup();
    cfg.stage2_batch = 8;
    cfg.stage2_epochs = 30;
    let dir = tempfile::tempdir().unwrap();
    let mut decreased = 0;
    for seed in 0..SEEDS {
        let train = scenes(&cfg, &enc, 200 + seed, 0, 128);
        let predictor = init_predictor(&cfg, seed);
        let pipeline = Pipeline {
            sampler: None,
            policy: SelectionPolicy::Random { rate: 0.15, seed },
            predictor,
            variant: Variant::Full,
            head: None,
        };
        let snapshot = |name: &str| {
            let path = dir.path().join(name);
            save_checkpoint(&path, "predictor", serde_json::Value::Null, &pipeline.predictor.named_tensors()).unwrap();
            std::fs::read(path.with_extension("bin")).unwrap()
        };
        let before = snapshot("before.json");
        let (head, trace) = train_head(&pipeline, &train, None, &enc, &cfg, seed).unwrap();
        assert_eq!(before, snapshot("after.json"));
        assert!(trace.iter().all(|l| l.is_finite()));
        if trace.last() < trace.first() {
            decreased += 1;
        }
        if seed == 0 {
            let (again, _) = train_head(&pipeline, &train, None, &enc, &cfg, seed).unwrap();
            assert_eq!(again, head);
        }
    }
    assert!(decreased * 2 > SEEDS as usize, "loss fell in {decreased}/{SEEDS} seeds");
}
