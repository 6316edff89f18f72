mod common;

use std::collections::BTreeSet;

use common::{busy_weights, end_to_end_gradcheck, rel_err, rng};
use lvc_core::codecnets::{Codec, ModelWeights};
use lvc_core::entropy::QuantMode;
use lvc_core::tensor::{Tape, Tensor};
use lvc_core::training::*;
use lvc_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn mse_cfg(lambda: f64) -> RdLossConfig {
    RdLossConfig {
        lambda,
        distortion: Distortion::Mse,
    }
}

fn frames(seed: u64, h: usize, w: usize, n: usize) -> Vec<Tensor<f32>> {
    translating_clip(&mut rng(seed), h, w, n, 2)
}

#[test]
fn rd_loss_terms() {
    let tape = Tape::<f64>::new();
    let a: Vec<_> = frames(1, 8, 8, 2)
        .iter()
        .map(|f| tape.constant(f.cast()))
        .collect();
    let b: Vec<_> = frames(2, 8, 8, 2)
        .iter()
        .map(|f| tape.constant(f.cast()))
        .collect();
    let zero = tape.constant(Tensor::scalar(0.0));
    let bits = tape.constant(Tensor::scalar(640.0));

    let perfect = rd_loss(&tape, &a, &a, &zero, &mse_cfg(2048.0)).unwrap();
    assert_eq!(perfect.value().item(), 0.0);
    for lambda in [512.0, 6144.0] {
        let l = rd_loss(&tape, &a, &a, &bits, &mse_cfg(lambda)).unwrap();
        assert_eq!(l.value().item(), 640.0 / 128.0);
    }
    let d1 = rd_loss(&tape, &a, &b, &zero, &mse_cfg(1024.0))
        .unwrap()
        .value()
        .item();
    let d2 = rd_loss(&tape, &a, &b, &zero, &mse_cfg(2048.0))
        .unwrap()
        .value()
        .item();
    assert!(d1 > 0.0);
    assert_eq!(d2, 2.0 * d1);
    let mse: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| lvc_core::evalkit::mse(x.value(), y.value()).unwrap())
        .sum::<f64>()
        / 2.0;
    assert!(rel_err(d1, 1024.0 * mse) < 1e-12);

    let ssim = RdLossConfig {
        lambda: 8.0,
        distortion: Distortion::MsSsim,
    };
    assert_eq!(
        rd_loss(&tape, &a, &a, &zero, &ssim).unwrap().value().item(),
        0.0
    );
    assert!(rd_loss(&tape, &a, &b, &zero, &ssim).unwrap().value().item() > 0.0);
    assert!(rd_loss(&tape, &a[..1], &b, &zero, &ssim).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let codec = Codec::default();
    let mut w = busy_weights(&codec, 3);
    let before = w.clone();
    let mut adam = Adam::new(0.0);
    let cfg = StepConfig {
        loss: mse_cfg(2048.0),
        quant: QuantMode::Noise,
    };
    let r = train_step(&codec, &mut w, &mut adam, &[frames(3, 16, 16, 3)], &cfg, 7).unwrap();
    assert!(r.loss.is_finite() && r.loss > 0.0);
    assert_eq!(w, before);
    assert_eq!(adam.step, 1);
}

#[test]
fn schedule_grows_one_pframe_per_step() {
    let cfg = CurriculumConfig {
        step_iters: 10,
        max_pframes: 3,
        iters: 30,
        ..Default::default()
    };
    let lens: Vec<_> = (0..30).map(|i| cfg.clip_len_at(i)).collect();
    let expected: Vec<_> = [2; 10].into_iter().chain([3; 10]).chain([4; 10]).collect();
    assert_eq!(lens, expected);
    assert_eq!(cfg.clip_len_at(1_000_000), 4);
    assert!(CurriculumConfig {
        step_iters: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(CurriculumConfig {
        max_pframes: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn finetune_stage_switches_to_ms_ssim() {
    let cfg = CurriculumConfig {
        iters: 100,
        ms_ssim_finetune: true,
        ..Default::default()
    };
    assert_eq!(cfg.total_iters(), 120);
    assert_eq!(cfg.distortion_at(99), Distortion::Mse);
    assert_eq!(cfg.distortion_at(100), Distortion::MsSsim);
}

fn tiny_cfg(iters: u64) -> CurriculumConfig {
    CurriculumConfig {
        step_iters: 2,
        max_pframes: 2,
        batch_size: 2,
        iters,
        lr: 1e-3,
        crop: Some(16),
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let codec = Codec::default();
    let data = synthetic_dataset(5, 3, 20, 20, 4);

    let mut straight = Trainer::new(codec.clone(), tiny_cfg(4)).unwrap();
    let log = straight.run(&data, |_, _| {}).unwrap();
    assert_eq!(log.reports.len(), 4);

    let mut again = Trainer::new(codec.clone(), tiny_cfg(4)).unwrap();
    again.run(&data, |_, _| {}).unwrap();
    assert_eq!(again.weights, straight.weights);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.rplw");
    let mut first = Trainer::new(codec.clone(), tiny_cfg(4)).unwrap();
    first.step(&data).unwrap();
    first.step(&data).unwrap();
    first.save_checkpoint(&path).unwrap();
    assert!(sidecar_path(&path).exists());

    let mut resumed = Trainer::resume(codec.clone(), tiny_cfg(4), &path).unwrap();
    assert_eq!(resumed.iter, 2);
    assert_eq!(resumed.adam, first.adam);
    assert_eq!(
        resumed.cfg.clip_len_at(resumed.iter),
        first.cfg.clip_len_at(first.iter)
    );
    resumed.run(&data, |_, _| {}).unwrap();
    assert_eq!(resumed.iter, 4);
    assert_eq!(resumed.weights, straight.weights);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn short_sequences_are_skipped_and_counted() {
    let codec = Codec::default();
    let mut data = synthetic_dataset(6, 2, 16, 16, 3);
    data.push(frames(6, 16, 16, 2));
    let cfg = CurriculumConfig {
        crop: None,
        ..tiny_cfg(3)
    };
    let (w, log) = run_curriculum(&codec, &data, &cfg).unwrap();
    assert_eq!(log.skipped, 1);
    assert_eq!(w.lambda_index, cfg.lambda_index);

    let too_short = vec![frames(6, 16, 16, 1)];
    assert!(run_curriculum(&codec, &too_short, &cfg).is_err());
}

#[test]
fn non_finite_inputs_abort_with_a_diagnostic() {
    let codec = Codec::default();
    let mut w = ModelWeights::init(&codec, 2, 1);
    let mut clip = frames(7, 16, 16, 2);
    clip[1] = clip[1].map(|v| if v > 0.6 { f32::NAN } else { v });
    let cfg = StepConfig {
        loss: mse_cfg(2048.0),
        quant: QuantMode::Noise,
    };
    match train_step(&codec, &mut w, &mut Adam::new(1e-4), &[clip], &cfg, 1) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("loss"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn a_single_clip_is_overfit() {
    let codec = Codec::default();
    let clip = frames(8, 32, 32, 2);
    let mut w = ModelWeights::init(&codec, 2, 8);
    let mut adam = Adam::new(DEFAULT_LR);
    let cfg = StepConfig {
        loss: mse_cfg(2048.0),
        quant: QuantMode::Noise,
    };
    let losses: Vec<f64> = (0..500)
        .map(|i| {
            train_step(&codec, &mut w, &mut adam, &[clip.clone()], &cfg, i)
                .unwrap()
                .loss
        })
        .collect();
    let smoothed: Vec<f64> = losses
        .chunks(100)
        .map(|c| c.iter().sum::<f64>() / 100.0)
        .collect();
    assert!(
        smoothed.windows(2).all(|p| p[1] < p[0]),
        "smoothed losses {smoothed:?}"
    );
}

#[test]
fn every_parameter_receives_gradient() {
    let codec = Codec::default();
    let mut w = ModelWeights::init(&codec, 2, 9);
    let mut adam = Adam::new(DEFAULT_LR);
    let cfg = StepConfig {
        loss: mse_cfg(2048.0),
        quant: QuantMode::Noise,
    };
    let data = synthetic_dataset(9, 4, 32, 32, 3);
    let mut r = rng(9);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let all: BTreeSet<String> = w.tensors.keys().cloned().collect();
    for step in 0..100 {
        let clip = data[r.random_range(0..data.len())].clone();
        let (_, grads) = compute_gradients(&codec, &w, &[clip], &cfg, step).unwrap();
        for (name, g) in &grads {
            if g.data().iter().any(|&v| v != 0.0) {
                seen.insert(name.clone());
            }
        }
        adam.update(&mut w, &grads).unwrap();
        if seen == all {
            break;
        }
    }
    let dead: Vec<_> = all.difference(&seen).collect();
    assert!(dead.is_empty(), "never received gradient: {dead:?}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let r = end_to_end_gradcheck(5, 1e-3);
    assert_eq!(
        r.networks,
        ["lf", "mc", "me", "mv_codec", "mvp", "res_codec", "rp"]
    );
    assert_eq!(r.probes, 35);
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn curriculum_never_shortens(step in 1u64..1000, init in 1usize..4, extra in 0usize..6, a in 0u64..100_000, b in 0u64..100_000) {
        let cfg = CurriculumConfig { step_iters: step, initial_pframes: init, max_pframes: init + extra, ..Default::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(cfg.clip_len_at(lo) <= cfg.clip_len_at(hi));
        prop_assert!(cfg.pframes_at(hi) <= cfg.max_pframes);
        prop_assert!(cfg.pframes_at(lo) >= cfg.initial_pframes);
    }
}
