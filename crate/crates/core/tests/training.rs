mod common;

use fungnet::dataset::{ImageDataset, Split};
use fungnet::models::{build_model_with, ArchitectureId, ModelGraph, ModelSpec};
use fungnet::nn::Mode;
use fungnet::preprocess::Pipeline;
use fungnet::training::{evaluate, fresh_model, run_experiment, train_model, Sgd, TrainConfig};
use fungnet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data() -> ImageDataset {
    let items = common::images::synthetic(&[(Split::Train, 2), (Split::Val, 2), (Split::Test, 2)], 64);
    ImageDataset::from_images(items, Pipeline::default()).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        architecture: ArchitectureId::AlexNet,
        width_divisor: 16,
        max_epochs: 3,
        repeats: 1,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn weights(m: &ModelGraph) -> Vec<Vec<f32>> {
    m.parameters().iter().map(|p| p.tensor.to_vec()).collect()
}

#[test]
fn best_weights_are_restored() {
    let data = tiny_data();
    let cfg = TrainConfig { max_epochs: 4, learning_rate: 0.01, ..tiny_config() };
    let mut model = fresh_model(&cfg, cfg.seed).unwrap();
    let mut seen = Vec::new();
    let record = train_model(&mut model, &data, &cfg, &mut |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(record.stop_epoch, 4);
    let min = record.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    let first_min = record.epochs.iter().position(|e| e.val_loss == min).unwrap() + 1;
    assert_eq!(record.best_epoch, first_min);
    let val = evaluate(&model, &data, Split::Val, cfg.batch_size).unwrap();
    assert!((val.loss - min).abs() < 1e-6, "restored {} vs recorded {min}", val.loss);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let cfg = tiny_config();
    let run = || {
        let mut model = fresh_model(&cfg, cfg.seed).unwrap();
        let record = train_model(&mut model, &data, &cfg, &mut |_| {}).unwrap();
        let losses: Vec<(u64, u64)> = record.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect();
        (losses, weights(&model))
    };
    assert_eq!(run(), run());
}

#[test]
fn single_repeat_mean_is_that_repeat() {
    let data = tiny_data();
    let cfg = TrainConfig { max_epochs: 2, ..tiny_config() };
    let result = run_experiment(&[cfg], &data, &|c, s| fresh_model(c, s), &mut |_, _, _| {}).unwrap();
    assert_eq!(result.selected, 0);
    assert_eq!(result.reports.len(), 1);
    assert_eq!(result.mean, result.reports[0]);
    assert_eq!(result.mean.count, 4);
}

#[test]
fn experiment_selects_by_validation_accuracy() {
    let data = tiny_data();
    let a = TrainConfig { max_epochs: 1, repeats: 2, ..tiny_config() };
    let b = TrainConfig { learning_rate: 0.02, ..a };
    let result = run_experiment(&[a, b], &data, &|c, s| fresh_model(c, s), &mut |_, _, _| {}).unwrap();
    let means: Vec<f64> = result.candidates.iter().map(|c| c.mean_val_accuracy).collect();
    let best = if means[1] > means[0] { 1 } else { 0 };
    assert_eq!(result.selected, best);
    let reports = &result.reports;
    assert_eq!(reports.len(), 2);
    assert!((result.mean.accuracy - (reports[0].accuracy + reports[1].accuracy) / 2.0).abs() < 1e-12);
    assert_ne!(result.candidates[0].repeats[0].seed, result.candidates[0].repeats[1].seed);
}

#[test]
fn one_step_moves_every_trainable_parameter() {
    let mut model = build_model_with(ArchitectureId::ResNet50, ModelSpec::reduced(2, 16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = Tensor::from_fn(&[2, 3, 224, 224], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let logits = model.forward(&mut tape, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    model.accumulate_gradients(grads).unwrap();
    let before = weights(&model);
    let nonzero: Vec<bool> = model
        .parameters()
        .iter()
        .map(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
        .collect();
    Sgd::new(0.001, 0.9).unwrap().step(model.parameters_mut(), true).unwrap();
    for ((p, old), moved) in model.parameters().iter().zip(&before).zip(&nonzero) {
        if p.is_trainable() {
            assert!(*moved, "`{}` has an all-zero gradient", p.name);
            assert_ne!(&p.tensor.to_vec(), old, "`{}` did not move", p.name);
        } else {
            assert_eq!(&p.tensor.to_vec(), old, "buffer `{}` moved", p.name);
        }
        assert!(p.tensor.grad().is_none());
    }
}

#[test]
fn frozen_backbone_trains_only_the_head() {
    let data = tiny_data();
    let cfg = TrainConfig { max_epochs: 1, freeze_backbone: true, ..tiny_config() };
    let mut model = fresh_model(&cfg, cfg.seed).unwrap();
    let before = weights(&model);
    train_model(&mut model, &data, &cfg, &mut |_| {}).unwrap();
    let head_params = ["classifier.6.weight", "classifier.6.bias"];
    for (p, old) in model.parameters().iter().zip(&before) {
        let changed = &p.tensor.to_vec() != old;
        if head_params.contains(&p.name.as_str()) {
            assert!(changed, "head `{}` did not move", p.name);
        } else if p.name.contains("running") {
            continue;
        } else {
            assert!(!changed, "frozen `{}` moved", p.name);
        }
    }
}
