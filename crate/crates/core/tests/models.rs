mod common;

use common::arch_oracle;
use fungnet::models::{build_model, build_model_with, ArchitectureId, ModelSpec};
use fungnet::nn::Mode;
use fungnet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle(arch: ArchitectureId, classes: u64) -> u64 {
    match arch {
        ArchitectureId::AlexNet => arch_oracle::alexnet(classes),
        ArchitectureId::Vgg16 => arch_oracle::vgg16(classes),
        ArchitectureId::DenseNet121 => arch_oracle::densenet121(classes),
        ArchitectureId::ResNet50 => arch_oracle::resnet50(classes),
    }
}

#[test]
fn trainable_counts_match_layer_arithmetic() {
    for arch in ArchitectureId::ALL {
        for classes in [1000, 2] {
            let m = build_model(arch, classes, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.count_params().trainable as u64, oracle(arch, classes as u64), "{arch} / {classes}");
            assert_eq!(m.head_dims(), (arch_oracle::head_input_width(arch.id()) as usize, classes));
        }
    }
}

#[test]
fn transcribed_reference_counts() {
    assert_eq!(arch_oracle::alexnet(1000), 61_100_840);
    assert_eq!(arch_oracle::vgg16(1000), 138_357_544);
    assert_eq!(arch_oracle::densenet121(1000), 7_978_856);
    assert_eq!(arch_oracle::resnet50(1000), 25_557_032);
}

#[test]
fn total_adds_running_statistics() {
    let m = build_model(ArchitectureId::ResNet50, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let counts = m.count_params();
    // running mean and variance mirror γ and β one for one
    let bn_affine: usize = m.parameters().iter().filter(|p| p.name.ends_with("running_mean")).map(|p| p.tensor.len() * 2).sum();
    assert_eq!(counts.total, counts.trainable + bn_affine);
    assert_eq!(m.parameter("layer1.0.downsample.1.running_var").unwrap().tensor.shape(), &[256]);
}

#[test]
fn reduced_models_run_both_modes() {
    for arch in ArchitectureId::ALL {
        let mut m = build_model_with(arch, ModelSpec::reduced(2, 16), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch = Tensor::from_fn(&[2, 3, 224, 224], |i| ((i % 251) as f32 / 125.0) - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let y = m.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.shape(y), &[2, 2], "{arch}");
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&batch).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert!(a.bit_eq(&b), "{arch} eval forward is not deterministic");
    }
}

#[test]
fn own_weights_round_trip_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m = build_model_with(ArchitectureId::DenseNet121, ModelSpec::reduced(2, 16), &mut rng).unwrap();
    let batch = Tensor::from_fn(&[1, 3, 224, 224], |i| (i % 7) as f32 * 0.1);
    let before = m.predict(&batch).unwrap();
    let state = m.named_state().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut other = build_model_with(ArchitectureId::DenseNet121, ModelSpec::reduced(2, 16), &mut rng).unwrap();
    other.apply_weights(&state, true).unwrap();
    assert!(other.predict(&batch).unwrap().bit_eq(&before));
    m.apply_weights(&state, true).unwrap();
    assert!(m.predict(&batch).unwrap().bit_eq(&before));
}
