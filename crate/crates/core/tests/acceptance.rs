//! Acceptance checks. One PASS/FAIL line per criterion; exits nonzero if
//! any criterion fails. Criterion 11 runs only when `FUNGNET_WEIGHTS` and
//! `FUNGNET_CORPUS` point at converted ResNet50 weights and a corpus root.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::{arch_oracle, e2e, gradsuite};
use fungnet::checkpoint::{load_checkpoint, save_checkpoint};
use fungnet::config::ExperimentConfig;
use fungnet::dataset::{split, DatasetManifest, ImageDataset, Label, Record, Split, SplitSpec};
use fungnet::metrics::{auc, PredictionSet, REPORT_HEADER};
use fungnet::models::{build_model, build_model_with, ArchitectureId, ModelSpec};
use fungnet::nn::Mode;
use fungnet::pipeline::{experiment_command, ingest_corpus, split_manifest, SplitOptions};
use fungnet::preprocess::{normalize, preprocess_eval, ImageBuffer, NormalizationConstants, Pipeline};
use fungnet::training::{evaluate, run_epochs, train_epoch, EpochRecord, Sgd};
use fungnet::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradient_suite() -> Outcome {
    let results = gradsuite::run();
    let failing: Vec<String> = results.iter().filter(|r| !(r.1 < 1e-4)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    if failing.is_empty() {
        Outcome::Pass(format!("{} checks, worst relative error {worst:.2e} < 1e-4", results.len()))
    } else {
        Outcome::Fail(failing.join("; "))
    }
}

fn architecture_shapes() -> Outcome {
    let batch = Tensor::from_fn(&[4, 3, 224, 224], |i| ((i % 255) as f32 / 127.0) - 1.0);
    let mut bad = Vec::new();
    for arch in ArchitectureId::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = build_model(arch, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let train = m.forward(&mut tape, x, Mode::Train, &mut rng).map(|y| tape.shape(y).to_vec());
        drop(tape);
        let eval = m.predict(&batch).map(|y| y.shape().to_vec());
        for (mode, got) in [("train", train), ("eval", eval)] {
            match got {
                Ok(s) if s == [4, 2] => {}
                other => bad.push(format!("{arch} {mode}: {other:?}")),
            }
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { "4 models x 2 modes -> (4, 2)".into() } else { bad.join("; ") })
}

fn parameter_counts() -> Outcome {
    let transcribed = [61_100_840u64, 138_357_544, 7_978_856, 25_557_032];
    let mut lines = Vec::new();
    let mut ok = true;
    for (arch, want) in ArchitectureId::ALL.into_iter().zip(transcribed) {
        let oracle = match arch {
            ArchitectureId::AlexNet => arch_oracle::alexnet(1000),
            ArchitectureId::Vgg16 => arch_oracle::vgg16(1000),
            ArchitectureId::DenseNet121 => arch_oracle::densenet121(1000),
            ArchitectureId::ResNet50 => arch_oracle::resnet50(1000),
        };
        let got = build_model(arch, 1000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().count_params().trainable as u64;
        ok &= got == oracle && oracle == want;
        lines.push(format!("{arch} {got}"));
    }
    verdict(ok, lines.join(", "))
}

fn overfit() -> Outcome {
    // random 8x8 color blocks with alternating labels: no class-level cue,
    // so the model has to memorize each image
    let mut noise = ChaCha8Rng::seed_from_u64(8);
    let items = (0..8)
        .map(|i| {
            let blocks: Vec<[u8; 3]> = (0..64).map(|_| noise.gen()).collect();
            let img = ImageBuffer::from_fn(64, 64, |r, c| blocks[(r / 8) * 8 + c / 8]);
            (img, Label::ALL[i % 2], Split::Train)
        })
        .collect();
    let data = ImageDataset::from_images(items, Pipeline::default()).unwrap();
    let mut model = build_model_with(ArchitectureId::AlexNet, ModelSpec::new(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = Sgd::new(0.001, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for epoch in 1..=200 {
        let loss = train_epoch(&mut model, &mut opt, &data, 4, 0, epoch, &mut rng).unwrap();
        let eval = evaluate(&model, &data, Split::Train, 4).unwrap();
        if eval.accuracy() == 1.0 {
            return Outcome::Pass(format!(
                "full-width AlexNet, 8 random block images: 100% train accuracy at epoch {epoch} (train loss {loss:.4}, eval loss {:.4}, {:.0}s)",
                eval.loss,
                start.elapsed().as_secs_f64()
            ));
        }
    }
    Outcome::Fail("train accuracy below 100% after 200 epochs".into())
}

fn auc_oracle(labels: &[usize], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let n = rng.gen_range(2..=50);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        // coarse grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..11) as f64 / 10.0).collect();
        let got = auc(&PredictionSet::from_scores(labels.clone(), scores.clone()).unwrap()).unwrap();
        worst = worst.max((got - auc_oracle(&labels, &scores)).abs());
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-9 && secs < 10.0, format!("1000 instances, max gap {worst:.1e}, {secs:.2}s"))
}

fn early_stopping() -> Outcome {
    let trace = |losses: Vec<f64>| {
        let n = losses.len();
        run_epochs(
            500,
            5,
            |e| Ok(EpochRecord { epoch: e, train_loss: 0.0, val_loss: losses[(e - 1).min(n - 1)], val_accuracy: 0.0, seconds: 0.0 }),
            |_| Ok(()),
        )
        .unwrap()
    };
    let a = trace(vec![1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99]);
    let b = trace((0..500).map(|e| 10.0 - e as f64 * 0.01).collect());
    let ok = (a.stop_epoch, a.best_epoch) == (7, 2) && (b.stop_epoch, b.best_epoch) == (500, 500);
    verdict(
        ok,
        format!(
            "plateau trace stops at {} (best {}); improving trace stops at {} (best {})",
            a.stop_epoch, a.best_epoch, b.stop_epoch, b.best_epoch
        ),
    )
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = e2e::run(a.path(), 17, 3);
    let rb = e2e::run(b.path(), 17, 3);
    verdict(ra == rb, format!("two seeded runs (3 epochs, reduced AlexNet): reports {} ({} bytes)", if ra == rb { "identical" } else { "differ" }, ra.len()))
}

fn split_arithmetic() -> Outcome {
    let records = (0..450)
        .map(|i| Record {
            path: PathBuf::from(format!("img/{i:03}.png")),
            label: if i < 250 { Label::Poisonous } else { Label::Edible },
            split: Split::Unassigned,
        })
        .collect();
    let manifest = DatasetManifest::new(records).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for seed in [0, 1, 2] {
        let m = split(&manifest, &SplitSpec::scaled(450, seed)).unwrap();
        let c = [Split::Train, Split::Val, Split::Test].map(|s| m.split_counts(s));
        let sizes = c.map(|c| c.total());
        ok &= sizes == [320, 40, 90];
        for (cc, size) in c.iter().zip(sizes) {
            let want = size as f64 * 250.0 / 450.0;
            ok &= (cc.poisonous as f64 - want).abs() <= 1.0;
        }
        if seed == 0 {
            detail = format!(
                "train/val/test {}/{}/{}; poisonous {}/{}/{}",
                sizes[0], sizes[1], sizes[2], c[0].poisonous, c[1].poisonous, c[2].poisonous
            );
        }
    }
    verdict(ok, detail)
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fgnt");
    let model = build_model(ArchitectureId::ResNet50, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    save_checkpoint(&model, 3, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap().to_model().unwrap();
    let batch = Tensor::from_fn(&[2, 3, 224, 224], |i| ((i % 89) as f32 - 44.0) / 30.0);
    let identical = model.predict(&batch).unwrap().bit_eq(&restored.predict(&batch).unwrap());

    let good = std::fs::read(&path).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    let magic = matches!(load_checkpoint(&path), Err(Error::NotACheckpoint));
    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    let trunc = load_checkpoint(&path).err().map(|e| e.to_string()).unwrap_or_default();
    let trunc_ok = trunc.contains("tensor `") && trunc.contains("truncated");
    verdict(
        identical && magic && trunc_ok,
        format!("bit-identical logits: {identical}; bad magic rejected: {magic}; truncation: {trunc}"),
    )
}

fn preprocessing_constants() -> Outcome {
    let c = NormalizationConstants::default();
    let black = normalize(&ImageBuffer::from_fn(1, 1, |_, _| [0, 0, 0]), &c);
    let white = normalize(&ImageBuffer::from_fn(1, 1, |_, _| [255, 255, 255]), &c);
    let r0 = black.tensor().data()[0] as f64;
    let g255 = white.tensor().data()[1] as f64;
    let mut shapes_ok = true;
    for (h, w) in [(1, 1), (224, 224), (300, 500), (1000, 37), (256, 256)] {
        let img = ImageBuffer::from_fn(h, w, |r, c| [(r % 256) as u8, (c % 256) as u8, 7]);
        shapes_ok &= preprocess_eval(&img).unwrap().shape() == [3, 224, 224];
    }
    verdict(
        (r0 + 2.117904).abs() <= 1e-5 && (g255 - 2.428571).abs() <= 1e-5 && shapes_ok,
        format!("R(0) = {r0:.6}, G(255) = {g255:.6}, eval output always (3, 224, 224): {shapes_ok}"),
    )
}

fn table_reproduction() -> Outcome {
    let (Some(weights), Some(corpus)) = (std::env::var_os("FUNGNET_WEIGHTS"), std::env::var_os("FUNGNET_CORPUS")) else {
        return Outcome::Skip("optional; set FUNGNET_WEIGHTS and FUNGNET_CORPUS to run".into());
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.csv");
    ingest_corpus(&PathBuf::from(corpus), &manifest).unwrap();
    split_manifest(&manifest, &SplitOptions { seed: 0, test_count: None, val_count: None, stratified: true }).unwrap();
    let cfg = ExperimentConfig { architecture: ArchitectureId::ResNet50, ..ExperimentConfig::default() };
    let out = dir.path().join("resnet50.csv");
    let result = experiment_command(&cfg, &manifest, &out, Some(&PathBuf::from(weights)), &mut |_, _, _| {}).unwrap();
    let header = std::fs::read_to_string(&out).unwrap().lines().next().unwrap_or_default().to_string();
    verdict(
        result.mean.recall >= 0.70 && header == REPORT_HEADER.join(","),
        format!("mean recall {:.3} (need >= 0.70), header `{header}`", result.mean.recall),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradient_suite),
        ("architecture shapes", architecture_shapes),
        ("parameter counts", parameter_counts),
        ("overfit", overfit),
        ("AUC oracle equivalence", auc_equivalence),
        ("early-stopping traces", early_stopping),
        ("determinism", determinism),
        ("split arithmetic", split_arithmetic),
        ("checkpoint round trip", checkpoint_round_trip),
        ("preprocessing constants", preprocessing_constants),
        ("table reproduction", table_reproduction),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
