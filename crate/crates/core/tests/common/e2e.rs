//! A complete file-based run on a small synthetic corpus.

use std::fs;
use std::path::Path;

use fungnet::config::ExperimentConfig;
use fungnet::dataset::Split;
use fungnet::models::ArchitectureId;
use fungnet::pipeline::{evaluate_command, ingest_corpus, report_command, split_manifest, train_command, SplitOptions};

pub fn reduced_config(seed: u64, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        architecture: ArchitectureId::AlexNet,
        width_divisor: 16,
        max_epochs: epochs,
        repeats: 1,
        seed,
        ..ExperimentConfig::default()
    }
}

/// ingest → split → train → evaluate → report inside `dir`; returns the
/// bytes of the final report.
pub fn run(dir: &Path, seed: u64, epochs: usize) -> Vec<u8> {
    let corpus = dir.join("corpus");
    super::images::write_corpus(&corpus, 8, 8, 48);
    let manifest = dir.join("manifest.csv");
    ingest_corpus(&corpus, &manifest).unwrap();
    let opts = SplitOptions { seed, test_count: Some(4), val_count: Some(4), stratified: true };
    split_manifest(&manifest, &opts).unwrap();
    let model = dir.join("model.fgnt");
    let cfg = reduced_config(seed, epochs);
    train_command(&cfg, &manifest, &model, None, Some(&dir.join("log.csv")), &mut |_| {}).unwrap();
    let metrics = dir.join("metrics.csv");
    evaluate_command(&model, &manifest, Split::Test, &metrics, 4).unwrap();
    let table = dir.join("table.csv");
    report_command(&[metrics], &table).unwrap();
    fs::read(table).unwrap()
}
