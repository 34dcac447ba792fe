//! End-to-end stages: ingest, split, train, evaluate, predict, report and
//! the repeated experiment. Each stage reads and writes files so stages can
//! run as separate commands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{ingest, split, DatasetManifest, ImageDataset, Ingested, Label, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{emit_report, parse_report, MetricsReport, PredictionSet};
use crate::models::ModelGraph;
use crate::preprocess::{ImageBuffer, Pipeline};
use crate::seed::derive_seed;
use crate::training::{self, fresh_model, EpochRecord, ExperimentResult, TrainConfig, TrainRecord};

const HEAD_STREAM: u64 = 0x4845_4144;

/// Scans `data_root` and writes an unassigned manifest.
pub fn ingest_corpus(data_root: &Path, manifest_out: &Path) -> Result<Ingested> {
    let ingested = ingest(data_root)?;
    ingested.manifest.write_csv(manifest_out)?;
    Ok(ingested)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitOptions {
    pub seed: u64,
    /// `None` holds out 20% of the corpus.
    pub test_count: Option<usize>,
    /// `None` holds out 8.9% of the corpus.
    pub val_count: Option<usize>,
    pub stratified: bool,
}

/// Assigns splits and rewrites the manifest in place.
pub fn split_manifest(manifest_path: &Path, opts: &SplitOptions) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let scaled = SplitSpec::scaled(manifest.len(), opts.seed);
    let spec = SplitSpec {
        test_count: opts.test_count.unwrap_or(scaled.test_count),
        val_count: opts.val_count.unwrap_or(scaled.val_count),
        stratified: opts.stratified,
        seed: opts.seed,
    };
    let assigned = split(&manifest, &spec)?;
    assigned.write_csv(manifest_path)?;
    Ok(assigned)
}

fn load_split_dataset(manifest_path: &Path, pipeline: Pipeline) -> Result<ImageDataset> {
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    if !manifest.is_split() {
        return Err(Error::Dataset(format!("{} has records without a split; run split first", manifest_path.display())));
    }
    ImageDataset::load(&manifest, pipeline)
}

/// The starting model of a run: freshly initialized, or built from `init`
/// with its classifier head replaced by a fresh two-way head when `init`
/// was saved with a different class count.
pub fn initial_model(cfg: &TrainConfig, seed: u64, init: Option<&Checkpoint>) -> Result<ModelGraph> {
    let Some(init) = init else {
        return fresh_model(cfg, seed);
    };
    let p = init.provenance;
    if p.architecture != cfg.architecture || p.width_divisor != cfg.width_divisor {
        return Err(Error::Config(format!(
            "initial weights are for {} (width divisor {}), the config asks for {} (width divisor {})",
            p.architecture.display_name(),
            p.width_divisor,
            cfg.architecture.display_name(),
            cfg.width_divisor
        )));
    }
    let mut model = init.to_model()?;
    if model.num_classes() != 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[HEAD_STREAM]));
        model.replace_head(2, &mut rng)?;
    }
    Ok(model)
}

/// Trains one model with the config seed and saves the best-epoch weights.
pub fn train_command(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    out: &Path,
    init_weights: Option<&Path>,
    log: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRecord> {
    cfg.validate()?;
    let data = load_split_dataset(manifest_path, cfg.pipeline())?;
    let init = init_weights.map(load_checkpoint).transpose()?;
    let train_cfg = cfg.train_config();
    let mut model = initial_model(&train_cfg, train_cfg.seed, init.as_ref())?;
    let record = training::train_model(&mut model, &data, &train_cfg, on_epoch)?;
    if let Some(log) = log {
        record.write_csv(log)?;
    }
    save_checkpoint(&model, train_cfg.seed, out)?;
    Ok(record)
}

/// Scores a saved model on one split and writes a one-row report.
pub fn evaluate_command(model_path: &Path, manifest_path: &Path, split: Split, out: &Path, batch_size: usize) -> Result<MetricsReport> {
    let model = load_checkpoint(model_path)?.to_model()?;
    let data = load_split_dataset(manifest_path, Pipeline::default())?;
    if data.indices(split).is_empty() {
        return Err(Error::Dataset(format!("the {split} split is empty")));
    }
    let eval = training::evaluate(&model, &data, split, batch_size)?;
    let report = MetricsReport::compute(&eval.predictions)?;
    let text = emit_report(&[(model.architecture().display_name(), report)])?;
    write_atomic(out, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub poisonous_probability: f64,
}

pub fn predict_image(model_path: &Path, image_path: &Path) -> Result<Prediction> {
    let model = load_checkpoint(model_path)?.to_model()?;
    let img = ImageBuffer::open(image_path)?;
    let input = Pipeline::default().eval(&img)?.into_tensor();
    let batch = input.reshape(&[1, 3, input.shape()[1], input.shape()[2]])?;
    let logits = model.predict(&batch)?;
    let p = PredictionSet::from_logits(vec![0], &logits)?;
    Ok(Prediction { label: Label::from_index(p.predicted()[0])?, poisonous_probability: p.scores()[0] })
}

/// Concatenates the rows of several report files into one table.
pub fn report_command(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::Metrics(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(parse_report(&text).map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?);
    }
    let table = emit_report(&rows)?;
    write_atomic(out, |w| Ok(w.write_all(table.as_bytes())?))?;
    Ok(table)
}

/// Runs the repeated experiment and writes the mean test metrics as a
/// one-row report.
pub fn experiment_command(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    out: &Path,
    init_weights: Option<&Path>,
    on_epoch: &mut dyn FnMut(usize, usize, &EpochRecord),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = load_split_dataset(manifest_path, cfg.pipeline())?;
    let init = init_weights.map(load_checkpoint).transpose()?;
    let make = |c: &TrainConfig, seed: u64| initial_model(c, seed, init.as_ref());
    let result = training::run_experiment(&cfg.candidate_configs(), &data, &make, on_epoch)?;
    let name = result.candidates[result.selected].config.architecture.display_name();
    let text = emit_report(&[(name, result.mean)])?;
    write_atomic(out, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(result)
}
