//! SGD with momentum, early stopping on validation loss with best-weight
//! restoration, and the repeated-run experiment protocol.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageDataset, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{MetricsReport, PredictionSet};
use crate::models::{build_model_with, ArchitectureId, ModelGraph, ModelSpec, Parameter};
use crate::nn::Mode;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::Tape;

const REPEAT_STREAM: u64 = 0x5245_5045;
const INIT_STREAM: u64 = 0x494E_4954;
const DROPOUT_STREAM: u64 = 0x4452_4F50;

/// Momentum SGD: `v ← μ·v + g`, then `w ← w − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd { learning_rate, momentum, velocity: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Velocity buffer of parameter `index`, once it has been stepped.
    pub fn velocity(&self, index: usize) -> Option<&[f32]> {
        self.velocity.get(index)?.as_deref()
    }

    /// Updates every trainable parameter from its gradient, then clears all
    /// gradients. Frozen parameters and buffers are never touched. In
    /// `strict` mode a trainable parameter without a gradient is an error
    /// and nothing is updated.
    pub fn step(&mut self, params: &mut [Parameter], strict: bool) -> Result<()> {
        if strict {
            if let Some(p) = params.iter().find(|p| p.is_trainable() && p.tensor.grad().is_none()) {
                return Err(Error::Training(format!("parameter `{}` has no gradient", p.name)));
            }
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let (lr, mu) = (self.learning_rate as f32, self.momentum as f32);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.tensor.take_grad();
            let Some(g) = grad.filter(|_| p.is_trainable()) else { continue };
            let v = v.get_or_insert_with(|| vec![0.0; g.len()]);
            if v.len() != g.len() {
                return Err(Error::Training(format!("velocity of `{}` does not match its shape", p.name)));
            }
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = mu * *vi + gi;
            }
            for (w, vi) in p.tensor.data_mut().iter_mut().zip(v.iter()) {
                *w -= lr * vi;
            }
        }
        for p in params.iter_mut() {
            p.tensor.clear_grad();
        }
        Ok(())
    }
}

/// Outcome of one observation by [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strictly lower loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 })
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// `0` until the first observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-epoch measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
}

impl TrainRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Per-epoch log as CSV: `epoch,train_loss,val_loss,val_accuracy,seconds`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let text = self.to_csv()?;
        write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
    }
}

/// Runs epochs `1..=max_epochs` until early stopping triggers.
///
/// `epoch` trains one epoch and returns its record; `on_best` is called
/// after each epoch that strictly lowers the validation loss.
pub fn run_epochs(
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(usize) -> Result<EpochRecord>,
    mut on_best: impl FnMut(usize) -> Result<()>,
) -> Result<TrainRecord> {
    if max_epochs == 0 {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    let mut stopper = EarlyStopping::new(patience)?;
    let mut epochs = Vec::new();
    for e in 1..=max_epochs {
        let record = epoch(e)?;
        if !record.val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss in epoch {e}")));
        }
        epochs.push(record);
        let decision = stopper.observe(e, record.val_loss);
        if decision.improved {
            on_best(e)?;
        }
        if decision.stop {
            break;
        }
    }
    let stop_epoch = epochs.len();
    Ok(TrainRecord { epochs, best_epoch: stopper.best_epoch(), stop_epoch })
}

/// Settings of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: ArchitectureId,
    /// Channel-width divisor of the built model; `1` is the reference width.
    pub width_divisor: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub repeats: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: ArchitectureId::ResNet50,
            width_divisor: 1,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 4,
            max_epochs: 500,
            patience: 5,
            repeats: 5,
            seed: 0,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Sgd::new(self.learning_rate, self.momentum)?;
        for (name, v) in [
            ("width_divisor", self.width_divisor),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One pass over the shuffled, augmented train split. Returns the mean
/// per-sample loss.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut ModelGraph,
    opt: &mut Sgd,
    data: &ImageDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    let mut seen = 0;
    for (b, batch) in data.epoch_batches(Split::Train, batch_size, seed, epoch as u64)?.enumerate() {
        let batch = batch?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs);
        let logits = model.forward(&mut tape, x, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss in epoch {epoch}, batch {}", b + 1)));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        model.accumulate_gradients(grads)?;
        opt.step(model.parameters_mut(), false)?;
        total += value * batch.labels.len() as f64;
        seen += batch.labels.len();
    }
    Ok(total / seen as f64)
}

/// Eval-mode loss and predictions over a split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Mean per-sample cross-entropy.
    pub loss: f64,
    pub predictions: PredictionSet,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let p = &self.predictions;
        let hits = p.labels().iter().zip(p.predicted()).filter(|(a, b)| a == b).count();
        hits as f64 / p.len() as f64
    }
}

pub fn evaluate(model: &ModelGraph, data: &ImageDataset, split: Split, batch_size: usize) -> Result<Evaluation> {
    let mut predictions = PredictionSet::empty();
    let mut total = 0.0;
    for batch in data.eval_batches(split, batch_size)? {
        let batch = batch?;
        let logits = model.predict(&batch.inputs)?;
        total += cross_entropy_sum(&logits, &batch.labels);
        predictions.extend(PredictionSet::from_logits(batch.labels, &logits)?);
    }
    let loss = total / predictions.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{split} loss")));
    }
    Ok(Evaluation { loss, predictions })
}

/// Summed softmax cross-entropy of `(N, C)` logits.
fn cross_entropy_sum(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            lse - row[y] as f64
        })
        .sum()
}

fn snapshot(model: &ModelGraph) -> Vec<Tensor<f32>> {
    model.parameters().iter().map(|p| p.tensor.detach()).collect()
}

fn restore(model: &mut ModelGraph, saved: Vec<Tensor<f32>>) {
    for (p, t) in model.parameters_mut().iter_mut().zip(saved) {
        p.tensor = t;
    }
}

/// Trains until early stopping, then restores the weights of the epoch with
/// the lowest validation loss. `on_epoch` sees each record as it completes.
pub fn train_model(
    model: &mut ModelGraph,
    data: &ImageDataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRecord> {
    cfg.validate()?;
    for split in [Split::Train, Split::Val] {
        if data.indices(split).is_empty() {
            return Err(Error::Dataset(format!("the {split} split is empty")));
        }
    }
    model.set_backbone_frozen(cfg.freeze_backbone);
    model.zero_grads();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[DROPOUT_STREAM]));
    let mut best = snapshot(model);

    let record = {
        let model = std::cell::RefCell::new(&mut *model);
        run_epochs(
            cfg.max_epochs,
            cfg.patience,
            |epoch| {
                let start = Instant::now();
                let mut m = model.borrow_mut();
                let train_loss = train_epoch(&mut m, &mut opt, data, cfg.batch_size, cfg.seed, epoch, &mut rng)?;
                let val = evaluate(&m, data, Split::Val, cfg.batch_size)?;
                let record = EpochRecord {
                    epoch,
                    train_loss,
                    val_loss: val.loss,
                    val_accuracy: val.accuracy(),
                    seconds: start.elapsed().as_secs_f64(),
                };
                on_epoch(&record);
                Ok(record)
            },
            |_| {
                best = snapshot(&model.borrow());
                Ok(())
            },
        )?
    };
    restore(model, best);
    Ok(record)
}

/// Seed of repeat `r` (1-based), mixed from the experiment seed.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    derive_seed(seed, &[REPEAT_STREAM, repeat as u64])
}

/// Builds a freshly initialized model for a run seeded with `seed`.
pub fn fresh_model(cfg: &TrainConfig, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT_STREAM]));
    build_model_with(cfg.architecture, ModelSpec::reduced(2, cfg.width_divisor), &mut rng)
}

/// One repeat of a candidate configuration.
#[derive(Clone, Debug)]
pub struct RepeatOutcome {
    pub seed: u64,
    pub record: TrainRecord,
    /// Validation accuracy of the restored (best-epoch) weights.
    pub val_accuracy: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct CandidateOutcome {
    pub config: TrainConfig,
    pub repeats: Vec<RepeatOutcome>,
    pub mean_val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub candidates: Vec<CandidateOutcome>,
    /// Index into `candidates` of the configuration with the best mean
    /// validation accuracy.
    pub selected: usize,
    /// Per-repeat test reports of the selected candidate.
    pub reports: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

/// Index of the highest value; the first one wins a tie.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains every candidate `repeats` times with seeds derived from
/// `(seed, r)` and scores each run on the test split. The candidate with
/// the highest mean validation accuracy is selected; its test reports and
/// their mean are returned.
///
/// `make_model` builds the starting model of a run from its config and seed.
pub fn run_experiment(
    candidates: &[TrainConfig],
    data: &ImageDataset,
    make_model: &dyn Fn(&TrainConfig, u64) -> Result<ModelGraph>,
    on_epoch: &mut dyn FnMut(usize, usize, &EpochRecord),
) -> Result<ExperimentResult> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate configuration given".into()));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        if data.indices(split).is_empty() {
            return Err(Error::Dataset(format!("the {split} split is empty")));
        }
    }
    let mut outcomes = Vec::with_capacity(candidates.len());
    for (c, cfg) in candidates.iter().enumerate() {
        cfg.validate()?;
        let mut repeats = Vec::with_capacity(cfg.repeats);
        for r in 1..=cfg.repeats {
            let seed = repeat_seed(cfg.seed, r);
            let mut model = make_model(cfg, seed)?;
            let run_cfg = TrainConfig { seed, ..*cfg };
            let record = train_model(&mut model, data, &run_cfg, &mut |e| on_epoch(c, r, e))?;
            let val = evaluate(&model, data, Split::Val, cfg.batch_size)?;
            let test = evaluate(&model, data, Split::Test, cfg.batch_size)?;
            repeats.push(RepeatOutcome {
                seed,
                record,
                val_accuracy: val.accuracy(),
                test: MetricsReport::compute(&test.predictions)?,
            });
        }
        let mean_val_accuracy = repeats.iter().map(|r| r.val_accuracy).sum::<f64>() / repeats.len() as f64;
        outcomes.push(CandidateOutcome { config: *cfg, repeats, mean_val_accuracy });
    }
    let means: Vec<f64> = outcomes.iter().map(|o| o.mean_val_accuracy).collect();
    let selected = select_best(&means).expect("at least one candidate");
    let reports: Vec<MetricsReport> = outcomes[selected].repeats.iter().map(|r| r.test).collect();
    let mean = MetricsReport::mean(&reports)?;
    Ok(ExperimentResult { candidates: outcomes, selected, reports, mean })
}
