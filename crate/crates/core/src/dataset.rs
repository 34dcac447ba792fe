//! Corpus ingestion, stratified train/val/test assignment, and seeded batching.
//!
//! On disk a corpus is a directory with `edible/` and `poisonous/`
//! subdirectories of image files. The manifest CSV (`path,label,split`)
//! records the label and split of every image.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::preprocess::{resize_bilinear, ImageBuffer, Pipeline};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Image extensions accepted by [`ingest`].
pub const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// Share of the corpus held out for testing when no count is given.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
/// Share of the corpus held out for validation when no count is given.
pub const DEFAULT_VAL_FRACTION: f64 = 0.089;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474D;

/// Class label. Poisonous is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Edible = 0,
    Poisonous = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Edible, Label::Poisonous];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Edible),
            1 => Ok(Label::Poisonous),
            _ => Err(Error::Dataset(format!("class index {i} is not 0 (edible) or 1 (poisonous)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Edible => "edible",
            Label::Poisonous => "poisonous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown label `{s}` (expected edible or poisonous)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test, Split::Unassigned]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown split `{s}` (expected train, val, test or unassigned)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

/// Per-class record counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub edible: usize,
    pub poisonous: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.edible + self.poisonous
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Edible => self.edible,
            Label::Poisonous => self.poisonous,
        }
    }

    fn add(&mut self, label: Label) {
        match label {
            Label::Edible => self.edible += 1,
            Label::Poisonous => self.poisonous += 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<Record>,
}

impl DatasetManifest {
    /// Fails on duplicate paths.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(&r.path) {
                return Err(Error::Dataset(format!("duplicate path {}", r.path.display())));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class counts over all records.
    pub fn fingerprint(&self) -> ClassCounts {
        self.counts(|_| true)
    }

    pub fn split_counts(&self, split: Split) -> ClassCounts {
        self.counts(|r| r.split == split)
    }

    fn counts(&self, keep: impl Fn(&Record) -> bool) -> ClassCounts {
        let mut c = ClassCounts::default();
        for r in self.records.iter().filter(|r| keep(r)) {
            c.add(r.label);
        }
        c
    }

    /// Indices of the records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn is_split(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.split != Split::Unassigned)
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Dataset(format!(
                "manifest header must be `path,label,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        DatasetManifest::new(records)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Dataset(format!("cannot open manifest {}: {e}", path.display())))?;
        DatasetManifest::from_csv_reader(file)
    }

    pub fn write_csv_to(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(["path", "label", "split"])?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write_csv_to(w))
    }
}

/// A file [`ingest`] passed over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedFile>,
}

/// Scans `root/edible` and `root/poisonous` for readable images.
///
/// Files with other extensions, or whose header cannot be decoded, are
/// skipped and reported. Records are sorted by path within each class,
/// edible first, and start unassigned.
pub fn ingest(root: &Path) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing class directory {}", dir.display())));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for path in files {
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.as_deref().is_some_and(|e| IMAGE_EXTENSIONS.contains(&e)) {
                skipped.push(SkippedFile { path, reason: "unsupported extension".into() });
                continue;
            }
            if let Err(e) = image::image_dimensions(&path) {
                skipped.push(SkippedFile { path, reason: e.to_string() });
                continue;
            }
            records.push(Record { path, label, split: Split::Unassigned });
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} file(s) under {}", skipped.len(), root.display());
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no decodable images under {}", root.display())));
    }
    Ok(Ingested { manifest: DatasetManifest::new(records)?, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub test_count: usize,
    pub val_count: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    /// Default held-out sizes for a corpus of `total` records: 20% test and
    /// 8.9% validation, rounded to nearest (90 and 40 for 450 records).
    pub fn scaled(total: usize, seed: u64) -> Self {
        SplitSpec {
            test_count: (total as f64 * DEFAULT_TEST_FRACTION).round() as usize,
            val_count: (total as f64 * DEFAULT_VAL_FRACTION).round() as usize,
            stratified: true,
            seed,
        }
    }
}

/// Splits `count` draws over classes of sizes `sizes` by largest remainder.
/// Ties in the fractional part go to the earlier class.
fn apportion(count: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut shares: Vec<usize> = sizes.iter().map(|&s| count * s / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // remainder of count·s/total, compared exactly in integers
    order.sort_by_key(|&i| std::cmp::Reverse(count * sizes[i] % total));
    let mut left = count - shares.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if shares[i] < sizes[i] {
            shares[i] += 1;
            left -= 1;
        }
    }
    shares
}

/// Assigns every record to train, val or test.
///
/// Test records are drawn first and validation records from the remainder.
/// With `stratified`, each class contributes in proportion to its size.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    let total = manifest.len();
    if spec.test_count + spec.val_count >= total {
        return Err(Error::Dataset(format!(
            "cannot hold out {} test and {} validation records from {total}; at least one must remain for training",
            spec.test_count, spec.val_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        Label::ALL.iter().map(|&l| (0..total).filter(|&i| manifest.records[i].label == l).collect()).collect()
    } else {
        vec![(0..total).collect()]
    };
    let mut pools: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            g.shuffle(&mut rng);
            g
        })
        .collect();

    let mut records = manifest.records.clone();
    for r in &mut records {
        r.split = Split::Train;
    }
    for (split, count) in [(Split::Test, spec.test_count), (Split::Val, spec.val_count)] {
        let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
        let shares = apportion(count, &sizes);
        for (pool, share) in pools.iter_mut().zip(shares) {
            for i in pool.drain(..share) {
                records[i].split = split;
            }
        }
    }
    Ok(DatasetManifest { records })
}

/// A preprocessed batch: inputs `(B, 3, H, W)` and class indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Record indices the batch was built from.
    pub indices: Vec<usize>,
}

/// Batch order for one pass over `indices`: shuffled by a generator seeded
/// from `(seed, epoch)` when `shuffle`, otherwise as given. A final partial
/// batch is kept.
pub fn batch_order(indices: &[usize], batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Dataset("cannot batch an empty split".into()));
    }
    let mut order = indices.to_vec();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM, epoch]));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Images held in memory at the pipeline's resize extent, ready for batching.
///
/// Training augmentation for record `i` in epoch `e` draws from a generator
/// seeded by `(seed, i, e)`, so batches do not depend on how preprocessing
/// is scheduled across threads.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    records: Vec<Record>,
    images: Vec<ImageBuffer>,
    pipeline: Pipeline,
}

impl ImageDataset {
    /// Decodes and resizes every record of `manifest`.
    pub fn load(manifest: &DatasetManifest, pipeline: Pipeline) -> Result<Self> {
        pipeline.validate()?;
        let images = manifest
            .records
            .par_iter()
            .map(|r| ImageBuffer::open(&r.path).and_then(|img| resize_bilinear(&img, pipeline.resize, pipeline.resize)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageDataset { records: manifest.records.clone(), images, pipeline })
    }

    /// Builds a dataset from decoded images, for synthetic or in-memory data.
    pub fn from_images(items: Vec<(ImageBuffer, Label, Split)>, pipeline: Pipeline) -> Result<Self> {
        pipeline.validate()?;
        let mut records = Vec::with_capacity(items.len());
        let mut images = Vec::with_capacity(items.len());
        for (i, (img, label, split)) in items.into_iter().enumerate() {
            records.push(Record { path: PathBuf::from(format!("<memory>/{i}")), label, split });
            images.push(resize_bilinear(&img, pipeline.resize, pipeline.resize)?);
        }
        Ok(ImageDataset { records, images, pipeline })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.indices(split).into_iter().map(|i| self.records[i].label.index()).collect()
    }

    /// Preprocesses the listed records into one batch, with training
    /// augmentation when `augment`.
    pub fn batch(&self, indices: &[usize], augment: bool, seed: u64, epoch: u64) -> Result<Batch> {
        let crop = self.pipeline.crop;
        let tensors = indices
            .par_iter()
            .map(|&i| {
                let img = self.images.get(i).ok_or_else(|| Error::Dataset(format!("record index {i} out of range")))?;
                if augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[AUGMENT_STREAM, i as u64, epoch]));
                    self.pipeline.train_resized(img, &mut rng)
                } else {
                    self.pipeline.eval_resized(img)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(indices.len() * 3 * crop * crop);
        for t in &tensors {
            data.extend_from_slice(t.tensor().data());
        }
        let inputs = Tensor::from_vec(data, &[indices.len(), 3, crop, crop])?;
        let labels = indices.iter().map(|&i| self.records[i].label.index()).collect();
        Ok(Batch { inputs, labels, indices: indices.to_vec() })
    }

    /// Batches for one epoch over `split`: the train split is reshuffled per
    /// epoch and augmented, other splits keep manifest order and use the
    /// evaluation transform.
    pub fn epoch_batches(&self, split: Split, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
        let train = split == Split::Train;
        let plan = batch_order(&self.indices(split), batch_size, train, seed, epoch)?;
        Ok(BatchIter { dataset: self, plan: plan.into_iter(), augment: train, seed, epoch })
    }

    /// Batches over `split` in manifest order with the evaluation transform.
    pub fn eval_batches(&self, split: Split, batch_size: usize) -> Result<BatchIter<'_>> {
        let plan = batch_order(&self.indices(split), batch_size, false, 0, 0)?;
        Ok(BatchIter { dataset: self, plan: plan.into_iter(), augment: false, seed: 0, epoch: 0 })
    }
}

/// Lazily preprocessed batches in their planned order.
pub struct BatchIter<'a> {
    dataset: &'a ImageDataset,
    plan: std::vec::IntoIter<Vec<usize>>,
    augment: bool,
    seed: u64,
    epoch: u64,
}

impl BatchIter<'_> {
    /// Batches not yet produced.
    pub fn remaining(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.plan.next()?;
        Some(self.dataset.batch(&indices, self.augment, self.seed, self.epoch))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.plan.len(), Some(self.plan.len()))
    }
}
