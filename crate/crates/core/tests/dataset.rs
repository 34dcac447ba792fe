mod common;

use std::fs;

use fungnet::dataset::{ingest, split, DatasetManifest, ImageDataset, Label, Split, SplitSpec};
use fungnet::preprocess::Pipeline;

#[test]
fn ingest_labels_by_directory_and_skips_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    common::images::write_corpus(dir.path(), 4, 5, 16);
    fs::write(dir.path().join("poisonous/broken.jpg"), b"not really a jpeg").unwrap();
    fs::write(dir.path().join("edible/notes.txt"), b"field notes").unwrap();

    let got = ingest(dir.path()).unwrap();
    assert_eq!(got.manifest.len(), 9);
    assert_eq!(got.manifest.fingerprint().poisonous, 5);
    assert_eq!(got.skipped.len(), 2);
    assert!(got.manifest.records().iter().all(|r| r.split == Split::Unassigned));
    assert!(got.manifest.records().iter().filter(|r| r.label == Label::Poisonous).all(|r| r.path.starts_with(dir.path().join("poisonous"))));
}

#[test]
fn one_unreadable_among_ten() {
    let dir = tempfile::tempdir().unwrap();
    common::images::write_corpus(dir.path(), 4, 5, 8);
    fs::write(dir.path().join("edible/zz.png"), b"\x89PNG truncated").unwrap();
    let got = ingest(dir.path()).unwrap();
    assert_eq!(got.manifest.len(), 9);
    assert_eq!(got.skipped.len(), 1);
}

#[test]
fn ingest_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ingest(dir.path()).unwrap_err().to_string().contains("edible"));
    fs::create_dir_all(dir.path().join("edible")).unwrap();
    fs::create_dir_all(dir.path().join("poisonous")).unwrap();
    assert!(ingest(dir.path()).is_err());
}

#[test]
fn manifest_file_round_trip_and_loading() {
    let dir = tempfile::tempdir().unwrap();
    common::images::write_corpus(dir.path(), 6, 6, 20);
    let m = ingest(dir.path()).unwrap().manifest;
    let m = split(&m, &SplitSpec { test_count: 2, val_count: 2, stratified: true, seed: 1 }).unwrap();
    let path = dir.path().join("out/manifest.csv");
    m.write_csv(&path).unwrap();
    let back = DatasetManifest::read_csv(&path).unwrap();
    assert_eq!(back, m);

    let ds = ImageDataset::load(&back, Pipeline::default()).unwrap();
    let batches: Vec<_> = ds.eval_batches(Split::Test, 4).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].inputs.shape(), &[2, 3, 224, 224]);
}

#[test]
fn bad_manifest_header_rejected() {
    let err = DatasetManifest::from_csv_reader(&b"file,class,split\na.png,edible,train\n"[..]).unwrap_err();
    assert!(err.to_string().contains("path,label,split"));
}
