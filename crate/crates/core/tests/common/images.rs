//! Synthetic image corpora written to disk.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

/// Writes a `size×size` PNG whose color depends on `class` and `i`.
pub fn write_png(path: &Path, size: u32, class: usize, i: usize) {
    let img = RgbImage::from_fn(size, size, |x, y| {
        let base = if class == 1 { 200u8 } else { 40 };
        Rgb([base.wrapping_add((i * 7) as u8), ((x * 5 + y) % 256) as u8, (y * 3 % 256) as u8])
    });
    img.save(path).unwrap();
}

/// Creates `root/edible` and `root/poisonous` with the given image counts.
pub fn write_corpus(root: &Path, edible: usize, poisonous: usize, size: u32) {
    for (class, name, n) in [(0, "edible", edible), (1, "poisonous", poisonous)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            write_png(&dir.join(format!("{name}_{i:03}.png")), size, class, i);
        }
    }
}

/// In-memory `size×size` images: poisonous ones are reddish, edible ones
/// bluish, with per-image texture. `counts` gives `(split, images per class)`.
pub fn synthetic(counts: &[(fungnet::dataset::Split, usize)], size: usize) -> Vec<(fungnet::preprocess::ImageBuffer, fungnet::dataset::Label, fungnet::dataset::Split)> {
    use fungnet::dataset::Label;
    let mut out = Vec::new();
    let mut k = 0usize;
    for &(split, n) in counts {
        for _ in 0..n {
            for label in Label::ALL {
                k += 1;
                let img = fungnet::preprocess::ImageBuffer::from_fn(size, size, |r, c| {
                    let t = ((r * 3 + c * 5 + k * 11) % 64) as u8;
                    match label {
                        Label::Poisonous => [190 + t / 2, 40 + t, 30],
                        Label::Edible => [30, 60 + t, 170 + t / 2],
                    }
                });
                out.push((img, label, split));
            }
        }
    }
    out
}
