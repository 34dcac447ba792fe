//! Image pipeline: bilinear resize, crop, horizontal flip and channelwise
//! normalization into `(3, H, W)` float tensors.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `H×W×3` RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Length { expected: height * width * 3, actual: pixels.len() });
        }
        Ok(ImageBuffer { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        ImageBuffer { height, width, pixels }
    }

    /// Decodes a PNG, JPEG or BMP file to RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = decoded.into_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::new(h as usize, w as usize, rgb.into_raw())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// A `(3, H, W)` float tensor in R, G, B channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Per-channel `(mean, std)` pairs applied to pixels scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationConstants {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizationConstants {
    /// The ImageNet statistics.
    fn default() -> Self {
        NormalizationConstants { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl NormalizationConstants {
    pub fn validate(&self) -> Result<()> {
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            if !(s > 0.0 && s.is_finite() && m.is_finite()) {
                return Err(Error::Config(format!("normalization channel {c} needs a finite mean and std > 0, got ({m}, {s})")));
            }
        }
        Ok(())
    }
}

fn check_extent(h: usize, w: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("{what} must be at least 1×1, got {h}×{w}")));
    }
    Ok(())
}

/// Source coordinate and weight for each output index along one axis.
fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resample to `out_h × out_w` without preserving aspect ratio.
///
/// Output pixel `d` samples source coordinate `(d + 0.5)·in/out − 0.5`,
/// clamped to the image, so a same-size resize is the identity.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    check_extent(img.height, img.width, "resize input")?;
    check_extent(out_h, out_w, "resize output")?;
    let rows = sample_axis(img.height, out_h);
    let cols = sample_axis(img.width, out_w);
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let (a, b, c, d) = (img.pixel(r0, c0), img.pixel(r0, c1), img.pixel(r1, c0), img.pixel(r1, c1));
            for ch in 0..3 {
                let top = a[ch] as f64 + (b[ch] as f64 - a[ch] as f64) * fx;
                let bottom = c[ch] as f64 + (d[ch] as f64 - c[ch] as f64) * fx;
                let v = top + (bottom - top) * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(ImageBuffer { height: out_h, width: out_w, pixels })
}

/// Copies the `out_h × out_w` window whose top-left corner is `(top, left)`.
pub fn crop_at(img: &ImageBuffer, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if top + out_h > img.height || left + out_w > img.width {
        return Err(Error::Shape(format!(
            "cannot crop {out_h}×{out_w} at ({top}, {left}) from a {}×{} image",
            img.height, img.width
        )));
    }
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    for r in top..top + out_h {
        let start = (r * img.width + left) * 3;
        pixels.extend_from_slice(&img.pixels[start..start + out_w * 3]);
    }
    Ok(ImageBuffer { height: out_h, width: out_w, pixels })
}

fn check_crop(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<()> {
    if out_h > img.height || out_w > img.width {
        return Err(Error::Shape(format!("crop {out_h}×{out_w} is larger than the {}×{} image", img.height, img.width)));
    }
    check_extent(out_h, out_w, "crop")
}

/// Offsets of a centered crop: `(⌊(H−h)/2⌋, ⌊(W−w)/2⌋)`.
pub fn center_offsets(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    check_crop(img, out_h, out_w)?;
    Ok(((img.height - out_h) / 2, (img.width - out_w) / 2))
}

/// Offsets drawn uniformly from `[0, H−h] × [0, W−w]`, row first.
pub fn random_offsets<R: Rng + ?Sized>(img: &ImageBuffer, out_h: usize, out_w: usize, rng: &mut R) -> Result<(usize, usize)> {
    check_crop(img, out_h, out_w)?;
    let top = rng.gen_range(0..=img.height - out_h);
    let left = rng.gen_range(0..=img.width - out_w);
    Ok((top, left))
}

pub fn center_crop(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    let (top, left) = center_offsets(img, out_h, out_w)?;
    crop_at(img, top, left, out_h, out_w)
}

pub fn random_crop<R: Rng + ?Sized>(img: &ImageBuffer, out_h: usize, out_w: usize, rng: &mut R) -> Result<ImageBuffer> {
    let (top, left) = random_offsets(img, out_h, out_w, rng)?;
    crop_at(img, top, left, out_h, out_w)
}

/// Mirrors each row: column `j` moves to `W−1−j`.
pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks_exact(img.width * 3) {
        for px in row.chunks_exact(3).rev() {
            pixels.extend_from_slice(px);
        }
    }
    ImageBuffer { height: img.height, width: img.width, pixels }
}

/// `(pixel/255 − mean)/std` per channel, laid out `(3, H, W)`.
pub fn normalize(img: &ImageBuffer, c: &NormalizationConstants) -> ImageTensor {
    let unit: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    normalize_unit(&unit, img.height, img.width, c)
}

/// Normalizes interleaved `H×W×3` values already scaled to `[0, 1]`.
pub fn normalize_unit(unit: &[f64], height: usize, width: usize, c: &NormalizationConstants) -> ImageTensor {
    assert_eq!(unit.len(), height * width * 3, "normalize_unit needs H·W·3 values");
    let plane = height * width;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in unit.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = ((px[ch] - c.mean[ch]) / c.std[ch]) as f32;
        }
    }
    ImageTensor(Tensor::from_vec(out, &[3, height, width]).expect("length matches"))
}

/// Inverse of [`normalize`]: interleaved `H×W×3` values in pixel/255 units.
pub fn denormalize(t: &ImageTensor, c: &NormalizationConstants) -> Vec<f64> {
    let &[_, h, w] = t.shape() else { unreachable!("image tensors are (3, H, W)") };
    let plane = h * w;
    let data = t.tensor().data();
    let mut out = vec![0f64; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            out[i * 3 + ch] = data[ch * plane + i] as f64 * c.std[ch] + c.mean[ch];
        }
    }
    out
}

/// Random choices made for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Resize, crop and normalization settings shared by the train and eval paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pipeline {
    pub resize: usize,
    pub crop: usize,
    pub constants: NormalizationConstants,
    pub flip_probability: f64,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline { resize: 256, crop: 224, constants: NormalizationConstants::default(), flip_probability: 0.5 }
    }
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be between 1 and the resize extent {}", self.crop, self.resize)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!("flip probability {} is outside [0, 1]", self.flip_probability)));
        }
        self.constants.validate()
    }

    /// Draws crop offsets, then the flip decision.
    pub fn draw_augmentation<R: Rng + ?Sized>(&self, rng: &mut R) -> Augmentation {
        let slack = self.resize - self.crop;
        let top = rng.gen_range(0..=slack);
        let left = rng.gen_range(0..=slack);
        let flip = rng.gen_bool(self.flip_probability);
        Augmentation { top, left, flip }
    }

    /// Resize → random crop → random horizontal flip → normalize.
    pub fn train<R: Rng + ?Sized>(&self, img: &ImageBuffer, rng: &mut R) -> Result<ImageTensor> {
        let resized = resize_bilinear(img, self.resize, self.resize)?;
        self.train_resized(&resized, rng)
    }

    /// The training path for an image already at `resize × resize`.
    pub fn train_resized<R: Rng + ?Sized>(&self, resized: &ImageBuffer, rng: &mut R) -> Result<ImageTensor> {
        self.check_resized(resized)?;
        let aug = self.draw_augmentation(rng);
        let mut cropped = crop_at(resized, aug.top, aug.left, self.crop, self.crop)?;
        if aug.flip {
            cropped = hflip(&cropped);
        }
        Ok(normalize(&cropped, &self.constants))
    }

    /// Resize → center crop → normalize.
    pub fn eval(&self, img: &ImageBuffer) -> Result<ImageTensor> {
        let resized = resize_bilinear(img, self.resize, self.resize)?;
        self.eval_resized(&resized)
    }

    pub fn eval_resized(&self, resized: &ImageBuffer) -> Result<ImageTensor> {
        self.check_resized(resized)?;
        let cropped = center_crop(resized, self.crop, self.crop)?;
        Ok(normalize(&cropped, &self.constants))
    }

    fn check_resized(&self, img: &ImageBuffer) -> Result<()> {
        if img.height != self.resize || img.width != self.resize {
            return Err(Error::Shape(format!(
                "expected a {0}×{0} image, got {1}×{2}",
                self.resize, img.height, img.width
            )));
        }
        Ok(())
    }
}

/// The default training transform producing a `(3, 224, 224)` tensor.
pub fn preprocess_train<R: Rng + ?Sized>(img: &ImageBuffer, rng: &mut R) -> Result<ImageTensor> {
    Pipeline::default().train(img, rng)
}

/// The default evaluation transform producing a `(3, 224, 224)` tensor.
pub fn preprocess_eval(img: &ImageBuffer) -> Result<ImageTensor> {
    Pipeline::default().eval(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, |_, _| rng.gen())
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = noise(256, 256, 1);
        assert_eq!(resize_bilinear(&img, 256, 256).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageBuffer::from_fn(2, 2, |_, _| [7, 100, 250]);
        let out = resize_bilinear(&img, 256, 256).unwrap();
        assert!(out.pixels().chunks(3).all(|p| p == [7, 100, 250]));
    }

    #[test]
    fn upsampling_interpolates_between_neighbors() {
        // 1×2 → 1×4: sources at −0.25, 0.25, 0.75, 1.25 → clamp, ¼, ¾, clamp
        let img = ImageBuffer::new(1, 2, vec![0, 0, 0, 200, 200, 200]).unwrap();
        let out = resize_bilinear(&img, 1, 4).unwrap();
        let red: Vec<u8> = out.pixels().chunks(3).map(|p| p[0]).collect();
        assert_eq!(red, vec![0, 50, 150, 200]);
    }

    #[test]
    fn zero_sized_input_rejected() {
        let img = ImageBuffer::new(0, 4, vec![]).unwrap();
        assert!(resize_bilinear(&img, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn resize_stays_within_input_range(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, seed in 0u64..1000) {
            let img = noise(h, w, seed);
            let out = resize_bilinear(&img, oh, ow).unwrap();
            for ch in 0..3 {
                let vals = img.pixels().iter().skip(ch).step_by(3);
                let (lo, hi) = vals.fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                prop_assert!(out.pixels().iter().skip(ch).step_by(3).all(|&v| lo <= v && v <= hi));
            }
        }
    }

    #[test]
    fn center_crop_offsets() {
        let img = noise(256, 256, 2);
        assert_eq!(center_offsets(&img, 224, 224).unwrap(), (16, 16));
        let c = center_crop(&img, 224, 224).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(16, 16));
        assert_eq!(c.pixel(223, 223), img.pixel(239, 239));
    }

    #[test]
    fn center_crop_at_target_size_is_identity() {
        let img = noise(224, 224, 3);
        assert_eq!(center_crop(&img, 224, 224).unwrap(), img);
    }

    #[test]
    fn random_offsets_bounded_and_seeded() {
        let img = noise(256, 256, 4);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| random_offsets(&img, 224, 224, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(9);
        assert!(a.iter().all(|&(t, l)| t <= 32 && l <= 32));
        assert_eq!(a, draw(9));
    }

    #[test]
    fn oversized_crop_names_both_sizes() {
        let img = noise(200, 200, 5);
        let err = center_crop(&img, 224, 224).unwrap_err().to_string();
        assert!(err.contains("224×224") && err.contains("200×200"), "{err}");
    }

    #[test]
    fn hflip_cases() {
        let img = ImageBuffer::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(hflip(&img).pixels(), &[4, 5, 6, 1, 2, 3]);
        let any = noise(5, 7, 6);
        assert_eq!(hflip(&hflip(&any)), any);
        let sym = ImageBuffer::from_fn(3, 4, |r, c| [(r * 10 + c.min(3 - c)) as u8; 3]);
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn normalization_constants() {
        let c = NormalizationConstants::default();
        let black = normalize(&ImageBuffer::from_fn(1, 1, |_, _| [0, 255, 0]), &c);
        let v = black.tensor().data();
        assert!((v[0] as f64 - (0.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((v[0] as f64 + 2.117904).abs() < 1e-5);
        assert!((v[1] as f64 - 2.428571).abs() < 1e-5);
        let at_mean = normalize_unit(&[0.485, 0.456, 0.406], 1, 1, &c);
        assert!(at_mean.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_layout_and_inverse() {
        let c = NormalizationConstants::default();
        let img = noise(4, 5, 7);
        let t = normalize(&img, &c);
        assert_eq!(t.shape(), &[3, 4, 5]);
        let back = denormalize(&t, &c);
        for (b, &p) in back.iter().zip(img.pixels()) {
            assert!((b - p as f64 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pipelines_produce_fixed_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (h, w) in [(300, 180), (256, 256), (31, 500)] {
            let img = noise(h, w, 9);
            let e = preprocess_eval(&img).unwrap();
            assert_eq!(e.shape(), &[3, 224, 224]);
            assert!(e.tensor().all_finite());
            assert_eq!(preprocess_eval(&img).unwrap(), e);
            assert_eq!(preprocess_train(&img, &mut rng).unwrap().shape(), &[3, 224, 224]);
        }
    }

    #[test]
    fn train_pipeline_reproducible_and_matches_plan() {
        let img = noise(256, 256, 10);
        let p = Pipeline::default();
        let a = p.train(&img, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = p.train(&img, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));

        let aug = p.draw_augmentation(&mut ChaCha8Rng::seed_from_u64(11));
        let mut manual = crop_at(&img, aug.top, aug.left, 224, 224).unwrap();
        if aug.flip {
            manual = hflip(&manual);
        }
        assert_eq!(normalize(&manual, &p.constants), a);
    }

    #[test]
    fn flip_frequency_near_half() {
        let p = Pipeline::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flips = (0..10_000).filter(|_| p.draw_augmentation(&mut rng).flip).count();
        let freq = flips as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }
}
