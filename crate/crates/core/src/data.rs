//! Labeled grayscale image datasets: IDX ingestion, the procedural shapes
//! set, resampling and stratified splits.
//!
//! Pixels are stored as `(N, 1, H, W)` in `[-1, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::Tensor;
use thiserror::Error;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Names of the procedural shape classes, in label order.
pub const SHAPE_CLASSES: [&str; 6] = ["filled_square", "hollow_square", "disc", "ring", "cross", "diagonal_stripe"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format: {file} file has magic {found:02x?}, expected {expected:#010x}")]
    Format {
        file: &'static str,
        found: Vec<u8>,
        expected: u32,
    },
    #[error("length: {file} file needs {expected} bytes, has {actual}")]
    Length {
        file: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("consistency: image file holds {images} items but label file holds {labels}")]
    Consistency { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(DataError::Invalid(format!("images must be (N, 1, H, W), got {shape:?}")));
        }
        if shape[0] == 0 || shape[0] != labels.len() {
            return Err(DataError::Invalid(format!("{} images for {} labels", shape[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!("label {bad} >= class count {}", class_names.len())));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel outside [-1, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Image `i` as a `(1, 1, H, W)` batch.
    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let px = h * w;
        Tensor::new(vec![1, 1, h, w], self.images.data()[i * px..(i + 1) * px].to_vec())
            .expect("extent matches")
    }

    /// Images at `indices` stacked as `(len, 1, H, W)`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let px = h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * px..(i + 1) * px]);
        }
        Tensor::new(vec![indices.len(), 1, h, w], data).expect("extent matches")
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        Self::new(
            self.batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
            split,
        )
    }

    fn with_images(&self, images: Tensor) -> Result<Self> {
        Self::new(images, self.labels.clone(), self.class_names.clone(), self.split)
    }
}

fn read_u32(bytes: &[u8], at: usize, file: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Length {
            file,
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, file: &'static str) -> Result<()> {
    let found = read_u32(bytes, 0, file)?;
    if found != expected {
        return Err(DataError::Format {
            file,
            found: bytes[..4].to_vec(),
            expected,
        });
    }
    Ok(())
}

#[inline]
fn byte_to_pixel(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

#[inline]
fn pixel_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Parses a big-endian IDX image file (`u8`, 3 dims) and its label file.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    check_magic(image_bytes, IDX_IMAGE_MAGIC, "image")?;
    check_magic(label_bytes, IDX_LABEL_MAGIC, "label")?;
    let n = read_u32(image_bytes, 4, "image")? as usize;
    let h = read_u32(image_bytes, 8, "image")? as usize;
    let w = read_u32(image_bytes, 12, "image")? as usize;
    let n_labels = read_u32(label_bytes, 4, "label")? as usize;

    let expected = 16 + n * h * w;
    if image_bytes.len() < expected {
        return Err(DataError::Length {
            file: "image",
            expected,
            actual: image_bytes.len(),
        });
    }
    if label_bytes.len() < 8 + n_labels {
        return Err(DataError::Length {
            file: "label",
            expected: 8 + n_labels,
            actual: label_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::Consistency {
            images: n,
            labels: n_labels,
        });
    }

    let pixels: Vec<f32> = image_bytes[16..expected].iter().map(|&b| byte_to_pixel(b)).collect();
    let labels: Vec<usize> = label_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let images = Tensor::new(vec![n, 1, h, w], pixels).map_err(|e| DataError::Invalid(e.to_string()))?;
    LabeledDataset::new(images, labels, (0..classes).map(|c| c.to_string()).collect(), Split::Train)
}

/// Inverse of [`parse_idx`]; pixels are quantized back to bytes.
pub fn serialize_idx(dataset: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.images.numel());
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(dataset.height() as u32).to_be_bytes());
    images.extend_from_slice(&(dataset.width() as u32).to_be_bytes());
    images.extend(dataset.images.data().iter().map(|&v| pixel_to_byte(v)));

    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    (images, labels)
}

pub fn load_idx_files(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    parse_idx(&read(images)?, &read(labels)?)
}

/// Procedural six-class shapes dataset with per-sample jitter.
///
/// Classes follow [`SHAPE_CLASSES`]; each class gets `per_class` samples and
/// the result is deterministic in `seed`.
pub fn synth_shapes(seed: u64, per_class: usize, resolution: usize) -> Result<LabeledDataset> {
    if resolution < 8 {
        return Err(DataError::Invalid(format!("resolution must be >= 8, got {resolution}")));
    }
    if per_class == 0 {
        return Err(DataError::Invalid("per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = resolution as f32;
    let px = resolution * resolution;
    let classes = SHAPE_CLASSES.len();
    let mut pixels = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for class in 0..classes {
            let cx = r / 2.0 + rng.random_range(-r / 8.0..=r / 8.0);
            let cy = r / 2.0 + rng.random_range(-r / 8.0..=r / 8.0);
            let size = rng.random_range(0.22 * r..=0.34 * r);
            let intensity = rng.random_range(0.3f32..=1.0);
            let stroke = (0.3 * size).max(1.5);
            let flip = rng.random_bool(0.5);
            let inside = |u: f32, v: f32| -> bool {
                match class {
                    0 => u.abs() <= size && v.abs() <= size,
                    1 => {
                        let m = u.abs().max(v.abs());
                        m <= size && m > size - stroke
                    }
                    2 => u.hypot(v) <= size,
                    3 => {
                        let d = u.hypot(v);
                        d <= size && d > size - stroke
                    }
                    4 => (u.abs() <= stroke / 2.0 && v.abs() <= size) || (v.abs() <= stroke / 2.0 && u.abs() <= size),
                    _ => {
                        let v = if flip { -v } else { v };
                        let across = (u - v) / std::f32::consts::SQRT_2;
                        let along = (u + v) / std::f32::consts::SQRT_2;
                        across.abs() <= stroke / 2.0 && along.abs() <= size * 1.3
                    }
                }
            };
            // 4x4 supersampling for anti-aliased edges
            for y in 0..resolution {
                for x in 0..resolution {
                    let mut hits = 0;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            let u = x as f32 + (sx as f32 + 0.5) / 4.0 - cx;
                            let v = y as f32 + (sy as f32 + 0.5) / 4.0 - cy;
                            hits += inside(u, v) as u32;
                        }
                    }
                    let coverage = hits as f32 / 16.0;
                    pixels.push(-1.0 + (intensity + 1.0) * coverage);
                }
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 1, resolution, resolution], pixels).map_err(|e| DataError::Invalid(e.to_string()))?;
    LabeledDataset::new(images, labels, SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(), Split::Train)
}

/// Box-filter average pooling to `target × target`.
pub fn downscale(dataset: &LabeledDataset, target: usize) -> Result<LabeledDataset> {
    let (h, w) = (dataset.height(), dataset.width());
    if target == 0 || h % target != 0 || w % target != 0 {
        return Err(DataError::Invalid(format!("cannot average-pool {h}x{w} to {target}x{target}")));
    }
    let (fy, fx) = (h / target, w / target);
    let n = dataset.len();
    let src = dataset.images.data();
    let mut out = Vec::with_capacity(n * target * target);
    for i in 0..n {
        let img = &src[i * h * w..(i + 1) * h * w];
        for ty in 0..target {
            for tx in 0..target {
                let mut acc = 0.0f64;
                for y in ty * fy..(ty + 1) * fy {
                    for x in tx * fx..(tx + 1) * fx {
                        acc += img[y * w + x] as f64;
                    }
                }
                out.push((acc / (fy * fx) as f64) as f32);
            }
        }
    }
    let images = Tensor::new(vec![n, 1, target, target], out).map_err(|e| DataError::Invalid(e.to_string()))?;
    dataset.with_images(images)
}

pub fn center_crop(dataset: &LabeledDataset, size: usize) -> Result<LabeledDataset> {
    let (h, w) = (dataset.height(), dataset.width());
    if size == 0 || size > h || size > w {
        return Err(DataError::Invalid(format!("cannot crop {h}x{w} to {size}x{size}")));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let src = dataset.images.data();
    let mut out = Vec::with_capacity(dataset.len() * size * size);
    for i in 0..dataset.len() {
        for y in 0..size {
            let row = i * h * w + (oy + y) * w + ox;
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    let images = Tensor::new(vec![dataset.len(), 1, size, size], out).map_err(|e| DataError::Invalid(e.to_string()))?;
    dataset.with_images(images)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(dataset: &LabeledDataset, size: usize) -> Result<LabeledDataset> {
    let (h, w) = (dataset.height(), dataset.width());
    if size == 0 {
        return Err(DataError::Invalid("target size must be positive".into()));
    }
    let coord = |o: usize, src: usize| -> (usize, usize, f32) {
        let p = ((o as f32 + 0.5) * src as f32 / size as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(src - 1), p - lo as f32)
    };
    let src = dataset.images.data();
    let mut out = Vec::with_capacity(dataset.len() * size * size);
    for i in 0..dataset.len() {
        let img = &src[i * h * w..(i + 1) * h * w];
        for y in 0..size {
            let (y0, y1, fy) = coord(y, h);
            for x in 0..size {
                let (x0, x1, fx) = coord(x, w);
                let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
                let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
            }
        }
    }
    let images = Tensor::new(vec![dataset.len(), 1, size, size], out).map_err(|e| DataError::Invalid(e.to_string()))?;
    dataset.with_images(images)
}

/// MNIST working resolution: center-crop 28 → 24, then bilinear 24 → 16.
pub fn prepare_mnist(dataset: &LabeledDataset) -> Result<LabeledDataset> {
    let cropped = if dataset.height() > 24 { center_crop(dataset, 24)? } else { dataset.clone() };
    resize_bilinear(&cropped, 16)
}

/// Disjoint, label-stratified train/val split.
///
/// Each class contributes `round(count · val_fraction)` samples to val, so
/// per-class val counts are within one of proportional.
pub fn stratified_split(dataset: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::Invalid(format!("val_fraction must lie in [0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..dataset.num_classes() {
        let mut idx = dataset.indices_of_class(class);
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Invalid("split produced an empty partition".into()));
    }
    Ok((dataset.subset(&train, Split::Train)?, dataset.subset(&val, Split::Val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_file(n: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn image_file(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn handcrafted_label_file() {
        let labels = label_file(2, &[3, 7]);
        assert_eq!(labels.len(), 10);
        let images = image_file(2, 1, 1, &[0, 0]);
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn pixel_map_endpoints() {
        let ds = parse_idx(&image_file(1, 2, 2, &[0, 255, 0, 255]), &label_file(1, &[0])).unwrap();
        assert_eq!(ds.images().data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(ds.images().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bad = label_file(1, &[0]);
        bad[3] = 0x02;
        let err = parse_idx(&image_file(1, 1, 1, &[0]), &bad).unwrap_err();
        match err {
            DataError::Format { found, .. } => assert_eq!(found, vec![0, 0, 8, 2]),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn truncated_and_inconsistent_files() {
        let err = parse_idx(&image_file(2, 2, 2, &[0; 7]), &label_file(2, &[0, 1])).unwrap_err();
        assert!(matches!(err, DataError::Length { file: "image", expected: 24, actual: 23 }));
        let err = parse_idx(&image_file(2, 1, 1, &[0, 0]), &label_file(3, &[0, 1, 2])).unwrap_err();
        assert!(matches!(err, DataError::Consistency { images: 2, labels: 3 }));
    }

    #[test]
    fn shapes_are_deterministic_and_counted() {
        let a = synth_shapes(11, 10, 16).unwrap();
        let b = synth_shapes(11, 10, 16).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a.num_classes(), 6);
        let bits = |d: &LabeledDataset| d.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        assert_ne!(bits(&a), bits(&synth_shapes(12, 10, 16).unwrap()));
    }

    #[test]
    fn shapes_reject_bad_params() {
        assert!(synth_shapes(0, 1, 7).is_err());
        assert!(synth_shapes(0, 0, 16).is_err());
    }

    #[test]
    fn filled_square_is_brighter_than_hollow() {
        // direct computation over 1000 samples per class
        let ds = synth_shapes(5, 1000, 16).unwrap();
        let mean_of = |class: usize| {
            let idx = ds.indices_of_class(class);
            let px = 256;
            let total: f64 = idx
                .iter()
                .flat_map(|&i| &ds.images().data()[i * px..(i + 1) * px])
                .map(|&v| v as f64)
                .sum();
            total / (idx.len() * px) as f64
        };
        assert!(mean_of(0) > mean_of(1));
    }

    fn tiny(images: Vec<f32>, side: usize) -> LabeledDataset {
        let n = images.len() / (side * side);
        LabeledDataset::new(
            Tensor::new(vec![n, 1, side, side], images).unwrap(),
            vec![0; n],
            vec!["a".into()],
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn downscale_examples() {
        let constant = downscale(&tiny(vec![0.25; 16], 4), 2).unwrap();
        assert_eq!(constant.images().data(), &[0.25; 4]);
        let block = downscale(&tiny(vec![-1., -1., 1., 1.], 2), 1).unwrap();
        assert_eq!(block.images().data(), &[0.0]);
        let checker: Vec<f32> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let pooled = downscale(&tiny(checker, 4), 2).unwrap();
        assert_eq!(pooled.images().data(), &[0.0; 4]);
        assert!(downscale(&tiny(vec![0.0; 9], 3), 2).is_err());
    }

    #[test]
    fn mnist_preparation_reaches_16() {
        let ds = tiny((0..28 * 28).map(|i| ((i % 7) as f32 / 3.0 - 1.0).clamp(-1.0, 1.0)).collect(), 28);
        let out = prepare_mnist(&ds).unwrap();
        assert_eq!(out.images().shape(), &[1, 1, 16, 16]);
        assert!(out.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let constant = resize_bilinear(&tiny(vec![0.5; 24 * 24], 24), 16).unwrap();
        assert!(constant.images().data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let ds = synth_shapes(3, 17, 8).unwrap();
        let (train, val) = stratified_split(&ds, 0.25, 9).unwrap();
        assert_eq!(train.len() + val.len(), ds.len());
        for (c, &count) in val.class_counts().iter().enumerate() {
            let proportional = ds.class_counts()[c] as f64 * 0.25;
            assert!((count as f64 - proportional).abs() <= 1.0);
        }
        assert_eq!(val.split(), Split::Val);
    }
}
