//! Dataset ingestion, synthetic data generation, normalization, and the
//! translation/scale perturbation transforms.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// CIFAR-style binary record: 1 label byte + 3 color planes of 32*32 bytes.
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// The perturbation percentages studied alongside the identity level.
pub const PERTURB_GRID: [u32; 4] = [15, 30, 45, 60];

/// Labeled image collection. Images are `[M, C, H, W]`, values in [0, 1]
/// until normalized.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: &str) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!(
                "dataset images must be [M, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {l} at index {i} out of range for {class_count} classes"
            )));
        }
        Ok(Self { images, labels, class_count, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width)
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.geometry();
        let stride = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * stride..(i + 1) * stride].to_vec())
            .expect("image slice")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }
}

/// Load the standard six-file binary CIFAR-10 layout from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        read_cifar_batch(&path, &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_batch(&dir.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    let train = Dataset::new(
        Tensor::new(vec![train_labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], train_images)?,
        train_labels,
        CIFAR_CLASSES,
        "train",
    )?;
    let test = Dataset::new(
        Tensor::new(vec![test_labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], test_images)?,
        test_labels,
        CIFAR_CLASSES,
        "test",
    )?;
    Ok((train, test))
}

fn read_cifar_batch(path: &Path, images: &mut Vec<Real>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(format!(
            "{}: length {} is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(format!(
                "{}: label byte {label} outside 0..{CIFAR_CLASSES}",
                path.display()
            )));
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as Real / 255.0));
    }
    Ok(())
}

/// Write a dataset back out in the CIFAR binary record format.
pub fn write_cifar_batch(ds: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = ds.geometry();
    if (c, h, w) != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::invalid(format!(
            "CIFAR record format requires 3x{CIFAR_SIDE}x{CIFAR_SIDE} images, got {c}x{h}x{w}"
        )));
    }
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        bytes.push(ds.label(i) as u8);
        let img = ds.image(i);
        bytes.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Deterministic toy dataset: one bright square per class at a
/// class-specific grid cell over a dim noise background. Labels round-robin
/// over the classes.
pub fn synthetic_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    grid: usize,
    image_size: usize,
) -> Result<Dataset> {
    if classes == 0 || grid == 0 || n == 0 {
        return Err(Error::invalid("synthetic_dataset: n, classes and grid must be positive"));
    }
    if classes > grid * grid {
        return Err(Error::invalid(format!(
            "synthetic_dataset: {classes} classes exceed {} grid cells",
            grid * grid
        )));
    }
    if !image_size.is_multiple_of(grid) {
        return Err(Error::invalid(format!(
            "synthetic_dataset: image size {image_size} not divisible by grid {grid}"
        )));
    }
    let cell = image_size / grid;
    let channels = 3usize;
    let stride = channels * image_size * image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * stride];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let (row, col) = (class / grid, class % grid);
        let img = &mut data[i * stride..(i + 1) * stride];
        for v in img.iter_mut() {
            *v = rng.random::<f32>() as Real * 0.1;
        }
        for ch in 0..channels {
            for y in row * cell..(row + 1) * cell {
                for x in col * cell..(col + 1) * cell {
                    img[ch * image_size * image_size + y * image_size + x] =
                        0.8 + rng.random::<f32>() as Real * 0.2;
                }
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, channels, image_size, image_size], data)?,
        labels,
        classes,
        "synthetic",
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Translate image content by whole pixels; vacated pixels become zero.
/// Positive `dx` moves content right, positive `dy` moves it down.
pub fn shift_pixels(image: &Tensor, dx: isize, dy: isize) -> Result<Tensor> {
    let s = image.shape();
    if image.rank() != 3 {
        return Err(Error::invalid(format!("shift_pixels expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(vec![c, h, w]);
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                dst[ch * h * w + y as usize * w + x as usize] =
                    src[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Shift by `round(percent/100 * extent)` pixels along one axis, zero fill.
pub fn shift_transform(image: &Tensor, percent: u32, axis: Axis) -> Result<Tensor> {
    if percent > 100 {
        return Err(Error::invalid(format!("shift percent {percent} outside [0, 100]")));
    }
    let s = image.shape();
    if image.rank() != 3 {
        return Err(Error::invalid(format!("shift_transform expects [C, H, W], got {s:?}")));
    }
    let extent = match axis {
        Axis::Horizontal => s[2],
        Axis::Vertical => s[1],
    };
    let px = (percent as f64 / 100.0 * extent as f64).round() as isize;
    match axis {
        Axis::Horizontal => shift_pixels(image, px, 0),
        Axis::Vertical => shift_pixels(image, 0, px),
    }
}

/// Where downscaled content sits inside the zero-padded frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadAnchor {
    #[default]
    TopLeft,
    Center,
}

impl FromStr for PadAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top_left" => Ok(PadAnchor::TopLeft),
            "center" => Ok(PadAnchor::Center),
            _ => Err(Error::invalid(format!("unknown pad anchor '{s}'"))),
        }
    }
}

/// Bilinear downscale to `round((1 - percent/100) * extent)` per side, placed
/// at the anchor, zero padding elsewhere.
pub fn scale_transform(image: &Tensor, percent: u32, anchor: PadAnchor) -> Result<Tensor> {
    if percent >= 100 {
        return Err(Error::invalid(format!("scale percent {percent} outside [0, 100)")));
    }
    let s = image.shape();
    if image.rank() != 3 {
        return Err(Error::invalid(format!("scale_transform expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let keep = 1.0 - percent as f64 / 100.0;
    let nh = (keep * h as f64).round() as usize;
    let nw = (keep * w as f64).round() as usize;
    if nh == 0 || nw == 0 {
        return Err(Error::invalid(format!(
            "scale percent {percent} leaves no content in a {h}x{w} image"
        )));
    }
    let (oy, ox) = match anchor {
        PadAnchor::TopLeft => (0, 0),
        PadAnchor::Center => ((h - nh) / 2, (w - nw) / 2),
    };
    let mut out = Tensor::zeros(vec![c, h, w]);
    let src = image.data();
    let dst = out.data_mut();
    let sy_scale = h as f64 / nh as f64;
    let sx_scale = w as f64 / nw as f64;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..nh {
            let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..nw {
                let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v00 = plane[y0 * w + x0] as f64;
                let v01 = plane[y0 * w + x1] as f64;
                let v10 = plane[y1 * w + x0] as f64;
                let v11 = plane[y1 * w + x1] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                dst[ch * h * w + (oy + y) * w + ox + x] = v as Real;
            }
        }
    }
    Ok(out)
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl ChannelStats {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::invalid(format!(
                "normalization stats cover {} channels, image has {channels}",
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        Ok(())
    }
}

/// (x - mean) / std per channel. Applied after any perturbation so zero
/// fill means literal pixel zeros.
pub fn normalize_image(image: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let s = image.shape();
    if image.rank() != 3 {
        return Err(Error::invalid(format!("normalize_image expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    stats.validate(c)?;
    let mut out = image.clone();
    for ch in 0..c {
        let (m, sd) = (stats.mean[ch], stats.std[ch]);
        for v in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - m) / sd;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(image: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let s = image.shape();
    if image.rank() != 3 {
        return Err(Error::invalid(format!("denormalize_image expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    stats.validate(c)?;
    let mut out = image.clone();
    for ch in 0..c {
        let (m, sd) = (stats.mean[ch], stats.std[ch]);
        for v in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *v = *v * sd + m;
        }
    }
    Ok(out)
}

/// Normalize every image in a dataset.
pub fn normalize_dataset(ds: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    let (c, h, w) = ds.geometry();
    stats.validate(c)?;
    let mut images = ds.images().clone();
    let stride = c * h * w;
    let plane = h * w;
    for img in images.data_mut().chunks_mut(stride) {
        for ch in 0..c {
            let (m, sd) = (stats.mean[ch], stats.std[ch]);
            for v in &mut img[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) / sd;
            }
        }
    }
    Dataset::new(images, ds.labels().to_vec(), ds.class_count, &ds.split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Hshift,
    Vshift,
    Scale,
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbMode::Hshift => write!(f, "hshift"),
            PerturbMode::Vshift => write!(f, "vshift"),
            PerturbMode::Scale => write!(f, "scale"),
        }
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hshift" => Ok(PerturbMode::Hshift),
            "vshift" => Ok(PerturbMode::Vshift),
            "scale" => Ok(PerturbMode::Scale),
            _ => Err(Error::invalid(format!(
                "unknown perturbation mode '{s}' (expected hshift | vshift | scale)"
            ))),
        }
    }
}

/// One point of the robustness protocol: a perturbation mode and a percent
/// from the studied grid (or 0 for identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    pub percent: u32,
    pub pad_anchor: PadAnchor,
}

impl PerturbSpec {
    pub fn new(mode: PerturbMode, percent: u32) -> Result<Self> {
        if percent != 0 && !PERTURB_GRID.contains(&percent) {
            return Err(Error::invalid(format!(
                "perturbation percent {percent} not in {{0, 15, 30, 45, 60}}"
            )));
        }
        Ok(Self { mode, percent, pad_anchor: PadAnchor::default() })
    }

    pub fn with_anchor(mut self, anchor: PadAnchor) -> Self {
        self.pad_anchor = anchor;
        self
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if self.percent == 0 {
            return Ok(image.clone());
        }
        match self.mode {
            PerturbMode::Hshift => shift_transform(image, self.percent, Axis::Horizontal),
            PerturbMode::Vshift => shift_transform(image, self.percent, Axis::Vertical),
            PerturbMode::Scale => scale_transform(image, self.percent, self.pad_anchor),
        }
    }
}
