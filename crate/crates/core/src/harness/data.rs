//! Datasets: synthetic tasks by name, or IDX image/label file pairs.
//!
//! Spec strings:
//! - `synthetic:<task>[:<split>[:<count>]]` with task `two-blobs` or
//!   `digits` and split `train` (default) or `eval`.
//! - `idx:<images>,<labels>` for an unsigned-byte IDX pair. Images are
//!   `[N, H, W]` (grayscale) or `[N, H, W, C]`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{cast, Element, Tensor};

use super::idx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    TwoBlobs,
    Digits,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::TwoBlobs => "two-blobs",
            Self::Digits => "digits",
        }
    }

    fn default_count(self, eval: bool) -> usize {
        match (self, eval) {
            (Self::TwoBlobs, false) => 512,
            (Self::TwoBlobs, true) => 256,
            (Self::Digits, false) => 1000,
            (Self::Digits, true) => 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Synthetic {
        task: SyntheticTask,
        eval: bool,
        count: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut parts = rest.split(':');
            let task = match parts.next() {
                Some("two-blobs") => SyntheticTask::TwoBlobs,
                Some("digits") => SyntheticTask::Digits,
                _ => return Err(Error::UnknownDataset(s.into())),
            };
            let eval = match parts.next() {
                None | Some("train") => false,
                Some("eval") => true,
                Some(other) => return Err(Error::UnknownDataset(format!("{s}: unknown split `{other}`"))),
            };
            let count = match parts.next() {
                None => task.default_count(eval),
                Some(n) => n
                    .parse()
                    .ok()
                    .filter(|&n: &usize| n > 0)
                    .ok_or_else(|| Error::UnknownDataset(format!("{s}: bad count `{n}`")))?,
            };
            if parts.next().is_some() {
                return Err(Error::UnknownDataset(s.into()));
            }
            return Ok(Self::Synthetic { task, eval, count });
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            if let Some((images, labels)) = rest.split_once(',') {
                return Ok(Self::Idx {
                    images: images.into(),
                    labels: labels.into(),
                });
            }
        }
        Err(Error::UnknownDataset(s.into()))
    }
}

/// Images as `[N, C, H, W]` f32 plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

/// Per-channel statistics used to standardize inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn load(spec: &str) -> Result<Self> {
        match spec.parse()? {
            DataSpec::Synthetic { task, eval, count } => Ok(synthetic(task, eval, count)),
            DataSpec::Idx { images, labels } => from_idx(&images, &labels),
        }
    }

    pub fn stats(&self) -> Normalization {
        let plane = self.height * self.width;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, ch) in img.chunks(plane).enumerate() {
                for &v in ch {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        if norm.mean.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization has {} channels, data has {}",
                norm.mean.len(),
                self.channels
            )));
        }
        let plane = self.height * self.width;
        let n = self.image_len();
        for img in self.images.chunks_mut(n) {
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (norm.mean[c], norm.std[c]);
                ch.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
            }
        }
        Ok(())
    }

    /// Replicate a single channel to `channels`.
    pub fn replicate_channels(&mut self, channels: usize) -> Result<()> {
        if self.channels == channels {
            return Ok(());
        }
        if self.channels != 1 {
            return Err(Error::Config(format!(
                "cannot map {} input channels to {channels}",
                self.channels
            )));
        }
        let plane = self.height * self.width;
        self.images = self
            .images
            .chunks(plane)
            .flat_map(|p| std::iter::repeat_n(p, channels).flatten().copied())
            .collect();
        self.channels = channels;
        Ok(())
    }

    /// Center the images on a `size × size` canvas filled with zeros.
    pub fn pad_to(&mut self, size: usize) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == size && w == size {
            return Ok(());
        }
        if h > size || w > size {
            return Err(Error::Config(format!("{h}×{w} images do not fit a {size}×{size} model")));
        }
        let (top, left) = ((size - h) / 2, (size - w) / 2);
        let mut out = vec![0.0f32; self.len() * self.channels * size * size];
        for (src, dst) in self.images.chunks(h * w).zip(out.chunks_mut(size * size)) {
            for r in 0..h {
                let d = (top + r) * size + left;
                dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        self.images = out;
        self.height = size;
        self.width = size;
        Ok(())
    }

    /// Fit to the model input: replicate channels, standardize with `norm`
    /// (or this set's own statistics), then pad. Returns the statistics used.
    pub fn prepare(&mut self, model: &ModelConfig, norm: Option<&Normalization>) -> Result<Normalization> {
        if self.num_classes > model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model head has {}",
                self.num_classes, model.num_classes
            )));
        }
        self.replicate_channels(model.in_channels)?;
        let norm = norm.cloned().unwrap_or_else(|| self.stats());
        self.normalize(&norm)?;
        self.pad_to(model.image_size)?;
        Ok(norm)
    }

    /// Quantize `[0, 1]` images to bytes and write an IDX pair.
    pub fn write_idx(&self, images: &Path, labels: &Path) -> Result<()> {
        let bytes: Vec<u8> = if self.channels == 1 {
            self.images.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
        } else {
            let plane = self.height * self.width;
            let mut out = Vec::with_capacity(self.images.len());
            for img in self.images.chunks(self.image_len()) {
                for p in 0..plane {
                    for c in 0..self.channels {
                        out.push((img[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            out
        };
        let mut dims = vec![self.len(), self.height, self.width];
        if self.channels != 1 {
            dims.push(self.channels);
        }
        idx::write(images, &dims, &bytes)?;
        let labels_u8: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        idx::write(labels, &[self.len()], &labels_u8)
    }

    /// The first `n` samples as a stand-alone set.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Assemble a `[B, C, H, W]` batch, mirroring images where `flip` says so.
    pub fn batch<T: Element>(&self, indices: &[usize], flip: &[bool]) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for (k, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            if flip.get(k).copied().unwrap_or(false) {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev().map(|&v| cast::<T>(v as f64)));
                }
            } else {
                data.extend(img.iter().map(|&v| cast::<T>(v as f64)));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (images, labels)
    }
}

/// One epoch's sample order and flip decisions, batched.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub batches: Vec<(Vec<usize>, Vec<bool>)>,
}

impl EpochPlan {
    /// Shuffled order with random flips when `rng` is given, otherwise the
    /// natural order without flips.
    pub fn new(len: usize, batch_size: usize, rng: Option<&mut SeedRng>, hflip: bool) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        let mut flips = vec![false; len];
        if let Some(rng) = rng {
            rng.shuffle(&mut order);
            if hflip {
                flips.iter_mut().for_each(|f| *f = rng.coin());
            }
        }
        let batches = order
            .chunks(batch_size.max(1))
            .zip(flips.chunks(batch_size.max(1)))
            .map(|(o, f)| (o.to_vec(), f.to_vec()))
            .collect();
        Self { batches }
    }
}

fn from_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut d = Dataset::from_idx_images(images)?;
    let lab = idx::read(labels)?;
    if lab.dims != [d.len()] {
        return Err(Error::Idx {
            offset: 3,
            msg: format!("label dims {:?} do not match {} images", lab.dims, d.len()),
        });
    }
    d.labels = lab.data.iter().map(|&l| l as usize).collect();
    d.num_classes = d.labels.iter().max().map_or(0, |&m| m + 1);
    Ok(d)
}

impl Dataset {
    /// Images from an IDX file, every label 0.
    pub fn from_idx_images(path: &Path) -> Result<Self> {
        let img = idx::read(path)?;
        let (n, h, w, c) = match img.dims[..] {
            [n, h, w] => (n, h, w, 1),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::Idx {
                    offset: 3,
                    msg: format!("image file has {} dimensions, expected 3 or 4", img.dims.len()),
                })
            }
        };
        let plane = h * w;
        let mut images = Vec::with_capacity(n * c * plane);
        for px in img.data.chunks(c * plane) {
            for ch in 0..c {
                images.extend((0..plane).map(|p| px[p * c + ch] as f32 / 255.0));
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            num_classes: 1,
            images,
            labels: vec![0; n],
        })
    }
}

const DATA_SEED: u64 = 0x5253_4952_4441_5441;

/// Generate a synthetic set. The generator seed is fixed per task and split,
/// so every run sees the same data regardless of the run seed.
pub fn synthetic(task: SyntheticTask, eval: bool, count: usize) -> Dataset {
    let mut rng = SeedRng::new(DATA_SEED).fork(task as u64 * 2 + eval as u64);
    match task {
        SyntheticTask::TwoBlobs => two_blobs(count, &mut rng),
        SyntheticTask::Digits => digits(count, &mut rng),
    }
}

/// 32×32 RGB. Class 1 has a brighter background and a bright Gaussian blob,
/// class 0 a darker background and a dark blob, so mean intensity separates
/// them.
fn two_blobs(count: usize, rng: &mut SeedRng) -> Dataset {
    let (s, c) = (32usize, 3usize);
    let mut images = Vec::with_capacity(count * c * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let (cy, cx) = (rng.uniform() * s as f64, rng.uniform() * s as f64);
        let sigma = 3.0 + 3.0 * rng.uniform();
        let amp = 0.3 + 0.1 * rng.uniform();
        let tint: Vec<f64> = (0..c).map(|_| 0.8 + 0.4 * rng.uniform()).collect();
        let mut img = vec![0.0f32; c * s * s];
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..c {
                    let v = 0.5 + sign * (0.08 + blob * tint[ch]) + 0.05 * rng.normal();
                    img[ch * s * s + y * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        images.extend(img);
        labels.push(label);
    }
    Dataset {
        channels: c,
        height: s,
        width: s,
        num_classes: 2,
        images,
        labels,
    }
}

/// 5×7 bitmap font, one byte per row, low five bits used.
const FONT: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// 28×28 grayscale glyphs scaled ×3, jittered in position and stroke
/// intensity, with pixel noise.
fn digits(count: usize, rng: &mut SeedRng) -> Dataset {
    let (s, scale) = (28usize, 3usize);
    let (gh, gw) = (7 * scale, 5 * scale);
    let mut images = Vec::with_capacity(count * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % 10;
        let top = rng.below(s - gh + 1);
        let left = rng.below(s - gw + 1);
        let ink = 0.7 + 0.3 * rng.uniform();
        let mut img = vec![0.0f64; s * s];
        for (r, bits) in FONT[label].iter().enumerate() {
            for col in 0..5 {
                if bits >> (4 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img[(top + r * scale + dy) * s + left + col * scale + dx] = ink;
                        }
                    }
                }
            }
        }
        images.extend(img.iter().map(|&v| (v + 0.1 * rng.normal()).clamp(0.0, 1.0) as f32));
        labels.push(label);
    }
    Dataset {
        channels: 1,
        height: s,
        width: s,
        num_classes: 10,
        images,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "synthetic:digits:eval:50".parse::<DataSpec>().unwrap(),
            DataSpec::Synthetic {
                task: SyntheticTask::Digits,
                eval: true,
                count: 50
            }
        );
        assert!(matches!("idx:a,b".parse::<DataSpec>().unwrap(), DataSpec::Idx { .. }));
        for bad in ["synthetic:cats", "synthetic:digits:test", "synthetic:digits:eval:0", "idx:a", "mnist"] {
            assert!(bad.parse::<DataSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn synthetic_is_fixed_and_splits_differ() {
        let a = synthetic(SyntheticTask::TwoBlobs, false, 8);
        assert_eq!(a, synthetic(SyntheticTask::TwoBlobs, false, 8));
        assert_ne!(a.images, synthetic(SyntheticTask::TwoBlobs, true, 8).images);
    }

    #[test]
    fn prepare_pads_replicates_and_standardizes() {
        let mut d = synthetic(SyntheticTask::Digits, false, 20);
        let norm = d.prepare(&ModelConfig::desk(), None).unwrap();
        assert_eq!((d.channels, d.height, d.width), (3, 32, 32));
        assert_eq!(norm.mean.len(), 3);
        assert_eq!(d.image(0)[0], 0.0);
        let mut blobs = synthetic(SyntheticTask::TwoBlobs, false, 64);
        blobs.prepare(&ModelConfig::desk(), None).unwrap();
        let s = blobs.stats();
        assert!(s.mean.iter().all(|m| m.abs() < 1e-4), "{s:?}");
        assert!(s.std.iter().all(|v| (v - 1.0).abs() < 1e-3), "{s:?}");
    }

    #[test]
    fn epoch_plan_seeded() {
        let a = EpochPlan::new(10, 4, Some(&mut SeedRng::new(3)), true);
        let b = EpochPlan::new(10, 4, Some(&mut SeedRng::new(3)), true);
        assert_eq!(a, b);
        assert_eq!(a.batches.len(), 3);
        let mut all: Vec<usize> = a.batches.iter().flat_map(|b| b.0.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_flips_rows() {
        let d = Dataset {
            channels: 1,
            height: 1,
            width: 3,
            num_classes: 1,
            images: vec![1.0, 2.0, 3.0],
            labels: vec![0],
        };
        let (x, _) = d.batch::<f64>(&[0], &[true]);
        assert_eq!(x.data(), &[3.0, 2.0, 1.0]);
    }
}
