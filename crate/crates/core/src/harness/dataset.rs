//! Synthetic multi-label images driven by latent factors.
//!
//! Each factor owns a fixed random texture stamped at a factor-specific
//! location. An active factor stamps its texture (with a small positional
//! jitter) and switches on every label it is coupled to; labels are then
//! flipped independently with the noise rate. Pixel noise keeps the visual
//! evidence ambiguous, so labels sharing a factor are correlated in a way a
//! network can only partly resolve from the image alone.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub splits: SplitSizes,
    pub image_shape: Vec<usize>,
    pub labels: usize,
    pub factors: usize,
    /// `factors x labels` 0/1 matrix; `coupling[k][j] = 1` ties label `j` to factor `k`.
    pub coupling: Vec<Vec<u8>>,
    pub label_noise: f64,
    #[serde(default = "default_factor_prob")]
    pub factor_prob: f64,
    /// Texture amplitude.
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
    /// Side of the square texture stamped by each factor.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Maximum positional jitter of a stamp, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
    pub seed: u64,
}

fn default_factor_prob() -> f64 {
    0.3
}
fn default_signal() -> f64 {
    0.5
}
fn default_pixel_noise() -> f64 {
    1.0
}
fn default_patch() -> usize {
    7
}
fn default_jitter() -> usize {
    1
}

impl DatasetSpec {
    /// 28x28 single-channel images, 40 labels, 10 factors. Labels `j` and
    /// `j + 20` share factor `j % 10`, so each factor drives two labels in
    /// each half of the label space.
    pub fn reference(seed: u64) -> Self {
        let (labels, factors) = (40, 10);
        let coupling = (0..factors)
            .map(|k| (0..labels).map(|j| u8::from(j % factors == k)).collect())
            .collect();
        DatasetSpec {
            splits: SplitSizes { train: 8000, val: 1000, test: 1000 },
            image_shape: vec![1, 28, 28],
            labels,
            factors,
            coupling,
            label_noise: 0.05,
            factor_prob: default_factor_prob(),
            signal: default_signal(),
            pixel_noise: default_pixel_noise(),
            patch: default_patch(),
            jitter: default_jitter(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.labels));
        }
        if self.factors == 0 {
            return bad("need at least one latent factor".into());
        }
        if self.image_shape.len() != 3 || self.image_shape.contains(&0) {
            return bad(format!("image shape must be [C,H,W], got {:?}", self.image_shape));
        }
        let (h, w) = (self.image_shape[1], self.image_shape[2]);
        if self.patch == 0 || self.patch + 2 * self.jitter > h.min(w) {
            return bad(format!("patch {} with jitter {} does not fit {h}x{w}", self.patch, self.jitter));
        }
        if self.coupling.len() != self.factors || self.coupling.iter().any(|row| row.len() != self.labels) {
            return bad(format!("coupling must be {} x {}", self.factors, self.labels));
        }
        if self.coupling.iter().flatten().any(|&c| c > 1) {
            return bad("coupling entries must be 0 or 1".into());
        }
        if let Some(j) = (0..self.labels).find(|&j| self.coupling.iter().all(|row| row[j] == 0)) {
            return bad(format!("label {j} is not coupled to any factor"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        if !(self.factor_prob > 0.0 && self.factor_prob < 1.0) {
            return bad(format!("factor probability must lie in (0, 1), got {}", self.factor_prob));
        }
        if !(self.signal.is_finite() && self.pixel_noise.is_finite() && self.pixel_noise >= 0.0) {
            return bad("signal and pixel noise must be finite, pixel noise non-negative".into());
        }
        if self.splits.total() == 0 {
            return bad("dataset must contain at least one sample".into());
        }
        Ok(())
    }
}

/// Images `[N, C, H, W]` with binary labels `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Tensor,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Tensor) -> Result<Self> {
        if images.rank() < 2 || labels.rank() != 2 || images.shape()[0] != labels.shape()[0] {
            return Err(Error::Shape(format!(
                "images {:?} and labels {:?} disagree on sample count",
                images.shape(),
                labels.shape()
            )));
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidSpec("labels must be 0 or 1".into()));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_count(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn image(&self, i: usize) -> Tensor {
        let size: usize = self.image_shape().iter().product();
        Tensor::from_parts(self.image_shape().to_vec(), self.images.data()[i * size..(i + 1) * size].to_vec())
    }

    pub fn label_row(&self, i: usize) -> &[f64] {
        let d = self.label_count();
        &self.labels.data()[i * d..(i + 1) * d]
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidSpec(format!("bad slice {start}..{end} of {} samples", self.len())));
        }
        let size: usize = self.image_shape().iter().product();
        let d = self.label_count();
        let mut ishape = self.images.shape().to_vec();
        ishape[0] = end - start;
        Dataset::new(
            Tensor::from_parts(ishape, self.images.data()[start * size..end * size].to_vec()),
            Tensor::from_parts(vec![end - start, d], self.labels.data()[start * d..end * d].to_vec()),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, split: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.images.save(dir.join(format!("{split}_images.fbpt")))?;
        self.labels.save(dir.join(format!("{split}_labels.fbpt")))
    }

    pub fn load(dir: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = dir.as_ref();
        Dataset::new(
            Tensor::load(dir.join(format!("{split}_images.fbpt")))?,
            Tensor::load(dir.join(format!("{split}_labels.fbpt")))?,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.train.save(dir, "train")?;
        self.val.save(dir, "val")?;
        self.test.save(dir, "test")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(SplitDataset {
            train: Dataset::load(dir, "train")?,
            val: Dataset::load(dir, "val")?,
            test: Dataset::load(dir, "test")?,
        })
    }
}

/// Generates `spec.splits.total()` samples in one stream.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.image_shape[0], spec.image_shape[1], spec.image_shape[2]);
    let p = spec.patch;
    let textures: Vec<Vec<f64>> =
        (0..spec.factors).map(|_| (0..c * p * p).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()).collect();
    let span_y = h - p - 2 * spec.jitter;
    let span_x = w - p - 2 * spec.jitter;
    let anchors: Vec<(usize, usize)> = (0..spec.factors)
        .map(|_| (spec.jitter + rng.random_range(0..=span_y), spec.jitter + rng.random_range(0..=span_x)))
        .collect();
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid normal");

    let n = spec.splits.total();
    let size = c * h * w;
    let mut images = Vec::with_capacity(n * size);
    let mut labels = Vec::with_capacity(n * spec.labels);
    let mut image = vec![0.0; size];
    for _ in 0..n {
        let active: Vec<bool> = (0..spec.factors).map(|_| rng.random_bool(spec.factor_prob)).collect();
        for v in image.iter_mut() {
            *v = if spec.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
        for (k, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let j = 2 * spec.jitter;
            let y0 = anchors[k].0 + rng.random_range(0..=j) - spec.jitter;
            let x0 = anchors[k].1 + rng.random_range(0..=j) - spec.jitter;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        image[(ch * h + y0 + py) * w + x0 + px] += spec.signal * textures[k][(ch * p + py) * p + px];
                    }
                }
            }
        }
        images.extend_from_slice(&image);
        for j in 0..spec.labels {
            let on = (0..spec.factors).any(|k| active[k] && spec.coupling[k][j] == 1);
            let flip = spec.label_noise > 0.0 && rng.random_bool(spec.label_noise);
            labels.push(f64::from(u8::from(on != flip)));
        }
    }
    let mut ishape = vec![n];
    ishape.extend_from_slice(&spec.image_shape);
    Dataset::new(Tensor::new(ishape, images)?, Tensor::new(vec![n, spec.labels], labels)?)
}

/// Generates and splits into train/val/test in that order.
pub fn synth_splits(spec: &DatasetSpec) -> Result<SplitDataset> {
    let all = synth_dataset(spec)?;
    let s = spec.splits;
    let part = |a: usize, b: usize| -> Result<Dataset> {
        if a == b {
            return Err(Error::InvalidSpec("every split needs at least one sample".into()));
        }
        all.slice(a, b)
    };
    Ok(SplitDataset {
        train: part(0, s.train)?,
        val: part(s.train, s.train + s.val)?,
        test: part(s.train + s.val, s.total())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        let mut spec = DatasetSpec::reference(seed);
        spec.splits = SplitSizes { train: 20, val: 5, test: 5 };
        spec
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(&small(3)).unwrap();
        assert_eq!(a, synth_dataset(&small(3)).unwrap());
        assert_ne!(a, synth_dataset(&small(4)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        synth_splits(&small(3)).unwrap().save(&d1).unwrap();
        synth_splits(&small(3)).unwrap().save(&d2).unwrap();
        for f in ["train_images.fbpt", "train_labels.fbpt", "test_labels.fbpt"] {
            assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap());
        }
        assert_eq!(SplitDataset::load(&d1).unwrap().test.len(), 5);
    }

    #[test]
    fn shared_factor_labels_are_identical_without_noise() {
        let mut spec = small(1);
        spec.label_noise = 0.0;
        spec.splits.train = 500;
        let ds = synth_dataset(&spec).unwrap();
        for i in 0..ds.len() {
            let row = ds.label_row(i);
            for j in 0..20 {
                assert_eq!(row[j], row[j + 20]);
                assert_eq!(row[j], row[(j + 10) % 20]);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small(1);
        spec.label_noise = 0.5;
        assert!(matches!(synth_dataset(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = small(1);
        spec.labels = 1;
        assert!(spec.validate().is_err());
        let mut spec = small(1);
        for row in &mut spec.coupling {
            row[7] = 0;
        }
        assert!(spec.validate().is_err());
    }
}
