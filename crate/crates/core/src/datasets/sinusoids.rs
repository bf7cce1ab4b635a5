//! Oriented 2D sinusoids whose class is the spatial frequency.
//!
//! Export layout (`write_sinusoids`):
//!
//! ```text
//! meta.json   the SinusoidsSpec plus sample counts
//! data.bin    train images, then test images: N × H × W f32 LE each
//!             train labels, then test labels: one u8 per image
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidsSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Cycles per pixel, one per class, strictly increasing and below 0.5.
    pub frequencies: Vec<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

/// 16 px keeps a 30-epoch run near a minute on one core; every frequency
/// still spans more than half a cycle across the image.
impl Default for SinusoidsSpec {
    fn default() -> Self {
        Self::geometric(16, 5, 0.03, 0.4, 600, 200, 0)
    }
}

impl SinusoidsSpec {
    /// `num_classes` frequencies spaced geometrically from `lo` to `hi`.
    pub fn geometric(
        image_size: usize,
        num_classes: usize,
        lo: f64,
        hi: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Self {
        let frequencies = match num_classes {
            0 => Vec::new(),
            1 => vec![lo],
            n => (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect(),
        };
        Self { image_size, num_classes, frequencies, train_per_class, test_per_class, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.num_classes == 0 {
            return Err(Error::invalid("image size and class count must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("per-class sample counts must be positive"));
        }
        if self.frequencies.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} frequencies for {} classes",
                self.frequencies.len(),
                self.num_classes
            )));
        }
        if let Some(f) = self.frequencies.iter().find(|&&f| !(f > 0.0 && f < 0.5)) {
            return Err(Error::invalid(format!("frequency {f} must lie in (0, 0.5) cycles/pixel")));
        }
        if self.frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("frequencies must be strictly increasing"));
        }
        if self.num_classes > 256 {
            return Err(Error::invalid("at most 256 classes fit the u8 label export"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.frequencies.iter().map(|f| format!("f={f:.4}")).collect()
    }
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

/// Every image gets its own ChaCha stream keyed by split and index, so images
/// can be generated in any order and train/test never share draws.
fn render(spec: &SinusoidsSpec, split: u64, index: usize, freq: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split << 48) | index as u64);
    let theta = rng.random_range(0.0..PI);
    let phi = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let n = spec.image_size;
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = (2.0 * PI * freq * (x as f64 * c + y as f64 * s) + phi).sin();
        }
    }
}

fn generate_split(spec: &SinusoidsSpec, split: u64, per_class: usize) -> Result<LabeledImageSet> {
    let n = spec.image_size;
    let total = per_class * spec.num_classes;
    let mut data = vec![0.0; total * n * n];
    let mut labels = Vec::with_capacity(total);
    for (i, img) in data.chunks_mut(n * n).enumerate() {
        let class = i / per_class;
        render(spec, split, i, spec.frequencies[class], img);
        labels.push(class);
    }
    LabeledImageSet::new(Tensor::new([total, 1, n, n], data)?, labels, spec.class_names())
}

/// Train and test sets, class-major (all of class 0 first).
pub fn generate_sinusoids(spec: &SinusoidsSpec) -> Result<(LabeledImageSet, LabeledImageSet)> {
    spec.validate()?;
    Ok((
        generate_split(spec, TRAIN_STREAM, spec.train_per_class)?,
        generate_split(spec, TEST_STREAM, spec.test_per_class)?,
    ))
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: SinusoidsSpec,
    train_count: usize,
    test_count: usize,
}

pub fn write_sinusoids(dir: &Path, spec: &SinusoidsSpec, train: &LabeledImageSet, test: &LabeledImageSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = Meta { spec: spec.clone(), train_count: train.len(), test_count: test.len() };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let pixels = train.images.len() + test.images.len();
    let mut bytes = Vec::with_capacity(pixels * 4 + train.len() + test.len());
    for v in train.images.data().iter().chain(test.images.data()) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    bytes.extend(train.labels.iter().chain(&test.labels).map(|&l| l as u8));
    fs::write(dir.join("data.bin"), bytes)?;
    Ok(())
}

/// Reads a directory produced by [`write_sinusoids`].
pub fn read_sinusoids(dir: &Path) -> Result<(SinusoidsSpec, LabeledImageSet, LabeledImageSet)> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    meta.spec.validate()?;
    let bytes = fs::read(dir.join("data.bin"))?;
    let n = meta.spec.image_size;
    let count = meta.train_count + meta.test_count;
    let expected = count * n * n * 4 + count;
    if bytes.len() != expected {
        return Err(Error::Truncated(format!("data.bin has {} bytes, expected {expected}", bytes.len())));
    }
    let (pix, labels) = bytes.split_at(count * n * n * 4);
    let values: Vec<f64> = pix
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let names = meta.spec.class_names();
    let split = |range: std::ops::Range<usize>| -> Result<LabeledImageSet> {
        let images = Tensor::new([range.len(), 1, n, n], values[range.start * n * n..range.end * n * n].to_vec())?;
        LabeledImageSet::new(images, labels[range].iter().map(|&l| l as usize).collect(), names.clone())
    };
    let train = split(0..meta.train_count)?;
    let test = split(meta.train_count..count)?;
    Ok((meta.spec, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SinusoidsSpec {
        SinusoidsSpec::geometric(32, 5, 0.03, 0.4, 6, 2, 11)
    }

    #[test]
    fn default_sizes() {
        let spec = SinusoidsSpec { train_per_class: 600, test_per_class: 200, ..small() };
        let (train, test) = generate_sinusoids(&spec).unwrap();
        assert_eq!(train.len(), 3000);
        assert_eq!(test.len(), 1000);
        assert_eq!(train.images.shape(), &[3000, 1, 32, 32]);
        assert_eq!(train.class_counts(), [600; 5]);
    }

    #[test]
    fn default_frequencies() {
        let f = SinusoidsSpec::default().frequencies;
        assert_eq!(f.len(), 5);
        assert!((f[0] - 0.03).abs() < 1e-15 && (f[4] - 0.4).abs() < 1e-15);
        let r = f[1] / f[0];
        assert!(f.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-12));
    }

    #[test]
    fn values_bounded_and_deterministic() {
        let (a, b) = generate_sinusoids(&small()).unwrap();
        assert!(a.images.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(generate_sinusoids(&small()).unwrap(), (a.clone(), b));
        let other = generate_sinusoids(&SinusoidsSpec { seed: 12, ..small() }).unwrap().0;
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn train_and_test_draw_different_images() {
        let (train, test) = generate_sinusoids(&small()).unwrap();
        // Same class and position within the class, different stream.
        assert_ne!(&train.images.data()[..1024], &test.images.data()[..1024]);
    }

    #[test]
    fn near_zero_frequency_is_constant() {
        let spec = SinusoidsSpec { frequencies: vec![1e-6], num_classes: 1, ..small() };
        let (train, _) = generate_sinusoids(&spec).unwrap();
        for img in train.images.data().chunks(1024) {
            let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi - lo < 1e-3);
        }
    }

    #[test]
    fn rejects_nyquist_and_disorder() {
        let mut s = small();
        s.frequencies[4] = 0.5;
        assert!(generate_sinusoids(&s).is_err());
        let mut s = small();
        s.frequencies.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = small();
        s.frequencies.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let (train, test) = generate_sinusoids(&spec).unwrap();
        write_sinusoids(dir.path(), &spec, &train, &test).unwrap();
        let bytes = fs::read(dir.path().join("data.bin")).unwrap();
        assert_eq!(bytes.len(), 40 * 1024 * 4 + 40);
        assert_eq!(&bytes[..4], &(train.images.data()[0] as f32).to_le_bytes());
        assert_eq!(bytes[40 * 1024 * 4 + 39], 4);
        let (spec2, train2, test2) = read_sinusoids(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(train2.labels, train.labels);
        assert_eq!(test2.labels, test.labels);
        for (a, b) in train2.images.data().iter().zip(train.images.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        fs::write(dir.path().join("data.bin"), &bytes[..100]).unwrap();
        assert!(matches!(read_sinusoids(dir.path()), Err(Error::Truncated(_))));
    }
}
