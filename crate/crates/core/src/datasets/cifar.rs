//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the 32×32 red, green and blue planes, each row-major.

use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

/// Raw records of one or more batch files.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarBatch {
    pub labels: Vec<u8>,
    /// `labels.len() × 3072` bytes in file order.
    pub pixels: Vec<u8>,
}

impl CifarBatch {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Truncated(format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            )));
        }
        let n = bytes.len() / CIFAR_RECORD_BYTES;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
        for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            if rec[0] > 9 {
                return Err(Error::LabelOutOfRange { label: rec[0] as usize, classes: 10 });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self { labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: CifarBatch) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }

    /// Scales to `[0, 1]`, standardises with `stats` and wraps as `[N, 3, 32, 32]`.
    pub fn to_image_set(&self, stats: &ChannelStats) -> Result<LabeledImageSet> {
        let plane = 32 * 32;
        let data = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i / plane) % 3;
                (p as f64 / 255.0 - stats.mean[c]) / stats.std[c]
            })
            .collect();
        LabeledImageSet::new(
            Tensor::new([self.len(), 3, 32, 32], data)?,
            self.labels.iter().map(|&l| l as usize).collect(),
            CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of(batch: &CifarBatch) -> Self {
        let plane = 32 * 32;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for (i, &p) in batch.pixels.iter().enumerate() {
            let c = (i / plane) % 3;
            let v = p as f64 / 255.0;
            sum[c] += v;
            sq[c] += v * v;
        }
        let n = (batch.len() * plane) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            // Constant channels would divide by zero; leave them centred only.
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
            if std[c] < 1e-12 {
                std[c] = 1.0;
            }
        }
        Self { mean, std }
    }
}

pub fn load_cifar10_batch(path: &Path) -> Result<CifarBatch> {
    CifarBatch::parse(&fs::read(path)?)
}

/// Loads training batch files and an optional test file, standardising both
/// with statistics of the training records.
pub fn load_cifar10(train_files: &[&Path], test_file: Option<&Path>) -> Result<(LabeledImageSet, Option<LabeledImageSet>)> {
    let mut train = CifarBatch { labels: Vec::new(), pixels: Vec::new() };
    for f in train_files {
        train.extend(load_cifar10_batch(f)?);
    }
    if train.is_empty() {
        return Err(Error::invalid("no CIFAR-10 training files given"));
    }
    let stats = ChannelStats::of(&train);
    let test = test_file.map(|f| load_cifar10_batch(f)?.to_image_set(&stats)).transpose()?;
    Ok((train.to_image_set(&stats)?, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn parses_records() {
        let mut bytes = record(6, |i| (i % 256) as u8);
        bytes.extend(record(0, |_| 7));
        let b = CifarBatch::parse(&bytes).unwrap();
        assert_eq!(b.labels, [6, 0]);
        assert_eq!(b.pixels[..3], [0, 1, 2]);
        assert_eq!(b.pixels[3072], 7);
    }

    #[test]
    fn truncated_and_bad_label() {
        assert!(matches!(CifarBatch::parse(&[0u8; 100]), Err(Error::Truncated(_))));
        assert!(matches!(CifarBatch::parse(&[]), Err(Error::Truncated(_))));
        assert!(matches!(
            CifarBatch::parse(&record(10, |_| 0)),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn standardised_channels_have_zero_mean_unit_variance() {
        let mut bytes = Vec::new();
        for k in 0..4u8 {
            bytes.extend(record(k, |i| ((i * 7 + k as usize * 13) % 251) as u8));
        }
        let b = CifarBatch::parse(&bytes).unwrap();
        let set = b.to_image_set(&ChannelStats::of(&b)).unwrap();
        assert_eq!(set.images.shape(), &[4, 3, 32, 32]);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| set.images.data()[(n * 3 + c) * 1024..(n * 3 + c + 1) * 1024].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }
}
