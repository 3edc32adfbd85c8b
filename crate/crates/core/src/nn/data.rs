use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        crate::error::check_dim("labels", images.batch(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: self.images.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Holds out every `k`-th item (`k = round(1 / fraction)`) as a test split.
    pub fn split_off(&self, fraction: f64) -> (Self, Self) {
        if fraction <= 0.0 {
            return (self.clone(), self.subset(&[], Split::Test));
        }
        let k = (1.0 / fraction).round().max(1.0) as usize;
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|i| i % k == k - 1);
        (
            self.subset(&train, Split::Train),
            self.subset(&test, Split::Test),
        )
    }
}

/// Deterministic 3x32x32 images: one anisotropic Gaussian blob per image,
/// placed and oriented by class, with position jitter, per-channel contrast
/// and pixel noise. Labels cycle through the classes.
pub fn make_synthetic_dataset(classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    const SIZE: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut data = vec![0.0; n * 3 * SIZE * SIZE];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let centre = (SIZE as f64 - 1.0) / 2.0;
    for (i, &label) in labels.iter().enumerate() {
        let phase = label as f64 / classes as f64 * std::f64::consts::TAU;
        let cy = centre + 8.0 * phase.sin() + rng.random_range(-2.0..2.0);
        let cx = centre + 8.0 * phase.cos() + rng.random_range(-2.0..2.0);
        let angle = label as f64 * std::f64::consts::PI / classes as f64;
        let (sin, cos) = angle.sin_cos();
        let contrast: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let image = &mut data[i * 3 * SIZE * SIZE..(i + 1) * 3 * SIZE * SIZE];
        for y in 0..SIZE {
            for x in 0..SIZE {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let blob = (-(u * u) / (2.0 * 16.0) - (v * v) / (2.0 * 2.25)).exp();
                for c in 0..3 {
                    image[(c * SIZE + y) * SIZE + x] = contrast[c] * blob + noise.sample(&mut rng);
                }
            }
        }
    }
    Dataset::new(
        Tensor4::new([n, 3, SIZE, SIZE], data)?,
        labels,
        classes,
        Split::Train,
    )
}

/// Parses CIFAR-10 binary records (label byte then 3072 channel-major pixel
/// bytes), scales pixels to `[0, 1]` and standardizes each channel with the
/// mean and standard deviation of the loaded records.
pub fn parse_cifar10(bytes: &[u8], max_items: Option<usize>, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut n = bytes.len() / CIFAR_RECORD;
    if let Some(max) = max_items {
        n = n.min(max);
    }
    let plane = 32 * 32;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for record in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("label byte {label} out of range")));
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    if n > 0 {
        let count = (n * plane) as f64;
        for c in 0..3 {
            let values =
                || (0..n).flat_map(move |i| (0..plane).map(move |p| (i * 3 + c) * plane + p));
            let mean = values().map(|k| data[k]).sum::<f64>() / count;
            let var = values().map(|k| (data[k] - mean).powi(2)).sum::<f64>() / count;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for k in values() {
                data[k] = (data[k] - mean) / std;
            }
        }
    }
    Dataset::new(Tensor4::new([n, 3, 32, 32], data)?, labels, 10, split)
}

pub fn load_cifar10_binary(path: &Path, max_items: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let split = if path
        .file_name()
        .is_some_and(|f| f.to_string_lossy().contains("test"))
    {
        Split::Test
    } else {
        Split::Train
    };
    parse_cifar10(&bytes, max_items, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from a CIFAR-10 binary
/// directory. Standardization constants are computed per split.
pub fn load_cifar10_dir(
    dir: &Path,
    max_train: Option<usize>,
    max_test: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let mut train_bytes = Vec::new();
    for i in 1..=5 {
        train_bytes.extend(fs::read(dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test_bytes = fs::read(dir.join("test_batch.bin"))?;
    Ok((
        parse_cifar10(&train_bytes, max_train, Split::Train)?,
        parse_cifar10(&test_bytes, max_test, Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic_dataset(2, 10, 3).unwrap();
        let b = make_synthetic_dataset(2, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(a.images.dims(), [10, 3, 32, 32]);
        assert_ne!(a, make_synthetic_dataset(2, 10, 4).unwrap());
    }

    #[test]
    fn one_class_rejected() {
        assert!(make_synthetic_dataset(1, 4, 0).is_err());
    }

    fn fixture() -> Vec<u8> {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[CIFAR_RECORD] = 7;
        // record 0: red plane all 255, green 0, blue 0
        bytes[1..1 + 1024].fill(255);
        // record 1: red 0, green all 51, blue 0
        bytes[CIFAR_RECORD + 1 + 1024..CIFAR_RECORD + 1 + 2048].fill(51);
        bytes
    }

    #[test]
    fn cifar_fixture_values() {
        let ds = parse_cifar10(&fixture(), None, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![3, 7]);
        // Red: half ones, half zeros -> mean 0.5, std 0.5.
        assert!((ds.images.get(0, 0, 5, 9) - 1.0).abs() < 1e-12);
        assert!((ds.images.get(1, 0, 31, 0) + 1.0).abs() < 1e-12);
        // Green: half 0.2, half zeros -> mean 0.1, std 0.1.
        assert!((ds.images.get(1, 1, 0, 0) - 1.0).abs() < 1e-12);
        assert!((ds.images.get(0, 1, 0, 0) + 1.0).abs() < 1e-12);
        // Blue is constant zero; the unit-std fallback keeps it at zero.
        assert_eq!(ds.images.get(0, 2, 3, 3), 0.0);
    }

    #[test]
    fn cifar_limits_and_errors() {
        let bytes = fixture();
        assert!(parse_cifar10(&bytes, Some(0), Split::Train)
            .unwrap()
            .is_empty());
        assert_eq!(
            parse_cifar10(&bytes, Some(1), Split::Train).unwrap().len(),
            1
        );
        assert!(matches!(
            parse_cifar10(&bytes[..CIFAR_RECORD + 5], None, Split::Train),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(matches!(
            parse_cifar10(&bad, None, Split::Train),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn split_off_partitions() {
        let ds = make_synthetic_dataset(4, 20, 0).unwrap();
        let (train, test) = ds.split_off(0.25);
        assert_eq!(train.len() + test.len(), 20);
        assert_eq!(test.len(), 5);
        assert_eq!(test.split, Split::Test);
    }
}
