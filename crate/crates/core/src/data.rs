//! Labeled datasets in `[0,1]^d` and the synthetic blob generator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{in_box, l1_distance};

/// Layout of an image stored as a flat `(row, col, channel)` row-major array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    /// Side length; images are square.
    pub side: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(side: usize, channels: usize) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::Parameter(format!(
                "image shape {side}x{side}x{channels} is empty"
            )));
        }
        Ok(Self { side, channels })
    }

    pub fn len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.side + col) * self.channels + channel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub shape: Option<ImageShape>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} >= num_classes {num_classes}"
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            if d == 0 {
                return Err(Error::Parameter("inputs must be nonempty vectors".into()));
            }
            for (i, x) in inputs.iter().enumerate() {
                if x.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        actual: x.len(),
                    });
                }
                if !in_box(x) {
                    return Err(Error::Invariant(format!("input {i} leaves [0,1]^d")));
                }
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            shape: None,
        })
    }

    pub fn with_shape(mut self, shape: ImageShape) -> Result<Self> {
        if self.dim() != shape.len() {
            return Err(Error::Dimension {
                expected: shape.len(),
                actual: self.dim(),
            });
        }
        self.shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            shape: self.shape,
        }
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let tail = Self {
            inputs: self.inputs[n..].to_vec(),
            labels: self.labels[n..].to_vec(),
            num_classes: self.num_classes,
            shape: self.shape,
        };
        (self.take(n), tail)
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub n: usize,
    pub num_classes: usize,
    /// Minimum pairwise l1 distance between class centers.
    pub margin: f64,
    /// Per-coordinate standard deviation around the center.
    pub noise: f64,
    /// Centers are `0.5 ± amplitude` per coordinate.
    pub amplitude: f64,
}

impl BlobSpec {
    pub fn new(dim: usize, n: usize, num_classes: usize, margin: f64) -> Self {
        Self {
            dim,
            n,
            num_classes,
            margin,
            noise: 0.25,
            amplitude: 0.2,
        }
    }
}

/// Gaussian blobs around random sign-pattern centers, clipped to the box.
///
/// Labels are assigned round-robin so classes are balanced within one
/// example. Centers are resampled until every pair is at least `margin`
/// apart in l1.
pub fn make_blobs<R: Rng + ?Sized>(spec: &BlobSpec, rng: &mut R) -> Result<LabeledDataset> {
    let BlobSpec {
        dim,
        n,
        num_classes,
        margin,
        noise,
        amplitude,
    } = *spec;
    if dim == 0 || num_classes < 2 {
        return Err(Error::Parameter(format!(
            "need dim >= 1 and >= 2 classes, got {dim}, {num_classes}"
        )));
    }
    if !(margin > 0.0) || !(noise >= 0.0) || !(amplitude > 0.0 && amplitude <= 0.5) {
        return Err(Error::Parameter(
            "margin > 0, noise >= 0 and 0 < amplitude <= 0.5 required".into(),
        ));
    }
    if margin > 2.0 * amplitude * dim as f64 {
        return Err(Error::Parameter(format!(
            "l1 separation {margin} unreachable with amplitude {amplitude} in dimension {dim}"
        )));
    }

    const ATTEMPTS: usize = 200;
    let mut centers = None;
    for _ in 0..ATTEMPTS {
        let cand: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if rng.random::<bool>() {
                            0.5 + amplitude
                        } else {
                            0.5 - amplitude
                        }
                    })
                    .collect()
            })
            .collect();
        let separated = (0..num_classes)
            .all(|a| (a + 1..num_classes).all(|b| l1_distance(&cand[a], &cand[b]) >= margin));
        if separated {
            centers = Some(cand);
            break;
        }
    }
    let centers = centers.ok_or_else(|| {
        Error::Parameter(format!(
            "could not place {num_classes} centers with l1 separation {margin}"
        ))
    })?;

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let x: Vec<f64> = centers[label]
            .iter()
            .map(|&c| (c + noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect();
        inputs.push(x);
        labels.push(label);
    }
    LabeledDataset::new(inputs, labels, num_classes)
}

/// Side length, channels and class count of the bundled toy image set.
pub const TOY_SIDE: usize = 8;
pub const TOY_CHANNELS: usize = 3;
pub const TOY_CLASSES: usize = 10;

/// Blob parameters of the bundled toy image set (`3 × 8 × 8`, 10 classes).
pub fn toy_cifar_spec(n: usize) -> BlobSpec {
    BlobSpec {
        amplitude: 0.08,
        ..BlobSpec::new(TOY_SIDE * TOY_SIDE * TOY_CHANNELS, n, TOY_CLASSES, 12.0)
    }
}

/// `n` toy images with their image shape attached.
pub fn toy_cifar<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<LabeledDataset> {
    make_blobs(&toy_cifar_spec(n), rng)?.with_shape(ImageShape::new(TOY_SIDE, TOY_CHANNELS)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn blobs_are_reproducible_and_balanced() {
        let spec = BlobSpec::new(32, 103, 4, 6.0);
        let a = make_blobs(&spec, &mut rng::seeded(9)).unwrap();
        let b = make_blobs(&spec, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        a.labels.iter().for_each(|&l| counts[l] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert!(a.inputs.iter().all(|x| in_box(x)));
    }

    #[test]
    fn blobs_reject_impossible_separation() {
        let spec = BlobSpec::new(8, 10, 2, 100.0);
        assert!(matches!(
            make_blobs(&spec, &mut rng::seeded(0)),
            Err(Error::Parameter(_))
        ));
        let spec = BlobSpec::new(8, 10, 2, 0.0);
        assert!(make_blobs(&spec, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(vec![vec![0.5]], vec![2], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![1.5]], vec![0], 2).is_err());
        assert!(LabeledDataset::new(vec![vec![0.5], vec![0.5, 0.1]], vec![0, 1], 2).is_err());
        let ds = LabeledDataset::new(vec![vec![0.5; 12]], vec![1], 2).unwrap();
        assert!(ds
            .clone()
            .with_shape(ImageShape::new(2, 3).unwrap())
            .is_ok());
        assert!(ds.with_shape(ImageShape::new(2, 2).unwrap()).is_err());
    }

    #[test]
    fn image_index_layout() {
        let s = ImageShape::new(4, 3).unwrap();
        assert_eq!(s.index(0, 0, 0), 0);
        assert_eq!(s.index(0, 1, 0), 3);
        assert_eq!(s.index(1, 0, 2), 14);
        assert_eq!(s.len(), 48);
    }
}
