//! Datasets: the CIFAR binary format, preprocessing and augmentation, and
//! synthetic class-conditional images for quick experiments.

mod augment;
mod cifar;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use augment::{augment, augment_image, global_contrast_normalize, AugmentConfig, Crop, GCN_EPSILON};
pub use cifar::{decode_records, encode_records, load_cifar, RECORD_PIXELS};
pub use synthetic::{synthetic_dataset, synthetic_dataset_sized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    /// Label bytes preceding the pixels of each record.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + RECORD_PIXELS
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::C10 => "c10",
            CifarVariant::C100 => "c100",
        })
    }
}

impl FromStr for CifarVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c10" | "cifar10" | "cifar-10" => Ok(CifarVariant::C10),
            "c100" | "cifar100" | "cifar-100" => Ok(CifarVariant::C100),
            other => Err(format!("unknown CIFAR variant {other:?} (expected c10 or c100)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled images, pixel values in [0, 255] before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// CIFAR-100 superclass labels.
    pub coarse_labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let d = Dataset {
            images,
            labels,
            coarse_labels: None,
            num_classes,
            split,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.images.shape().n != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                self.images.shape().n,
                self.labels.len()
            )));
        }
        if let Some((index, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.num_classes)
        {
            return Err(Error::Label {
                index,
                label,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Shape {
        self.images.shape().with_n(1)
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse_labels: self
                .coarse_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Count of each label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Images converted to the compute precision, GCN applied if requested.
    pub fn prepared<T: Scalar>(&self, gcn: bool) -> Tensor<T> {
        if gcn {
            global_contrast_normalize(&self.images).cast()
        } else {
            self.images.cast()
        }
    }
}

/// Split `0..n` into batches of at most `batch`, in `order`.
pub fn batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse() {
        assert_eq!("c10".parse::<CifarVariant>().unwrap(), CifarVariant::C10);
        assert_eq!("c100".parse::<CifarVariant>().unwrap().classes(), 100);
        assert!("c20".parse::<CifarVariant>().is_err());
        assert_eq!(CifarVariant::C100.record_len(), 3074);
    }

    #[test]
    fn labels_are_checked() {
        let images = Tensor::zeros(Shape::new(2, 3, 2, 2));
        assert!(Dataset::new(images.clone(), vec![0, 1], 2, Split::Train).is_ok());
        assert!(matches!(
            Dataset::new(images.clone(), vec![0, 2], 2, Split::Train),
            Err(Error::Label { index: 1, .. })
        ));
        assert!(Dataset::new(images, vec![0], 2, Split::Train).is_err());
    }

    #[test]
    fn subset_keeps_pairs_together() {
        let images = Tensor::from_fn(Shape::new(3, 1, 1, 1), |n, _, _, _| n as f32);
        let d = Dataset::new(images, vec![0, 1, 2], 3, Split::Test).unwrap();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.labels, [2, 0]);
        assert_eq!(s.images.data(), &[2.0, 0.0]);
        assert_eq!(d.truncated(10).len(), 3);
    }
}
