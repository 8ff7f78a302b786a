//! Labelled image sets: procedural two-domain toy data, IDX files and
//! augmentation.

mod augment;
mod idx;
mod toy;

pub use augment::{augment, augment_with, AugmentationPolicy};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use toy::{generate_toy, generate_toy_split, Shape, ToyDomainSpec};

use std::fmt;

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Pretrain,
    Finetune,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Pretrain => "pretrain",
            Domain::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `[n, H, W, C]` in `[-1, 1]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid(format!(
                "images must be [n, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(invalid(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {l} outside [0, {num_classes})")));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            domain,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels(&self) -> usize {
        self.images.row_len()
    }

    /// Image `i` as a `[H, W, C]` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let [h, w, c] = self.image_shape();
        Tensor::new(vec![h, w, c], self.images.row(i).to_vec()).expect("row shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            split: self.split,
        }
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn mean_pixel(&self) -> f64 {
        let d = self.images.data();
        d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64
    }

    /// Concatenates two sets with matching image shapes.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.image_shape() != other.image_shape() {
            return Err(invalid("cannot concatenate sets with different image shapes"));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images: Tensor::new(shape, data)?,
            labels,
            num_classes: self.num_classes.max(other.num_classes),
            domain: self.domain,
            split: self.split,
        })
    }

    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(self.images.clone(), labels, num_classes, self.domain, self.split)
    }
}

/// Maps an unsigned byte onto `[-1, 1]`.
pub fn normalize_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`], rounding and saturating.
pub fn denormalize_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
