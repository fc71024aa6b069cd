//! Labeled image sets, normalization, and on-disk formats.

mod cifar;
mod condensed;
mod toy;

pub use cifar::{load_cifar_binary, CifarLayout, CIFAR_IMAGE_BYTES};
pub use condensed::{decode_condensed, encode_condensed, load_condensed, save_condensed, CONDENSED_MAGIC, CONDENSED_VERSION};
pub use toy::{gen_toy_dataset, ToyConfig};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-channel affine map between raw pixel space and normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Channel statistics of raw `[M,C,H,W]` images (population std).
    pub fn fit(raw: &Tensor<f32>) -> Self {
        let [_, c, h, w] = dims(raw);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, plane) in raw.data().chunks(h * w).enumerate() {
            let ch = i % c;
            for &v in plane {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (raw.numel() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &Tensor<f32>) -> Tensor<f32> {
        self.apply(raw, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, normalized: &Tensor<f32>) -> Tensor<f32> {
        self.apply(normalized, |v, m, s| v * s + m)
    }

    fn apply(&self, t: &Tensor<f32>, f: impl Fn(f32, f32, f32) -> f32) -> Tensor<f32> {
        let [_, c, h, w] = dims(t);
        let mut out = t.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = f(*v, self.mean[ch], self.std[ch]);
            }
        }
        out
    }
}

pub(crate) fn dims<T>(t: &Tensor<T>) -> [usize; 4]
where
    T: crate::autodiff::Real,
{
    match *t.shape() {
        [m, c, h, w] => [m, c, h, w],
        ref s => panic!("expected [M,C,H,W] images, got {s:?}"),
    }
}

/// Images in normalized space with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    norm: Normalization,
}

impl Dataset {
    /// Wraps already-normalized images.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, norm: Normalization) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape("dataset", format!("images must be [M,C,H,W], got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.rows(), labels.len()),
            ));
        }
        if norm.channels() != images.shape()[1] {
            return Err(Error::shape("dataset", "normalization channel count differs from images"));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::config(format!("label {l} at index {i} >= {num_classes} classes")));
            }
            class_index[l].push(i);
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            class_index,
            norm,
        })
    }

    /// Normalizes raw `[0,1]` images, fitting statistics when `norm` is `None`.
    pub fn from_raw(raw: Tensor<f32>, labels: Vec<usize>, num_classes: usize, norm: Option<&Normalization>) -> Result<Self> {
        let norm = norm.cloned().unwrap_or_else(|| Normalization::fit(&raw));
        let images = norm.normalize(&raw);
        Self::new(images, labels, num_classes, norm)
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn norm(&self) -> &Normalization {
        &self.norm
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = dims(&self.images);
        [c, h, w]
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        self.images.select_rows(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(
            self.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.norm.clone(),
        )
        .expect("subset of a valid dataset is valid")
    }

    /// Images mapped back to raw pixel space.
    pub fn raw_images(&self) -> Tensor<f32> {
        self.norm.denormalize(&self.images)
    }
}
