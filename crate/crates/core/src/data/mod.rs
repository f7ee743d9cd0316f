//! Datasets, batching, checkpoints and metric logs.

mod augment;
mod checkpoint;
mod cifar;
mod metrics;
mod synthetic;

pub use augment::augment;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10, parse_cifar10, CIFAR_RECORD};
pub use metrics::{MetricsLog, MetricsRow};
pub use synthetic::{gen_synthetic, ShapeKind};

use crate::error::{Result, SaolError};
use crate::tensor::Tensor;
use crate::wsol::BoundingBox;

/// One image with its class and, when known, its object box.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub bbox: Option<BoundingBox>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, label: usize, bbox: Option<BoundingBox>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 {
            return Err(SaolError::Dimension(format!("image must be [C, H, W], got {s:?}")));
        }
        if let Some(b) = bbox {
            if !b.within(s[1], s[2]) {
                return Err(SaolError::Argument(format!("box {b} outside {}x{} image", s[1], s[2])));
            }
        }
        Ok(LabeledImage { pixels, label, bbox })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}

/// Per-channel affine normalization applied when batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Channel statistics of a dataset.
    pub fn fit(images: &[LabeledImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| SaolError::Argument("cannot fit a normalizer on no images".into()))?;
        let c = first.pixels.shape()[0];
        let plane = first.pixels.numel() / c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in images {
            for (ch, chunk) in img.pixels.data().chunks(plane).enumerate() {
                sum[ch] += chunk.iter().sum::<f64>();
                sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let count = (images.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, pixels: &[f64], out: &mut Vec<f64>) {
        let plane = pixels.len() / self.mean.len();
        for (ch, chunk) in pixels.chunks(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            out.extend(chunk.iter().map(|v| (v - m) / s));
        }
    }
}

/// Stacks `images[indices]` into `[N, C, H, W]` inputs and `[N, K]` one-hot
/// labels.
pub fn make_batch(
    images: &[LabeledImage],
    indices: &[usize],
    num_classes: usize,
    norm: &Normalizer,
) -> Result<(Tensor, Tensor)> {
    let first = images
        .get(*indices.first().ok_or_else(|| SaolError::Argument("empty batch".into()))?)
        .ok_or_else(|| SaolError::Argument("batch index out of range".into()))?;
    let shape = first.pixels.shape().to_vec();
    let mut x = Vec::with_capacity(indices.len() * first.pixels.numel());
    let mut y = vec![0.0; indices.len() * num_classes];
    for (row, &i) in indices.iter().enumerate() {
        let img = images
            .get(i)
            .ok_or_else(|| SaolError::Argument(format!("batch index {i} out of range")))?;
        if img.pixels.shape() != shape {
            return Err(SaolError::Dimension(format!(
                "mixed image shapes {:?} and {shape:?}",
                img.pixels.shape()
            )));
        }
        if img.label >= num_classes {
            return Err(SaolError::Argument(format!(
                "label {} out of range for {num_classes} classes",
                img.label
            )));
        }
        norm.apply(img.pixels.data(), &mut x);
        y[row * num_classes + img.label] = 1.0;
    }
    let mut xs = vec![indices.len()];
    xs.extend_from_slice(&shape);
    Ok((Tensor::new(xs, x)?, Tensor::new([indices.len(), num_classes], y)?))
}
