//! CutMix batch construction and the spatial labels derived from it.
//!
//! Each sample `n` of the batch (the base image `x_B`) receives a rectangle
//! cut from its permutation partner `x_A`. The rectangle covers an area
//! fraction of about `λ₀ ~ Beta(α, α)`. The realized fraction `λ` is then
//! recomputed from the pixel mask and used to mix the labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Result, SaolError};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutMixBatch {
    /// `x′ = M⊙x_A + (1−M)⊙x_B`, `[N, C, H, W]`.
    pub mixed: Tensor,
    /// `y′ = λ·y_A + (1−λ)·y_B`, `[N, K]`.
    pub mixed_labels: Tensor,
    /// `M`, `[N, 1, H, W]`, one on pixels taken from `x_A`.
    pub mask: Tensor,
    /// Realized area fraction of every sample's rectangle.
    pub lambda: Vec<f64>,
    /// Patch-source images `x_A`, `[N, C, H, W]`.
    pub source: Tensor,
    /// One-hot or soft labels of `x_A`.
    pub source_labels: Tensor,
    /// `permutation[n]` is the batch index of sample `n`'s patch source.
    pub permutation: Vec<usize>,
    pub rects: Vec<Rect>,
}

/// Rectangle with sides `round(H·√λ₀) × round(W·√λ₀)` whose top-left
/// corner is `(u_y, u_x) ∈ [0,1)²` scaled over the positions where it fits.
pub fn cutmix_rect(h: usize, w: usize, lambda0: f64, u_y: f64, u_x: f64) -> Rect {
    let side = lambda0.clamp(0.0, 1.0).sqrt();
    let ch = ((h as f64 * side).round() as usize).min(h);
    let cw = ((w as f64 * side).round() as usize).min(w);
    let y0 = ((u_y * (h - ch + 1) as f64) as usize).min(h - ch);
    let x0 = ((u_x * (w - cw + 1) as f64) as usize).min(w - cw);
    Rect {
        y0,
        x0,
        y1: (y0 + ch).min(h),
        x1: (x0 + cw).min(w),
    }
}

pub fn sample_cutmix(x: &Tensor, y: &Tensor, alpha: f64, seed: u64) -> Result<CutMixBatch> {
    sample_cutmix_with(x, y, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_cutmix_with(x: &Tensor, y: &Tensor, alpha: f64, rng: &mut impl Rng) -> Result<CutMixBatch> {
    let [n, _, h, w] = x.dims4()?;
    if n < 2 {
        return Err(SaolError::Argument("CutMix needs a batch of at least 2".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SaolError::Argument(format!("CutMix alpha must be positive, got {alpha}")));
    }
    if y.rank() != 2 || y.shape()[0] != n {
        return Err(SaolError::Dimension(format!(
            "labels {:?} do not match batch of {n}",
            y.shape()
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| SaolError::Argument(e.to_string()))?;
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(rng);
    let rects: Vec<Rect> = (0..n)
        .map(|_| {
            let lambda0: f64 = beta.sample(rng);
            cutmix_rect(h, w, lambda0, rng.random(), rng.random())
        })
        .collect();
    apply_cutmix(x, y, permutation, rects)
}

/// Pastes `rects[n]` of sample `permutation[n]` onto sample `n`.
pub fn apply_cutmix(x: &Tensor, y: &Tensor, permutation: Vec<usize>, rects: Vec<Rect>) -> Result<CutMixBatch> {
    let [n, c, h, w] = x.dims4()?;
    if permutation.len() != n || rects.len() != n || permutation.iter().any(|&p| p >= n) {
        return Err(SaolError::Argument("pairing does not match the batch".into()));
    }
    if rects.iter().any(|r| r.y0 > r.y1 || r.x0 > r.x1 || r.y1 > h || r.x1 > w) {
        return Err(SaolError::Argument("rectangle outside the image".into()));
    }
    let source = x.gather_rows(&permutation);
    let source_labels = y.gather_rows(&permutation);
    let mut mixed = x.clone();
    let mut mask = Tensor::zeros([n, 1, h, w]);
    let plane = h * w;
    for (s, rect) in rects.iter().enumerate() {
        let m = &mut mask.data_mut()[s * plane..(s + 1) * plane];
        for i in rect.y0..rect.y1 {
            m[i * w + rect.x0..i * w + rect.x1].fill(1.0);
        }
        let src = &source.data()[s * c * plane..(s + 1) * c * plane];
        let dst = &mut mixed.data_mut()[s * c * plane..(s + 1) * c * plane];
        for ch in 0..c {
            for i in rect.y0..rect.y1 {
                let row = ch * plane + i * w;
                dst[row + rect.x0..row + rect.x1].copy_from_slice(&src[row + rect.x0..row + rect.x1]);
            }
        }
    }
    let lambda: Vec<f64> = (0..n)
        .map(|s| mask.data()[s * plane..(s + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();

    let k = y.shape()[1];
    let mixed_labels = Tensor::from_fn([n, k], |i| {
        let (s, j) = (i / k, i % k);
        let l = lambda[s];
        l * source_labels.data()[s * k + j] + (1.0 - l) * y.data()[s * k + j]
    });
    Ok(CutMixBatch {
        mixed,
        mixed_labels,
        mask,
        lambda,
        source,
        source_labels,
        permutation,
        rects,
    })
}

/// Area-average pooling of a `[N, 1, H, W]` mask onto an `out_h × out_w`
/// grid: every output cell holds the covered fraction of its footprint.
pub fn downsample_mask(mask: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = mask.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(SaolError::Argument("mask target must be at least 1x1".into()));
    }
    let ty = footprints(h, out_h);
    let tx = footprints(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = mask.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let m = &src[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                let mut area = 0.0;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc += m[iy * w + ix] * wy * wx;
                        area += wy * wx;
                    }
                }
                dst[(p * out_h + oy) * out_w + ox] = acc / area;
            }
        }
    }
    Ok(out)
}

/// Input cells overlapped by each output cell, with overlap lengths.
fn footprints(len: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            (a.floor() as usize..(b.ceil() as usize).min(len))
                .filter_map(|i| {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}
