//! Shared oracles and fixtures for the integration tests.

#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saol::backbone::BackboneConfig;
use saol::head::{SaolConfig, SaolModel};
use saol::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values in `±[gap, hi)`, keeping clear of a kink at zero.
pub fn away_from_zero(shape: &[usize], gap: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Rows that are probability vectors.
pub fn random_distributions(rows: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = uniform(&[rows, k], 0.05, 1.0, rng);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    Tensor::from_fn([labels.len(), k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 })
}

/// Small three-block model for property tests.
pub fn tiny_configs(k: usize) -> (BackboneConfig, SaolConfig) {
    (
        BackboneConfig {
            base_channels: vec![2, 3, 4],
            strides: vec![1, 2, 2],
            input_size: (8, 8),
            ..Default::default()
        },
        SaolConfig {
            num_classes: k,
            mid_channels: Some(3),
            ..Default::default()
        },
    )
}

/// A model whose every parameter, including the zero-initialized ones, is
/// drawn uniformly from `±scale`.
pub fn random_model(bb: BackboneConfig, head: SaolConfig, scale: f64, seed: u64) -> SaolModel {
    let mut r = rng(seed);
    let mut model = SaolModel::new(bb, head, &mut r).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
    model
}

/// Largest 4-connected region by repeated min-label propagation: every
/// pixel ends up labelled with the raster index of its region's first pixel.
/// Returns `(size, [y0, x0, y1, x1])`, ties to the smaller label.
pub fn flood_fill_largest(mask: &[bool], h: usize, w: usize) -> Option<(usize, [usize; 4])> {
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if !mask[p] {
                    continue;
                }
                let mut best = label[p];
                let neighbours = [
                    (y > 0).then(|| p - w),
                    (y + 1 < h).then(|| p + w),
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                ];
                for q in neighbours.into_iter().flatten() {
                    if mask[q] {
                        best = best.min(label[q]);
                    }
                }
                if best < label[p] {
                    label[p] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for root in 0..h * w {
        if !mask[root] || label[root] != root {
            continue;
        }
        let size = (0..h * w).filter(|&p| mask[p] && label[p] == root).count();
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, root));
        }
    }
    best.map(|(size, root)| {
        let members: Vec<usize> = (0..h * w).filter(|&p| mask[p] && label[p] == root).collect();
        let ys = members.iter().map(|p| p / w);
        let xs = members.iter().map(|p| p % w);
        (
            size,
            [ys.clone().min().unwrap(), xs.clone().min().unwrap(), ys.max().unwrap() + 1, xs.max().unwrap() + 1],
        )
    })
}

/// Random binary mask with roughly `density` coverage.
pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..h * w).map(|_| rng.random_bool(density)).collect()
}
