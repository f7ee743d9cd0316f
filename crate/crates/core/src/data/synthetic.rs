//! Procedural shapes on textured noise, with exact object boxes.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaolError};
use crate::tensor::Tensor;
use crate::wsol::BoundingBox;

use super::LabeledImage;

/// Shape drawn for each class, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Membership at offset `(u, v)` from the centre in units of the radius.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeKind::Ring => (0.36..=1.0).contains(&r2),
        }
    }
}

/// `count` images of `image_size²` pixels. Labels are balanced: every run
/// of `num_classes` consecutive images holds each class once.
pub fn gen_synthetic(count: usize, seed: u64, image_size: usize, num_classes: usize) -> Result<Vec<LabeledImage>> {
    if image_size < 16 {
        return Err(SaolError::Argument(format!("image size {image_size} below 16")));
    }
    if !(2..=ShapeKind::ALL.len()).contains(&num_classes) {
        return Err(SaolError::Argument(format!("{num_classes} classes, expected 2..=5")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = Vec::with_capacity(count + num_classes);
    while labels.len() < count {
        let mut block: Vec<usize> = (0..num_classes).collect();
        block.shuffle(&mut rng);
        labels.extend(block);
    }
    labels
        .into_iter()
        .take(count)
        .map(|label| draw(label, image_size, &mut rng))
        .collect()
}

fn draw(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<LabeledImage> {
    let kind = ShapeKind::ALL[label];
    let s = size as f64;
    loop {
        let r = rng.random_range(0.2 * s..0.35 * s);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.45));
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
        // stripe frequencies of either sign, so no orientation is favoured
        let mut freq = || rng.random_range(0.2..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (fx, fy) = (freq(), freq());
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut inside = vec![false; size * size];
        for (i, cell) in inside.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            *cell = kind.contains((x - cx) / r, (y - cy) / r);
        }
        let Some(bbox) = tight_box(&inside, size) else {
            continue;
        };
        if bbox.area() < 9 {
            continue;
        }
        let mut data = vec![0.0; 3 * size * size];
        for ch in 0..3 {
            for i in 0..size * size {
                let (y, x) = ((i / size) as f64, (i % size) as f64);
                let v = if inside[i] {
                    color[ch] + rng.random_range(-0.05..0.05)
                } else {
                    base[ch] + 0.12 * (fx * x + fy * y + phase).sin() + rng.random_range(-0.08..0.08)
                };
                data[ch * size * size + i] = v.clamp(0.0, 1.0);
            }
        }
        return LabeledImage::new(Tensor::new([3, size, size], data)?, label, Some(bbox));
    }
}

fn tight_box(mask: &[bool], size: usize) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / size, i % size);
        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
    }
    (x1 > x0).then_some(BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = gen_synthetic(50, 9, 32, 5).unwrap();
        assert_eq!(a, gen_synthetic(50, 9, 32, 5).unwrap());
        assert_ne!(a, gen_synthetic(50, 10, 32, 5).unwrap());
        for img in &a {
            let b = img.bbox.unwrap();
            assert!(b.within(32, 32) && b.area() >= 9);
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn labels_balanced() {
        let imgs = gen_synthetic(12, 0, 16, 3).unwrap();
        for k in 0..3 {
            assert_eq!(imgs.iter().filter(|i| i.label == k).count(), 4);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_synthetic(1, 0, 15, 3).is_err());
        assert!(gen_synthetic(1, 0, 32, 6).is_err());
        assert!(gen_synthetic(1, 0, 32, 1).is_err());
    }
}
