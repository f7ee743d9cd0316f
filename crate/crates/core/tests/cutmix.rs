mod common;

use common::{one_hot, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use saol::cutmix::{apply_cutmix, cutmix_rect, downsample_mask, sample_cutmix, sample_cutmix_with, Rect};
use saol::Tensor;

/// Bitwise reconstruction, mask/λ agreement and label mixing for one batch.
fn check_batch(x: &Tensor, y: &Tensor, b: &saol::cutmix::CutMixBatch) {
    let [n, c, h, w] = x.dims4().unwrap();
    let k = y.shape()[1];
    let plane = h * w;
    for s in 0..n {
        let a = b.permutation[s];
        let m = &b.mask.data()[s * plane..(s + 1) * plane];
        let r = b.rects[s];
        let mut ones = 0usize;
        for i in 0..plane {
            let inside = (r.y0..r.y1).contains(&(i / w)) && (r.x0..r.x1).contains(&(i % w));
            assert_eq!(m[i], if inside { 1.0 } else { 0.0 });
            ones += inside as usize;
            for ch in 0..c {
                let got = b.mixed.data()[(s * c + ch) * plane + i];
                let want = if inside { x.data()[(a * c + ch) * plane + i] } else { x.data()[(s * c + ch) * plane + i] };
                assert_eq!(got.to_bits(), want.to_bits());
                assert_eq!(b.source.data()[(s * c + ch) * plane + i], x.data()[(a * c + ch) * plane + i]);
            }
        }
        let lambda = ones as f64 / plane as f64;
        assert_eq!(b.lambda[s], lambda);
        assert!((0.0..=1.0).contains(&lambda));
        let mut row_sum = 0.0;
        for j in 0..k {
            let want = lambda * y.data()[a * k + j] + (1.0 - lambda) * y.data()[s * k + j];
            let got = b.mixed_labels.data()[s * k + j];
            assert!((got - want).abs() < 1e-15);
            row_sum += got;
        }
        assert!((row_sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ten_thousand_batches_reconstruct_exactly() {
    let r = &mut rng(0);
    let (n, k) = (4, 3);
    let mut lambdas = Vec::new();
    for t in 0..10_000u64 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let x = uniform(&[n, 2, h, w], -1.0, 1.0, r);
        let y = one_hot(&(0..n).map(|i| (i + t as usize) % k).collect::<Vec<_>>(), k);
        let b = sample_cutmix(&x, &y, 1.0, t).unwrap();
        check_batch(&x, &y, &b);
        lambdas.extend(b.lambda);
    }
    assert!(lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
}

/// `E[λ]` for `α = 1` on an `s × s` image, by direct integration: `λ₀` is
/// uniform, the side is `round(s·√λ₀)` and the placement never clips.
fn expected_lambda(s: usize) -> f64 {
    let steps = 200_000;
    (0..steps)
        .map(|i| {
            let l0 = (i as f64 + 0.5) / steps as f64;
            let side = (s as f64 * l0.sqrt()).round();
            side * side / (s * s) as f64
        })
        .sum::<f64>()
        / steps as f64
}

#[test]
fn mean_lambda_matches_oracle_at_alpha_one() {
    let x = Tensor::zeros([2, 1, 32, 32]);
    let y = one_hot(&[0, 1], 2);
    let r = &mut rng(1);
    let draws: Vec<f64> = (0..5_000)
        .flat_map(|_| sample_cutmix_with(&x, &y, 1.0, r).unwrap().lambda)
        .collect();
    assert_eq!(draws.len(), 10_000);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let oracle = expected_lambda(32);
    assert!((oracle - 0.5).abs() < 0.01, "oracle {oracle}");
    assert!((mean - oracle).abs() < 0.02, "mean {mean} oracle {oracle}");
    assert!((mean - 0.5).abs() < 0.02);
}

#[test]
fn same_seed_same_batch() {
    let x = uniform(&[5, 3, 6, 7], 0.0, 1.0, &mut rng(2));
    let y = one_hot(&[0, 1, 2, 0, 1], 3);
    assert_eq!(sample_cutmix(&x, &y, 0.7, 9).unwrap(), sample_cutmix(&x, &y, 0.7, 9).unwrap());
}

#[test]
fn quarter_patch_example() {
    // 16x16 patch on a 32x32 image
    let rect = cutmix_rect(32, 32, 0.25, 0.3, 0.6);
    assert_eq!((rect.y1 - rect.y0, rect.x1 - rect.x0), (16, 16));
    let x = uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng(3));
    let y = one_hot(&[0, 1], 2);
    let b = apply_cutmix(&x, &y, vec![1, 0], vec![rect, rect]).unwrap();
    assert_eq!(b.lambda, vec![0.25, 0.25]);
    assert_eq!(b.mixed_labels.data(), &[0.75, 0.25, 0.25, 0.75]);
    let empty = Rect { y0: 4, x0: 4, y1: 4, x1: 4 };
    let b = apply_cutmix(&x, &y, vec![1, 0], vec![empty, rect]).unwrap();
    assert_eq!(b.lambda[0], 0.0);
    assert_eq!(&b.mixed.data()[..3 * 1024], &x.data()[..3 * 1024]);
    assert_eq!(&b.mixed_labels.data()[..2], &[1.0, 0.0]);
}

proptest! {
    #[test]
    fn rect_always_fits(h in 1usize..40, w in 1usize..40, l in 0.0f64..=1.0, uy in 0.0f64..1.0, ux in 0.0f64..1.0) {
        let r = cutmix_rect(h, w, l, uy, ux);
        prop_assert!(r.y0 <= r.y1 && r.y1 <= h && r.x0 <= r.x1 && r.x1 <= w);
        prop_assert_eq!(r.y1 - r.y0, ((h as f64 * l.sqrt()).round() as usize).min(h));
    }

    #[test]
    fn downsampling_preserves_coverage(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, oh in 1usize..9, ow in 1usize..9) {
        let r = &mut rng(seed);
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = (r.random_range(y0..=h), r.random_range(x0..=w));
        let m = Tensor::from_fn([1, 1, h, w], |i| {
            ((y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))) as u8 as f64
        });
        let d = downsample_mask(&m, oh, ow).unwrap();
        prop_assert_eq!(d.shape(), &[1, 1, oh, ow][..]);
        prop_assert!(d.data().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        prop_assert!((mean(&d) - mean(&m)).abs() < 1e-12);
    }
}

#[test]
fn downsample_blocks() {
    let m = Tensor::from_fn([1, 1, 4, 4], |i| if i / 4 < 2 && i % 4 < 2 { 1.0 } else { 0.0 });
    assert_eq!(downsample_mask(&m, 2, 2).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    let ones = Tensor::full([2, 1, 6, 6], 1.0);
    assert!(downsample_mask(&ones, 4, 5).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    let half = Tensor::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
    assert_eq!(downsample_mask(&half, 1, 1).unwrap().data(), &[0.5]);
}
