use rand::Rng;

use crate::tensor::Tensor;

/// Random crop from a `pad`-pixel zero-padded copy plus a horizontal flip
/// with probability one half. `pixels` is `[C, H, W]`.
pub fn augment(pixels: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let src = pixels.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let x = if flip { w - 1 - x } else { x };
        let (sy, sx) = (y as isize + dy, x as isize + dx);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    })
}
