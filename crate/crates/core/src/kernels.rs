//! Raw numeric kernels behind the differentiable ops: im2col convolution on
//! top of a blocked GEMM, and separable bilinear resampling.

/// `c = alpha * a·b + beta * c` for strided row-major views.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with `(rsb, csb)`,
/// `c` is `m×n` and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Edge-replicate instead of zero padding.
    pub replicate: bool,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`, or
    /// `None` when it falls in zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        if i >= 0 && i < len as isize {
            Some(i as usize)
        } else if self.replicate {
            Some(i.clamp(0, len as isize - 1) as usize)
        } else {
            None
        }
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        d.fill(0.0);
                        continue;
                    };
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        *v = g.source(ox, kx, g.w).map_or(0.0, |ix| src[ix]);
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    let drow = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            drow[ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * plane;
    let mut out = vec![0.0; g.n * out_sample];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for s in 0..g.n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let os = &mut out[s * out_sample..(s + 1) * out_sample];
        for (co, &b) in bias.iter().enumerate() {
            os[co * plane..(co + 1) * plane].fill(b);
        }
        let b: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        gemm(g.c_out, patch, plane, 1.0, weight, (patch, 1), b, (plane, 1), 1.0, os);
    }
    out
}

/// Accumulates input, weight and bias adjoints of a convolution. Any of the
/// three sinks may be `None` when that operand needs no gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * plane;
    let mut cols = vec![0.0; patch * plane];
    for s in 0..g.n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let ds = &dout[s * out_sample..(s + 1) * out_sample];
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += ds[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let b: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW[co, p] += Σ_q dout[co, q] · cols[p, q]
            gemm(g.c_out, plane, patch, 1.0, ds, (plane, 1), b, (1, plane), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
            if g.is_pointwise() {
                gemm(g.c_in, g.c_out, plane, 1.0, weight, (1, patch), ds, (plane, 1), 1.0, dxs);
            } else {
                gemm(g.c_in * g.k * g.k, g.c_out, plane, 1.0, weight, (1, patch), ds, (plane, 1), 0.0, &mut cols);
                col2im_add(g, &cols, dxs);
            }
        }
    }
}

/// Source taps for one axis of an align-corners-false linear resample:
/// `(lo, hi, frac)` per output index.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                // lerp form keeps constant inputs exact
                let top = a + fx * (b - a);
                let bottom = c + fx * (d - c);
                dst[oy * ow + ox] = top + fy * (bottom - top);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    dout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.out_h * g.out_w];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let mut iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let mut ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if g.replicate {
                                        iy = iy.clamp(0, g.h as isize - 1);
                                        ix = ix.clamp(0, g.w as isize - 1);
                                    }
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_loop() {
        for &(k, stride, pad, h, replicate) in &[
            (3, 1, 1, 5, false),
            (3, 2, 1, 6, false),
            (1, 2, 0, 4, false),
            (1, 1, 0, 3, false),
            (2, 1, 0, 4, false),
            (3, 1, 1, 5, true),
            (3, 2, 2, 6, true),
        ] {
            let g = ConvGeom {
                n: 2,
                c_in: 3,
                h,
                w: h + 1,
                c_out: 4,
                k,
                stride,
                pad,
                replicate,
                out_h: (h + 2 * pad - k) / stride + 1,
                out_w: (h + 1 + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..g.n * g.c_in * g.h * g.w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.c_out * g.patch()).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let b = vec![0.5, -1.0, 0.0, 2.0];
            let fast = conv2d_forward(&g, &x, &wt, &b);
            let slow = direct_conv(&g, &x, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e} for {g:?}");
            }
        }
    }

    #[test]
    fn taps_identity_and_endpoints() {
        for (o, &(lo, _, f)) in linear_taps(4, 4).iter().enumerate() {
            assert_eq!(lo, o);
            assert_eq!(f, 0.0);
        }
        let t = linear_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3], (1, 1, 0.0));
    }
}
