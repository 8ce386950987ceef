//! Convolution kernels (im2col + gemm) and the direct central-difference
//! reference.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a square-kernel 2-d convolution. `pad` is signed so that
/// internal callers can express a crop (negative padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: isize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: isize) -> Result<Self> {
        let (n, c_in, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv input must be NCHW, got {:?}", x)),
        };
        let (c_out, wi, kh, kw) = match *w {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(shape_err!("conv weight must be OIKK, got {:?}", w)),
        };
        if kh != kw {
            return Err(shape_err!("only square kernels are supported, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(shape_err!("kernel size must be odd, got {kh}"));
        }
        if wi != c_in {
            return Err(shape_err!(
                "input has {c_in} channels but weight expects {wi} (weight shape {:?})",
                w
            ));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be >= 1"));
        }
        let span_h = h as isize + 2 * pad - kh as isize;
        let span_w = wd as isize + 2 * pad - kh as isize;
        if span_h < 0 || span_w < 0 {
            return Err(shape_err!(
                "kernel {kh} with padding {pad} does not fit a {h}x{wd} input"
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: span_h as usize / stride + 1,
            w_out: span_w as usize / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source coordinate sampled by output index `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize) -> isize {
        (o * self.stride) as isize - self.pad + t as isize
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.col_cols();
    for i in 0..g.c_in {
        let xi = &x[i * plane..(i + 1) * plane];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (i * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.h_out {
                    let sh = g.src(oh, kh);
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if sh < 0 || sh >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &xi[sh as usize * g.w..(sh as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let sw = g.src(ow, kw);
                        *v = if sw < 0 || sw >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[sw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.col_cols();
    for i in 0..g.c_in {
        let gxi = &mut gx[i * plane..(i + 1) * plane];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (i * g.k + kh) * g.k + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.h_out {
                    let sh = g.src(oh, kh);
                    if sh < 0 || sh >= g.h as isize {
                        continue;
                    }
                    let base = sh as usize * g.w;
                    for ow in 0..g.w_out {
                        let sw = g.src(ow, kw);
                        if sw >= 0 && sw < g.w as isize {
                            let d = &mut gxi[base + sw as usize];
                            *d = *d + src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Plain (vanilla) convolution with zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: isize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(shape_err!("bias shape {:?} != [{}]", b.shape(), g.c_out));
        }
    }
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); g.n * g.c_out * ncols];
    let mut cols = vec![T::zero(); rows * ncols];
    let xplane = g.c_in * g.h * g.w;
    for b in 0..g.n {
        im2col(&g, &x.data()[b * xplane..(b + 1) * xplane], &mut cols);
        let y = &mut out[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        T::gemm(g.c_out, rows, ncols, w.data(), (rows as isize, 1), &cols, (ncols as isize, 1), T::zero(), y);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                y[o * ncols..(o + 1) * ncols].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of a convolution with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: isize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let xplane = g.c_in * g.h * g.w;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..g.n {
        let gyb = &gy.data()[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        if let Some(gw) = gw.as_mut() {
            im2col(&g, &x.data()[b * xplane..(b + 1) * xplane], &mut cols);
            // gw += gy_b (O x P) * cols^T (P x R)
            T::gemm(g.c_out, ncols, rows, gyb, (ncols as isize, 1), &cols, (1, ncols as isize), T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            // cols = w^T (R x O) * gy_b (O x P)
            T::gemm(rows, g.c_out, ncols, w.data(), (1, rows as isize), gyb, (ncols as isize, 1), T::zero(), &mut cols);
            col2im(&g, &cols, &mut gx[b * xplane..(b + 1) * xplane]);
        }
    }
    let gx = gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
    let gw = gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?;
    Ok((gx, gw))
}

/// Per-output-channel bias gradient: sum of `gy` over batch and space.
pub fn bias_grad<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = gy.dims4()?;
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (o, acc) in out.iter_mut().enumerate() {
            let s = (b * c + o) * plane;
            *acc = *acc + gy.data()[s..s + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], out)
}

/// Direct central-difference aggregation:
/// `y(p0) = sum_n w(p_n) * (x(p0 + p_n) - x(p0))`, zero padded, no bias.
///
/// Nested loops on purpose; this is the reference the fast path is tested
/// against.
pub fn central_diff_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: isize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let xd = x.data();
    let wd = w.data();
    let c = g.k / 2;
    let at = |b: usize, i: usize, r: isize, s: isize| -> T {
        if r < 0 || s < 0 || r >= g.h as isize || s >= g.w as isize {
            T::zero()
        } else {
            xd[((b * g.c_in + i) * g.h + r as usize) * g.w + s as usize]
        }
    };
    let mut out = vec![T::zero(); g.n * g.c_out * g.h_out * g.w_out];
    for b in 0..g.n {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = T::zero();
                    for i in 0..g.c_in {
                        let center = at(b, i, g.src(oh, c), g.src(ow, c));
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let wv = wd[((o * g.c_in + i) * g.k + kh) * g.k + kw];
                                acc = acc + wv * (at(b, i, g.src(oh, kh), g.src(ow, kw)) - center);
                            }
                        }
                    }
                    out[((b * g.c_out + o) * g.h_out + oh) * g.w_out + ow] = acc;
                }
            }
        }
    }
    Tensor::new(g.out_shape(), out)
}

pub fn central_diff_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: isize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let xd = x.data();
    let wd = w.data();
    let c = g.k / 2;
    let index = |b: usize, i: usize, r: isize, s: isize| -> Option<usize> {
        (r >= 0 && s >= 0 && r < g.h as isize && s < g.w as isize)
            .then(|| ((b * g.c_in + i) * g.h + r as usize) * g.w + s as usize)
    };
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    for b in 0..g.n {
        for o in 0..g.c_out {
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let go = gy.data()[((b * g.c_out + o) * g.h_out + oh) * g.w_out + ow];
                    for i in 0..g.c_in {
                        let ci = index(b, i, g.src(oh, c), g.src(ow, c));
                        let center = ci.map_or(T::zero(), |j| xd[j]);
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let widx = ((o * g.c_in + i) * g.k + kh) * g.k + kw;
                                let ni = index(b, i, g.src(oh, kh), g.src(ow, kw));
                                let nv = ni.map_or(T::zero(), |j| xd[j]);
                                gw[widx] = gw[widx] + go * (nv - center);
                                let gwv = go * wd[widx];
                                if let Some(j) = ni {
                                    gx[j] = gx[j] + gwv;
                                }
                                if let Some(j) = ci {
                                    gx[j] = gx[j] - gwv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sliding-window oracle written independently of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: isize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let ho = ((h as isize + 2 * pad - k as isize) / stride as isize + 1) as usize;
        let wo = ((wd as isize + 2 * pad - k as isize) / stride as isize + 1) as usize;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for z in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for a in 0..k {
                                for c in 0..k {
                                    let r = (y * stride) as isize - pad + a as isize;
                                    let s = (z * stride) as isize - pad + c as isize;
                                    if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                        acc += x.data()[((b * ci + i) * h + r as usize) * wd + s as usize]
                                            * w.data()[((o * ci + i) * k + a) * k + c];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + y) * wo + z] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_sliding_window() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(n, ci, h, w, co, k, s, p) in &[
            (1, 1, 5, 5, 1, 3, 1, 1isize),
            (2, 3, 7, 6, 4, 3, 2, 1),
            (1, 2, 4, 4, 3, 5, 1, 2),
            (2, 2, 6, 6, 2, 1, 2, 0),
            (1, 2, 9, 9, 2, 3, 3, 0),
            (1, 2, 6, 6, 2, 1, 1, -1),
        ] {
            let x = Tensor::new([n, ci, h, w], (0..n * ci * h * w).map(|_| next()).collect()).unwrap();
            let wt = Tensor::new([co, ci, k, k], (0..co * ci * k * k).map(|_| next()).collect()).unwrap();
            let got = conv2d_forward(&x, &wt, None, s, p).unwrap();
            let want = naive_conv(&x, &wt, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros([1, 2, 2, 2]), None, 1, 0).is_err());
        let err = conv2d_forward(&x, &Tensor::zeros([1, 3, 3, 3]), None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }
}
