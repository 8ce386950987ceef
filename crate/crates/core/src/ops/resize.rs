use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel centers (align_corners = false), edge clamped.
    Bilinear,
}

/// One output coordinate's contributions: `(i0, i1, weight of i1)`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize, mode: ResizeMode) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(src - 1);
                Tap { i0: i, i1: i, frac: 0.0 }
            }
            ResizeMode::Bilinear => {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let frac = if i1 == i0 { 0.0 } else { s - i0 as f64 };
                Tap { i0, i1, frac }
            }
        })
        .collect()
}

fn check(x: &Tensor<impl Scalar>, out_h: usize, out_w: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize target must be at least 1x1, got {out_h}x{out_w}"));
    }
    if dims.2 == 0 || dims.3 == 0 {
        return Err(shape_err!("resize of empty image"));
    }
    Ok(dims)
}

pub fn resize_forward<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check(x, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h, mode);
    let tx = taps(w, out_w, mode);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for a in &ty {
            let fy = T::from_f64_lossy(a.frac);
            for b in &tx {
                let fx = T::from_f64_lossy(b.frac);
                let top = src[a.i0 * w + b.i0] * (T::one() - fx) + src[a.i0 * w + b.i1] * fx;
                let bot = src[a.i1 * w + b.i0] * (T::one() - fx) + src[a.i1 * w + b.i1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

pub fn resize_backward<T: Scalar>(
    in_shape: &[usize],
    gy: &Tensor<T>,
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *in_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err!("resize input must be NCHW")),
    };
    let (_, _, out_h, out_w) = gy.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(gy.clone());
    }
    let ty = taps(h, out_h, mode);
    let tx = taps(w, out_w, mode);
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        let g = &gy.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(b.frac);
                let v = g[oy * out_w + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                dst[a.i0 * w + b.i0] = dst[a.i0 * w + b.i0] + top * (T::one() - fx);
                dst[a.i0 * w + b.i1] = dst[a.i0 * w + b.i1] + top * fx;
                dst[a.i1 * w + b.i0] = dst[a.i1 * w + b.i0] + bot * (T::one() - fx);
                dst[a.i1 * w + b.i1] = dst[a.i1 * w + b.i1] + bot * fx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_2x2_to_1x1_is_mean() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[0.0, 2.0, 2.0, 4.0]).unwrap();
        let y = resize_forward(&x, 1, 1, ResizeMode::Bilinear).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f32>::full([1, 2, 5, 7], 0.25);
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
            for (h, w) in [(1, 1), (3, 2), (10, 14), (5, 7)] {
                let y = resize_forward(&x, h, w, mode).unwrap();
                assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
            }
        }
    }

    #[test]
    fn downsample_by_four_averages_the_two_middle_pixels() {
        let x = Tensor::<f64>::from_f64([1, 1, 1, 4], &[1.0, 2.0, 3.0, 10.0]).unwrap();
        let y = resize_forward(&x, 1, 1, ResizeMode::Bilinear).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        let n = resize_forward(&x, 1, 2, ResizeMode::Nearest).unwrap();
        assert_eq!(n.data(), &[1.0, 3.0]);
    }
}
