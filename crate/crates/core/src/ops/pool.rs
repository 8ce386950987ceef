use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Max pooling. Returns the output and, for every output element, the flat
/// input index it was taken from (first occurrence in row-major order on
/// ties).
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(shape_err!("maxpool window and stride must be >= 1"));
    }
    if k == stride && (h % stride != 0 || w % stride != 0) {
        return Err(shape_err!("maxpool: spatial size {h}x{w} not divisible by stride {stride}"));
    }
    if h < k || w < k {
        return Err(shape_err!("maxpool window {k} larger than input {h}x{w}"));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let j = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, arg))
}

/// Scatter of `gy` through recorded argmax positions.
pub fn route_grad<T: Scalar>(in_shape: &[usize], gy: &[T], arg: &[usize]) -> Result<Tensor<T>> {
    let mut gx = Tensor::zeros(in_shape.to_vec());
    let d = gx.data_mut();
    for (&g, &j) in gy.iter().zip(arg) {
        d[j] = d[j] + g;
    }
    Ok(gx)
}

/// Mean over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        let o = &mut out[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let s = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (a, &v) in o.iter_mut().zip(s) {
                *a = *a + v;
            }
        }
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    Tensor::new([n, 1, h, w], out)
}

/// Max over the channel axis with first-occurrence argmax.
pub fn channel_max<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    let mut arg = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = b * c * plane + p;
            for ch in 1..c {
                let j = (b * c + ch) * plane + p;
                if x.data()[j] > x.data()[best] {
                    best = j;
                }
            }
            out.push(x.data()[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::new([n, 1, h, w], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_four() {
        let x = Tensor::<f32>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn tie_goes_to_first_occurrence() {
        let x = Tensor::<f32>::from_f64([1, 1, 2, 2], &[4.0, 4.0, 4.0, 1.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = route_grad(x.shape(), &[1.0f32], &arg).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::<f32>::full([1, 2, 4, 4], 0.3);
        let (y, _) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn rejects_non_divisible() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 4]);
        assert!(maxpool2d_forward(&x, 2, 2).is_err());
    }
}
