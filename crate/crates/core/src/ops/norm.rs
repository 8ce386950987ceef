use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by the batch-norm forward pass for its backward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Output of a training-mode batch norm: the normalized tensor plus the
/// batch statistics (mean, unbiased variance) for the running update.
pub struct BnOutput<T> {
    pub y: Tensor<T>,
    pub saved: BnSaved<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n == 0 {
        return Err(shape_err!("batch norm on an empty batch"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batch norm affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok((n, c, h * w))
}

pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<BnOutput<T>> {
    let (n, c, plane) = check(x, gamma, beta)?;
    let m = n * plane;
    let mf = T::from_usize(m).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * plane;
            s = s + xd[o..o + plane].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut v = T::zero();
        for b in 0..n {
            let o = (b * c + ch) * plane;
            v = v + xd[o..o + plane].iter().map(|&a| (a - mu) * (a - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for j in o..o + plane {
                xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                y[j] = g * xhat[j] + bt;
            }
        }
    }
    let unbias = if m > 1 { mf / T::from_usize(m - 1).unwrap() } else { T::one() };
    let batch_var_unbiased = var.iter().map(|&v| v * unbias).collect();
    Ok(BnOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        saved: BnSaved { xhat, inv_std, training: true },
        batch_mean: mean,
        batch_var_unbiased,
    })
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(shape_err!("running statistics do not match {c} channels"));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let mu = running_mean.data()[ch];
            for j in o..o + plane {
                xhat[j] = (x.data()[j] - mu) * inv_std[ch];
                y[j] = gamma.data()[ch] * xhat[j] + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, BnSaved { xhat, inv_std, training: false }))
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = gy.dims4()?;
    let plane = h * w;
    let mf = T::from_usize(n * plane).unwrap();
    let gd = gy.data();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            for j in o..o + plane {
                gbeta[ch] = gbeta[ch] + gd[j];
                ggamma[ch] = ggamma[ch] + gd[j] * saved.xhat[j];
            }
        }
    }
    let mut gx = vec![T::zero(); gy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let k = gamma.data()[ch] * saved.inv_std[ch];
            for j in o..o + plane {
                gx[j] = if saved.training {
                    k * (gd[j] - gbeta[ch] / mf - saved.xhat[j] * ggamma[ch] / mf)
                } else {
                    k * gd[j]
                };
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), gx)?,
        Tensor::new([c], ggamma)?,
        Tensor::new([c], gbeta)?,
    ))
}
