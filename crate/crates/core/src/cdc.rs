//! Central difference convolution.
//!
//! The generalized operator blends two aggregations over the same sampled
//! receptive field `R` around each output location `p0`:
//!
//! ```text
//! y(p0) = θ · Σ w(pn)·(x(p0+pn) − x(p0))  +  (1−θ) · Σ w(pn)·x(p0+pn)
//! ```
//!
//! `θ = 0` is a plain convolution and `θ = 1` aggregates only center-oriented
//! differences, which vanish on constant inputs. Expanding the sum gives the
//! cheaper form used in the networks:
//!
//! ```text
//! y(p0) = Σ w(pn)·x(p0+pn) − θ · x(p0) · Σ w(pn)
//! ```
//!
//! i.e. one dense convolution minus θ times a 1×1 convolution of the center
//! pixels with the spatially summed kernel. [`cdc`] evaluates the blend
//! directly and serves as the reference for [`cdc_decomposed`].

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters shared by the convolution variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdcSpec {
    pub theta: f64,
    pub stride: usize,
    pub padding: usize,
}

impl CdcSpec {
    pub fn new(theta: f64, stride: usize, padding: usize) -> Result<Self> {
        let spec = Self { theta, stride, padding };
        spec.validate()?;
        Ok(spec)
    }

    /// Stride 1 with "same" padding for a `k×k` kernel.
    pub fn same(theta: f64, k: usize) -> Result<Self> {
        Self::new(theta, 1, k / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(invalid!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.stride == 0 {
            return Err(invalid!("stride must be >= 1"));
        }
        Ok(())
    }
}

fn add_bias<T: Scalar>(tape: &mut Tape<T>, y: Var, bias: Option<Var>) -> Result<Var> {
    match bias {
        Some(b) => tape.add_channel_bias(y, b),
        None => Ok(y),
    }
}

/// Plain weighted-sum convolution. `theta` is ignored.
pub fn vanilla_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: CdcSpec) -> Result<Var> {
    spec.validate()?;
    tape.conv2d(x, w, bias, spec.stride, spec.padding)
}

/// Pure center-oriented difference aggregation (`θ = 1` without blending),
/// evaluated by direct summation.
pub fn central_diff_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    spec: CdcSpec,
) -> Result<Var> {
    spec.validate()?;
    let y = tape.central_diff(x, w, spec.stride, spec.padding)?;
    add_bias(tape, y, bias)
}

/// Reference generalized CDC: `θ·central_diff + (1−θ)·vanilla`, bias added
/// once after blending.
pub fn cdc<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: CdcSpec) -> Result<Var> {
    spec.validate()?;
    let theta = T::from_f64_lossy(spec.theta);
    let diff = tape.central_diff(x, w, spec.stride, spec.padding)?;
    let plain = tape.conv2d(x, w, None, spec.stride, spec.padding)?;
    let a = tape.scale(diff, theta);
    let b = tape.scale(plain, T::one() - theta);
    let y = tape.add(a, b)?;
    add_bias(tape, y, bias)
}

/// Fast generalized CDC: one dense convolution plus a θ-scaled 1×1
/// correction over the zero-padded center-pixel map.
pub fn cdc_decomposed<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    spec: CdcSpec,
) -> Result<Var> {
    spec.validate()?;
    let plain = tape.conv2d(x, w, None, spec.stride, spec.padding)?;
    if spec.theta == 0.0 {
        return add_bias(tape, plain, bias);
    }
    let k = tape.shape(w)[2];
    let kernel_sum = tape.kernel_spatial_sum(w)?;
    // A 1x1 tap at offset `padding - k/2` lands on each window's center.
    let center_pad = spec.padding as isize - (k / 2) as isize;
    let center = tape.conv2d_signed(x, kernel_sum, None, spec.stride, center_pad)?;
    let correction = tape.scale(center, -T::from_f64_lossy(spec.theta));
    let y = tape.add(plain, correction)?;
    add_bias(tape, y, bias)
}

/// Which evaluation route a [`CdcLayer`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdcPath {
    Reference,
    Decomposed,
}

/// A standalone CDC layer holding its own weights.
#[derive(Clone, Debug)]
pub struct CdcLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: CdcSpec,
}

impl<T: Scalar> CdcLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, spec: CdcSpec) -> Result<Self> {
        spec.validate()?;
        let (o, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("CDC kernels must be square with odd size, got {kh}x{kw}"));
        }
        if let Some(b) = &bias {
            if b.shape() != [o] {
                return Err(shape_err!("bias shape {:?} does not match {o} output channels", b.shape()));
            }
        }
        Ok(Self { weight, bias, spec })
    }

    fn run(
        &self,
        x: &Tensor<T>,
        op: fn(&mut Tape<T>, Var, Var, Option<Var>, CdcSpec) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(self.weight.clone());
        let bv = self.bias.clone().map(|b| tape.constant(b));
        let y = op(&mut tape, xv, wv, bv, self.spec)?;
        Ok(tape.value(y).clone())
    }

    pub fn vanilla(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, vanilla_conv)
    }

    pub fn central_diff(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, central_diff_conv)
    }

    pub fn forward(&self, x: &Tensor<T>, path: CdcPath) -> Result<Tensor<T>> {
        match path {
            CdcPath::Reference => self.run(x, cdc),
            CdcPath::Decomposed => self.run(x, cdc_decomposed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Tensor<f64> {
        Tensor::from_f64([1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0]).unwrap()
    }

    fn ones_layer(theta: f64) -> CdcLayer<f64> {
        CdcLayer::new(Tensor::ones([1, 1, 3, 3]), None, CdcSpec::new(theta, 1, 0).unwrap()).unwrap()
    }

    #[test]
    fn vanilla_examples() {
        assert_eq!(ones_layer(0.0).vanilla(&Tensor::ones([1, 1, 3, 3])).unwrap().data(), &[9.0]);
        assert_eq!(ones_layer(0.0).vanilla(&grid()).unwrap().data(), &[46.0]);
    }

    #[test]
    fn central_diff_examples() {
        let layer = ones_layer(1.0);
        assert_eq!(layer.central_diff(&grid()).unwrap().data(), &[1.0]);
        let flat = Tensor::full([1, 1, 3, 3], 4.2);
        assert_eq!(layer.central_diff(&flat).unwrap().data(), &[0.0]);
        let point = CdcLayer::new(Tensor::full([2, 1, 1, 1], 3.0), None, CdcSpec::new(1.0, 1, 0).unwrap()).unwrap();
        assert!(point.central_diff(&grid()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blended_example() {
        let y = ones_layer(0.7).forward(&grid(), CdcPath::Reference).unwrap();
        assert!((y.data()[0] - 14.5).abs() < 1e-12);
        let y = ones_layer(0.7).forward(&grid(), CdcPath::Decomposed).unwrap();
        assert!((y.data()[0] - 14.5).abs() < 1e-12);
    }

    #[test]
    fn bias_added_once() {
        let spec = CdcSpec::new(0.4, 1, 0).unwrap();
        let layer = CdcLayer::new(Tensor::ones([1, 1, 3, 3]), Some(Tensor::full([1], 10.0)), spec).unwrap();
        for path in [CdcPath::Reference, CdcPath::Decomposed] {
            let y = layer.forward(&grid(), path).unwrap();
            assert!((y.data()[0] - (0.4 * 1.0 + 0.6 * 46.0 + 10.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sum_kernel_has_no_correction() {
        let w = Tensor::<f64>::from_f64([1, 1, 3, 3], &[1.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.5, 0.0, -0.5]).unwrap();
        let x = Tensor::from_f64([1, 1, 4, 4], &(0..16).map(|v| (v * v % 7) as f64).collect::<Vec<_>>()).unwrap();
        for theta in [0.0, 0.3, 1.0] {
            let layer = CdcLayer::new(w.clone(), None, CdcSpec::new(theta, 1, 1).unwrap()).unwrap();
            let fast = layer.forward(&x, CdcPath::Decomposed).unwrap();
            assert!(fast.max_abs_diff(&layer.vanilla(&x).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn invalid_theta_and_even_kernel() {
        assert!(CdcSpec::new(1.5, 1, 0).is_err());
        assert!(CdcSpec::new(-0.1, 1, 0).is_err());
        assert!(CdcLayer::<f32>::new(Tensor::ones([1, 1, 2, 2]), None, CdcSpec::new(0.5, 1, 0).unwrap()).is_err());
    }
}
