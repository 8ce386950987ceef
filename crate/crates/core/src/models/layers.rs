use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, Mode, ParamId, ParamStore};
use crate::autograd::Var;
use crate::cdc::{cdc, cdc_decomposed, vanilla_conv, CdcSpec};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Evaluation route for CDC layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    /// One dense convolution plus the center-pixel correction.
    Decomposed,
    /// Direct blend of the two aggregations.
    Reference,
    /// Plain convolution regardless of θ.
    Vanilla,
}

/// Allocates parameters in a fixed order from a seeded generator.
pub(crate) struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, shape: [usize; 4], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound))).collect();
        Tensor::new(shape, data).expect("shape")
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, spec: CdcSpec) -> Conv {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w = self.uniform([c_out, c_in, k, k], bound);
        let weight = self.store.push(format!("{name}.weight"), w, true);
        let bias = bias.then(|| {
            let b = self.uniform([c_out, 1, 1, 1], bound).reshape([c_out]).expect("shape");
            self.store.push(format!("{name}.bias"), b, true)
        });
        Conv { weight, bias, spec, path: ConvPath::Decomposed }
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.push(format!("{name}.gamma"), Tensor::ones([c]), true),
            beta: self.store.push(format!("{name}.beta"), Tensor::zeros([c]), true),
            running_mean: self.store.push(format!("{name}.running_mean"), Tensor::zeros([c]), false),
            running_var: self.store.push(format!("{name}.running_var"), Tensor::ones([c]), false),
        }
    }

    pub fn conv_bn_relu(&mut self, name: &str, c_in: usize, c_out: usize, theta: f64) -> Result<ConvBnRelu> {
        let spec = CdcSpec::same(theta, 3)?;
        Ok(ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), c_in, c_out, 3, false, spec),
            bn: self.batchnorm(&format!("{name}.bn"), c_out),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: CdcSpec,
    pub path: ConvPath,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        match self.path {
            ConvPath::Decomposed => cdc_decomposed(&mut ctx.tape, x, w, b, self.spec),
            ConvPath::Reference => cdc(&mut ctx.tape, x, w, b, self.spec),
            ConvPath::Vanilla => vanilla_conv(&mut ctx.tape, x, w, b, self.spec),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batchnorm_train(x, g, b)?;
                ctx.update_running(self.running_mean, &mean);
                ctx.update_running(self.running_var, &var);
                Ok(y)
            }
            Mode::Eval => {
                let (rm, rv) = (ctx.buffer(self.running_mean), ctx.buffer(self.running_var));
                ctx.tape.batchnorm_eval(x, g, b, rm, rv)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Spatial attention: `f ⊙ sigmoid(conv_k([mean_c f, max_c f]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub weight: ParamId,
    pub kernel: usize,
}

impl SpatialAttention {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, kernel: usize) -> Self {
        let conv = b.conv(name, 2, 1, kernel, false, CdcSpec { theta: 0.0, stride: 1, padding: kernel / 2 });
        Self { weight: conv.weight, kernel }
    }

    /// The attention map `[N,1,H,W]`.
    pub fn map<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let mean = ctx.tape.channel_mean(f)?;
        let max = ctx.tape.channel_max(f)?;
        let pooled = ctx.tape.concat_channels(&[mean, max])?;
        let w = ctx.param(self.weight);
        let logits = ctx.tape.conv2d(pooled, w, None, 1, self.kernel / 2)?;
        Ok(ctx.tape.sigmoid(logits))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let a = self.map(ctx, f)?;
        ctx.tape.mul_broadcast_channels(f, a)
    }
}
