//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive called on a [`Tape`] evaluates eagerly, appends a node
//! holding its output and the data its backward rule needs, and hands back a
//! [`Var`] handle. Nodes are appended after their parents, so walking the tape
//! in reverse is a valid topological order for [`Tape::backward`].
//!
//! ```
//! use cdcn::autograd::Tape;
//! use cdcn::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use crate::error::{shape_err, Result};
use crate::ops::conv::{self, bias_grad};
use crate::ops::norm::{self, BnSaved};
use crate::ops::pool;
use crate::ops::resize::{self, ResizeMode};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: isize },
    CentralDiff { x: Var, w: Var, stride: usize, pad: isize },
    MaxPool { x: Var, arg: Vec<usize> },
    Resize { x: Var, mode: ResizeMode },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Square { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    AddChannelBias { x: Var, b: Var },
    MulBroadcastChannels { x: Var, a: Var },
    ConcatChannels { parts: Vec<Var> },
    ChannelMean { x: Var },
    ChannelMax { x: Var, arg: Vec<usize> },
    KernelSpatialSum { w: Var },
    Slice { x: Var, offset: usize },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of primitive operations, owned by a single thread for the
/// duration of one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Zero-padded convolution of an NCHW input with an OIKK kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_signed(x, w, bias, stride, padding as isize)
    }

    /// Like [`conv2d`](Self::conv2d) but accepts negative padding (a crop).
    pub(crate) fn conv2d_signed(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: isize) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(y, &parents, Op::Conv2d { x, w, bias, stride, pad }))
    }

    /// Direct central-difference aggregation (reference implementation).
    pub fn central_diff(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let pad = padding as isize;
        let y = conv::central_diff_forward(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(y, &[x, w], Op::CentralDiff { x, w, stride, pad }))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, arg) = pool::maxpool2d_forward(self.value(x), k, stride)?;
        Ok(self.push(y, &[x], Op::MaxPool { x, arg }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let y = resize::resize_forward(self.value(x), out_h, out_w, mode)?;
        Ok(self.push(y, &[x], Op::Resize { x, mode }))
    }

    /// Training-mode batch norm. Returns the output and the batch mean and
    /// unbiased variance per channel.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let out = norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let v = self.push(out.y, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, saved: out.saved });
        Ok((v, out.batch_mean, out.batch_var_unbiased))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var> {
        let (y, saved) =
            norm::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var)?;
        Ok(self.push(y, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, saved }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, &[x], Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, &[x], Op::Scale { x, c })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, &[x], Op::Square { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, &[x], Op::Mean { x })
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(b) != [c] {
            return Err(shape_err!("bias {:?} does not match {c} channels", self.shape(b)));
        }
        let plane = h * w;
        let mut y = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + bd[(i / plane) % c];
        }
        debug_assert_eq!(y.numel(), n * c * plane);
        Ok(self.push(y, &[x, b], Op::AddChannelBias { x, b }))
    }

    /// `x[N,C,H,W] * a[N,1,H,W]`, broadcasting `a` over channels.
    pub fn mul_broadcast_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(a) != [n, 1, h, w] {
            return Err(shape_err!("attention map {:?} does not broadcast over {:?}", self.shape(a), self.shape(x)));
        }
        let plane = h * w;
        let mut y = self.value(x).clone();
        let ad = self.value(a).data();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let b = i / (c * plane);
            *v = *v * ad[b * plane + i % plane];
        }
        Ok(self.push(y, &[x, a], Op::MulBroadcastChannels { x, a }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&values)?;
        Ok(self.push(y, parts, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let y = pool::channel_mean(self.value(x))?;
        Ok(self.push(y, &[x], Op::ChannelMean { x }))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = pool::channel_max(self.value(x))?;
        Ok(self.push(y, &[x], Op::ChannelMax { x, arg }))
    }

    /// Sums an OIKK kernel over its spatial taps, giving an `[O,I,1,1]` kernel.
    pub fn kernel_spatial_sum(&mut self, w: Var) -> Result<Var> {
        let (o, i, kh, kw) = self.value(w).dims4()?;
        let taps = kh * kw;
        let data = self.value(w).data().chunks(taps).map(|c| c.iter().copied().sum()).collect();
        let y = Tensor::new([o, i, 1, 1], data)?;
        Ok(self.push(y, &[w], Op::KernelSpatialSum { w }))
    }

    /// A contiguous range of the flattened `x`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + len > src.len() {
            return Err(shape_err!("slice {offset}..{} out of range {}", offset + len, src.len()));
        }
        let y = Tensor::new(shape.to_vec(), src[offset..offset + len].to_vec())?;
        Ok(self.push(y, &[x], Op::Slice { x, offset }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(y, &[x], Op::Reshape { x }))
    }

    /// Back-propagates from a scalar `loss`. Gradients are added to whatever
    /// the nodes already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(a) => a.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, bias, stride, pad } => {
                let (gx, gw) = conv::conv2d_backward(val(x), val(w), g, stride, pad, rg(x), rg(w))?;
                if let Some(gx) = gx {
                    acc(x, gx);
                }
                if let Some(gw) = gw {
                    acc(w, gw);
                }
                if let Some(b) = bias {
                    if rg(b) {
                        acc(b, bias_grad(g)?);
                    }
                }
            }
            &Op::CentralDiff { x, w, stride, pad } => {
                let (gx, gw) = conv::central_diff_backward(val(x), val(w), g, stride, pad)?;
                acc(x, gx);
                acc(w, gw);
            }
            Op::MaxPool { x, arg } => acc(*x, pool::route_grad(val(*x).shape(), g.data(), arg)?),
            &Op::Resize { x, mode } => acc(x, resize::resize_backward(val(x).shape(), g, mode)?),
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = norm::batchnorm_backward(g, val(*gamma), saved)?;
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            &Op::Relu { x } => {
                acc(x, val(x).zip_map(g, |v, d| if v > T::zero() { d } else { T::zero() })?);
            }
            &Op::Sigmoid { x } => {
                let y = &nodes[i].value;
                acc(x, y.zip_map(g, |s, d| d * s * (T::one() - s))?);
            }
            &Op::Add { a, b } => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub { a, b } => {
                acc(a, g.clone());
                acc(b, g.scale(-T::one()));
            }
            &Op::Mul { a, b } => {
                acc(a, g.zip_map(val(b), |d, q| d * q)?);
                acc(b, g.zip_map(val(a), |d, p| d * p)?);
            }
            &Op::Scale { x, c } => acc(x, g.scale(c)),
            &Op::Square { x } => {
                let two = T::one() + T::one();
                acc(x, val(x).zip_map(g, |v, d| two * v * d)?);
            }
            &Op::Sum { x } => acc(x, Tensor::full(val(x).shape().to_vec(), g.data()[0])),
            &Op::Mean { x } => {
                let n = T::from_usize(val(x).numel()).unwrap();
                acc(x, Tensor::full(val(x).shape().to_vec(), g.data()[0] / n));
            }
            &Op::AddChannelBias { x, b } => {
                acc(x, g.clone());
                if rg(b) {
                    acc(b, bias_grad(g)?);
                }
            }
            &Op::MulBroadcastChannels { x, a } => {
                let (n, c, h, w) = g.dims4()?;
                let plane = h * w;
                let ad = val(a).data();
                let xd = val(x).data();
                let mut gx = g.clone();
                let mut ga = vec![T::zero(); n * plane];
                for (j, d) in gx.data_mut().iter_mut().enumerate() {
                    let k = (j / (c * plane)) * plane + j % plane;
                    ga[k] = ga[k] + *d * xd[j];
                    *d = *d * ad[k];
                }
                acc(x, gx);
                acc(a, Tensor::new([n, 1, h, w], ga)?);
            }
            Op::ConcatChannels { parts } => {
                let (n, total, h, w) = g.dims4()?;
                let plane = h * w;
                let mut start = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if rg(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let o = (b * total + start) * plane;
                            d.extend_from_slice(&g.data()[o..o + c * plane]);
                        }
                        acc(p, Tensor::new([n, c, h, w], d)?);
                    }
                    start += c;
                }
            }
            &Op::ChannelMean { x } => {
                let (n, c, h, w) = val(x).dims4()?;
                let plane = h * w;
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); n * c * plane];
                for (j, d) in gx.iter_mut().enumerate() {
                    *d = g.data()[(j / (c * plane)) * plane + j % plane] * inv;
                }
                acc(x, Tensor::new([n, c, h, w], gx)?);
            }
            Op::ChannelMax { x, arg } => acc(*x, pool::route_grad(val(*x).shape(), g.data(), arg)?),
            &Op::KernelSpatialSum { w } => {
                let shape = val(w).shape().to_vec();
                let taps = shape[2] * shape[3];
                let d = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(taps)).collect();
                acc(w, Tensor::new(shape, d)?);
            }
            &Op::Slice { x, offset } => {
                let mut gx = Tensor::zeros(val(x).shape().to_vec());
                gx.data_mut()[offset..offset + g.numel()].copy_from_slice(g.data());
                acc(x, gx);
            }
            &Op::Reshape { x } => acc(x, g.clone().reshape(val(x).shape().to_vec())?),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [0.3, -1.5, 2.0, 0.0];
        let x = tape.leaf(Tensor::from_f64([4], &data).unwrap(), true);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &data);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        let c = tape.constant(Tensor::ones([2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([3], &[-3.0, 3.0, 0.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
        let z = tape.constant(Tensor::from_f64([2], &[0.0, 3f64.ln()]).unwrap());
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_is_zero_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1], &[0.0]).unwrap(), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }
}
