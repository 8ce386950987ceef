use crate::error::{Error, Result};
use crate::models::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments for every trainable entry of a [`ParamStore`], in store
/// order.
#[derive(Clone, Debug)]
pub struct AdamState {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.entry(id).trainable).collect();
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self { m: ids.iter().map(zeros).collect(), v: ids.iter().map(zeros).collect(), ids, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Weight decay enters as an L2 term
    /// `wd·p` added to the gradient. Entries without a gradient are treated
    /// as having zero loss gradient. Every gradient is checked before any
    /// parameter changes.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Option<Tensor<T>>)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.0] = g.as_ref();
        }
        for &id in &self.ids {
            if let Some(g) = by_id[id.0] {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Shape(format!("gradient shape mismatch for `{}`", store.entry(id).name)));
                }
                let count = g.data().iter().filter(|v| !v.to_f64_lossy().is_finite()).count();
                if count > 0 {
                    return Err(Error::NonFiniteGradient { name: store.entry(id).name.clone(), count });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = by_id[id.0].map(|g| g.data().to_vec());
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let pi = p[i].to_f64_lossy();
                let gi = g.as_ref().map_or(0.0, |g| g[i].to_f64_lossy()) + weight_decay * pi;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
                p[i] = T::from_f64_lossy(pi - update);
            }
        }
        Ok(())
    }
}

/// `lr · 0.5^floor(epoch / halve_every)`.
pub fn lr_at(lr: f64, halve_every: usize, epoch: usize) -> f64 {
    lr * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}
