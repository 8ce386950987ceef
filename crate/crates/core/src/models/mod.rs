//! CDC network architectures and score utilities.

mod config;
mod layers;
mod network;
mod params;

use std::collections::BTreeMap;

pub use config::{Fusion, Modality, ModelConfig};
pub use layers::{ConvPath, SpatialAttention};
pub use network::{
    AttentionModule, Backbone, Cdcn, ForwardOutput, Inputs, LevelFeatures, Model, Network, ATTENTION_KERNELS,
    LEVEL_NAMES,
};
pub use params::{Ctx, Mode, ParamEntry, ParamId, ParamStore};

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Weighted sum of per-modality scores. Weights must sum to 1 (±1e-6); a
/// modality with zero weight may be absent from `scores`.
pub fn fuse_scores(scores: &BTreeMap<Modality, f64>, weights: &BTreeMap<Modality, f64>) -> Result<f64> {
    let total: f64 = weights.values().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid!("fusion weights must sum to 1, got {total}"));
    }
    let mut fused = 0.0;
    for (m, &w) in weights {
        if w < 0.0 || !w.is_finite() {
            return Err(invalid!("fusion weight for {m} must be finite and non-negative, got {w}"));
        }
        match scores.get(m) {
            Some(&s) if (0.0..=1.0).contains(&s) => fused += w * s,
            Some(&s) => return Err(invalid!("{m} score {s} outside [0, 1]")),
            None if w == 0.0 => {}
            None => return Err(invalid!("no {m} score for a non-zero fusion weight")),
        }
    }
    if let Some(m) = scores.keys().find(|m| !weights.contains_key(m)) {
        return Err(invalid!("score for {m} has no fusion weight"));
    }
    Ok(fused)
}

/// Liveness score of a predicted mask: its mean pixel value.
pub fn predict_score<T: Scalar>(mask: &Tensor<T>) -> f64 {
    mask.mean().to_f64_lossy()
}
