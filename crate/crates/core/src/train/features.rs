use std::path::{Path, PathBuf};

use crate::data::{collate, write_gray_png, SampleRecord};
use crate::error::{Error, Result};
use crate::models::{Ctx, Mode, Model, LEVEL_NAMES};
use crate::tensor::Tensor;

/// A `[H,W]` map destined for a grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// File stem, e.g. `rgb_low` or `mask`.
    pub name: String,
    pub map: Tensor<f32>,
}

fn channel_mean(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut out = vec![0.0f32; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f32);
    Tensor::new([h, w], out).expect("plane")
}

fn min_max(t: &Tensor<f32>) -> Tensor<f32> {
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= f32::EPSILON * hi.abs().max(1.0) {
        return Tensor::zeros(t.shape().to_vec());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Eval-mode channel-mean maps of every level of every branch (min-max
/// normalized; constant maps become all zeros), followed by the predicted
/// mask in its native `[0,1]` range so that it can be read back.
pub fn feature_maps(model: &Model<f32>, record: &SampleRecord) -> Result<Vec<FeatureMap>> {
    let batch = collate::<f32>(&[record], &model.config().modalities)?;
    let mut ctx = Ctx::new(model.store(), Mode::Eval, false);
    let out = model.forward(&mut ctx, &batch.inputs)?;
    let mut maps = Vec::new();
    for (branch, levels) in &out.features {
        for (level, var) in LEVEL_NAMES.iter().zip(levels.levels()) {
            let map = min_max(&channel_mean(ctx.tape.value(var)));
            maps.push(FeatureMap { name: format!("{branch}_{level}"), map });
        }
    }
    let masks: Vec<Tensor<f32>> = out.masks.iter().map(|&m| ctx.tape.value(m).index_first(0)).collect::<Result<_>>()?;
    // score fusion: the displayed mask is the fusion-weighted average
    let weights: Vec<f64> =
        if masks.len() == 1 { vec![1.0] } else { model.config().score_weights.clone() };
    let s = model.config().mask_size();
    let mut mask = Tensor::<f32>::zeros([s, s]);
    for (m, w) in masks.iter().zip(weights) {
        for (o, v) in mask.data_mut().iter_mut().zip(m.data()) {
            *o += w as f32 * v;
        }
    }
    maps.push(FeatureMap { name: "mask".into(), map: mask });
    Ok(maps)
}

/// Writes [`feature_maps`] as `<out_dir>/<sample>_<name>.png`.
pub fn dump_features(model: &Model<f32>, record: &SampleRecord, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    feature_maps(model, record)?
        .into_iter()
        .map(|f| {
            let path = out_dir.join(format!("{}_{}.png", record.id, f.name));
            write_gray_png(&path, &f.map)?;
            Ok(path)
        })
        .collect()
}
