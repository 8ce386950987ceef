//! Samples, ground-truth masks, batching and augmentation.

mod io;
mod synth;

use std::collections::BTreeMap;

use rand::Rng;

pub use io::{load_dataset, load_image, read_manifest, write_dataset, write_gray_png, DatasetManifest, ManifestRow};
pub use synth::{in_blob_depth_variance, synth_dataset};

use crate::error::{shape_err, Error, Result};
use crate::metrics::{Label, SubProtocol};
use crate::models::{Inputs, Modality};
use crate::tensor::{Scalar, Tensor};

/// One example. Images are `[3,S,S]` in `[0,1]` (single-channel sources are
/// replicated to three channels); `mask_gt` is `[S/8,S/8]` with values in
/// `{0,1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub images: BTreeMap<Modality, Tensor<f32>>,
    pub label: Label,
    pub sub_protocol: SubProtocol,
    pub mask_gt: Tensor<f32>,
}

impl SampleRecord {
    pub fn image(&self, m: Modality) -> Result<&Tensor<f32>> {
        self.images
            .get(&m)
            .ok_or_else(|| Error::Dataset(format!("sample `{}` has no {m} image", self.id)))
    }

    /// Spatial size shared by all images.
    pub fn size(&self) -> Option<usize> {
        self.images.values().next().map(|t| t.shape()[1])
    }
}

/// Image whose non-zero pixels define the face region: RGB when present.
pub(crate) fn face_source(images: &BTreeMap<Modality, Tensor<f32>>) -> Option<&Tensor<f32>> {
    images.get(&Modality::Rgb).or_else(|| images.values().next())
}

/// Ground-truth mask. Live: the channel-mean image is area-averaged down to
/// `out_size` and every cell with a positive average becomes 1. Spoof: all
/// zeros.
pub fn generate_mask(face: &Tensor<f32>, label: Label, out_size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *face.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err!("face image must be [C,H,W], got {:?}", face.shape())),
    };
    if out_size == 0 || h % out_size != 0 || w % out_size != 0 {
        return Err(shape_err!("mask size {out_size} does not divide image size {h}x{w}"));
    }
    if label == Label::Spoof {
        return Ok(Tensor::zeros([out_size, out_size]));
    }
    let (bh, bw) = (h / out_size, w / out_size);
    let mut mask = Tensor::zeros([out_size, out_size]);
    let d = face.data();
    for my in 0..out_size {
        for mx in 0..out_size {
            let mut acc = 0.0f64;
            for ch in 0..c {
                for y in my * bh..(my + 1) * bh {
                    for x in mx * bw..(mx + 1) * bw {
                        acc += d[(ch * h + y) * w + x] as f64;
                    }
                }
            }
            let avg = acc / (c * bh * bw) as f64;
            mask.data_mut()[my * out_size + mx] = if avg > 0.0 { 1.0 } else { 0.0 };
        }
    }
    Ok(mask)
}

fn flip_chw(t: &Tensor<f32>) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let w = *shape.last().expect("non-empty shape");
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

/// Mirrors every image and the mask left to right.
pub fn flip_horizontal(rec: &SampleRecord) -> SampleRecord {
    SampleRecord {
        id: rec.id.clone(),
        images: rec.images.iter().map(|(&m, t)| (m, flip_chw(t))).collect(),
        label: rec.label,
        sub_protocol: rec.sub_protocol,
        mask_gt: flip_chw(&rec.mask_gt),
    }
}

/// Training-time augmentation: a horizontal flip with probability 0.5,
/// applied jointly to all modalities and the mask. Identity when disabled.
pub fn augment<R: Rng>(rec: &SampleRecord, rng: &mut R, enabled: bool) -> SampleRecord {
    if enabled && rng.gen_bool(0.5) {
        flip_horizontal(rec)
    } else {
        rec.clone()
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f32> {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub sub_protocols: Vec<SubProtocol>,
    pub inputs: Inputs<T>,
    /// `[N,1,h,w]`
    pub masks: Tensor<T>,
}

pub fn collate<T: Scalar>(records: &[&SampleRecord], modalities: &[Modality]) -> Result<Batch<T>> {
    if records.is_empty() {
        return Err(Error::Dataset("cannot build an empty batch".into()));
    }
    let mut inputs = BTreeMap::new();
    for &m in modalities {
        let imgs = records.iter().map(|r| r.image(m)).collect::<Result<Vec<_>>>()?;
        inputs.insert(m, Tensor::stack(&imgs)?.cast());
    }
    let masks: Vec<&Tensor<f32>> = records.iter().map(|r| &r.mask_gt).collect();
    let stacked = Tensor::stack(&masks)?;
    let (n, h, w) = (records.len(), stacked.shape()[1], stacked.shape()[2]);
    Ok(Batch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        labels: records.iter().map(|r| r.label).collect(),
        sub_protocols: records.iter().map(|r| r.sub_protocol).collect(),
        inputs,
        masks: stacked.reshape([n, 1, h, w])?.cast(),
    })
}
