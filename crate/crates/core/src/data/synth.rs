//! Deterministic synthetic multi-modal faces.
//!
//! Every sample is a smooth elliptical "face" on an exactly-zero background.
//! Live and spoof faces share the same color and shading distributions; the
//! classes differ in
//!
//! - depth: a dome inside the face for live samples, a flat plane for spoofs;
//! - IR: scaled face luminance for live samples, uniform noise for spoofs;
//! - RGB: spoofs carry a fine zero-mean print-dot texture.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{generate_mask, SampleRecord};
use crate::metrics::{Label, SubProtocol};
use crate::models::Modality;
use crate::tensor::Tensor;

const TEXTURE_AMPLITUDE: f64 = 0.3;
const SPOOF_DEPTH: f32 = 0.6;

struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    tilt: (f64, f64),
}

impl Face {
    fn sample(rng: &mut ChaCha8Rng, s: f64) -> Self {
        Self {
            cx: s * (0.5 + rng.gen_range(-0.08..0.08)),
            cy: s * (0.5 + rng.gen_range(-0.08..0.08)),
            rx: s * rng.gen_range(0.26..0.36),
            ry: s * rng.gen_range(0.32..0.42),
            color: [rng.gen_range(0.55..1.0), rng.gen_range(0.45..0.9), rng.gen_range(0.35..0.8)],
            tilt: (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        }
    }

    /// Normalized squared radius at pixel `(x, y)`; `< 1` inside the face.
    fn r2(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn shade(&self, x: usize, y: usize, s: f64) -> f64 {
        let r2 = self.r2(x, y);
        let gx = (x as f64 / s - 0.5) * self.tilt.0;
        let gy = (y as f64 / s - 0.5) * self.tilt.1;
        (0.55 + 0.35 * (1.0 - r2) + gx + gy).clamp(0.2, 1.0)
    }
}

fn replicate(plane: Vec<f32>, s: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new([3, s, s], data).expect("shape")
}

fn sample(rng: &mut ChaCha8Rng, label: Label, s: usize) -> BTreeMap<Modality, Tensor<f32>> {
    let sf = s as f64;
    let face = Face::sample(rng, sf);
    let phase = rng.gen_range(0..2usize);
    let mut rgb = vec![0.0f32; 3 * s * s];
    let mut depth = vec![0.0f32; s * s];
    let mut ir = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let r2 = face.r2(x, y);
            if r2 >= 1.0 {
                continue;
            }
            let p = y * s + x;
            let shade = face.shade(x, y, sf);
            let texture = match label {
                Label::Live => 0.0,
                Label::Spoof => {
                    let sign = if (x + y + phase) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * TEXTURE_AMPLITUDE * rng.gen_range(0.5..1.0)
                }
            };
            let mut lum = 0.0;
            for ch in 0..3 {
                let v = (face.color[ch] * shade + texture).clamp(0.02, 1.0);
                rgb[ch * s * s + p] = v as f32;
                lum += v / 3.0;
            }
            match label {
                Label::Live => {
                    depth[p] = (0.3 + 0.7 * (1.0 - r2).sqrt()) as f32;
                    ir[p] = (0.9 * lum).max(0.02) as f32;
                }
                Label::Spoof => {
                    depth[p] = SPOOF_DEPTH;
                    ir[p] = rng.gen_range(0.2..1.0) as f32;
                }
            }
        }
    }
    BTreeMap::from([
        (Modality::Rgb, Tensor::new([3, s, s], rgb).expect("shape")),
        (Modality::Depth, replicate(depth, s)),
        (Modality::Ir, replicate(ir, s)),
    ])
}

/// `n_live` live samples followed by `n_spoof` spoofs, identical for equal
/// seeds. Sub-protocols cycle 4@1, 4@2, 4@3 within each class.
pub fn synth_dataset(n_live: usize, n_spoof: usize, input_size: usize, seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = std::iter::repeat(Label::Live)
        .take(n_live)
        .enumerate()
        .chain(std::iter::repeat(Label::Spoof).take(n_spoof).enumerate());
    plan.map(|(i, label)| {
        let images = sample(&mut rng, label, input_size);
        let mask_size = (input_size / 8).max(1);
        let mask_gt = generate_mask(&images[&Modality::Rgb], label, mask_size).expect("mask geometry");
        SampleRecord {
            id: format!("{label}_{i:04}"),
            images,
            label,
            sub_protocol: SubProtocol::ALL[i % 3],
            mask_gt,
        }
    })
    .collect()
}

/// Variance of the depth channel over face pixels (non-zero depth).
pub fn in_blob_depth_variance(rec: &SampleRecord) -> f64 {
    let Some(depth) = rec.images.get(&Modality::Depth) else { return 0.0 };
    let s = depth.shape()[1];
    let vals: Vec<f64> = depth.data()[..s * s].iter().filter(|&&v| v > 0.0).map(|&v| v as f64).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}
