#![allow(dead_code)]

use cdcn::autograd::{Tape, Var};
use cdcn::gradcheck::grad_check_coords;
use cdcn::models::{Ctx, Mode, Model, ModelConfig};
use cdcn::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, seed, -1.0, 1.0)
}

/// Reduces `y` to a scalar through fixed random weights so that every
/// output element contributes a distinct gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(rand_t(tape.shape(y), seed ^ 0xabcd));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Relative gradient error of a single-modal network (S=32, C=8, train
/// mode, loss against random binary masks) over `coords` random parameters.
pub fn full_model_grad_error(coords: usize, seed: u64) -> f64 {
    let cfg = ModelConfig { input_size: 32, init_channels: 8, ..ModelConfig::single_modal() };
    let model = Model::<f64>::new(cfg, seed).unwrap();
    let x = [(cdcn::models::Modality::Rgb, uniform(&[2, 3, 32, 32], seed + 1, 0.0, 1.0))].into();
    let gt = uniform(&[2, 1, 4, 4], seed + 2, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let flat = model.store().flatten_trainable();
    let mut idx: Vec<usize> = (0..flat.numel()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(coords);
    grad_check_coords(
        |t: &mut Tape<f64>, v| {
            let tape = std::mem::take(t);
            let mut ctx = Ctx::with_flat_params(model.store(), Mode::Train, tape, v)?;
            let out = model.forward(&mut ctx, &x)?;
            let (loss, _) = model.loss(&mut ctx, &out, &gt)?;
            *t = std::mem::take(&mut ctx.tape);
            Ok(loss)
        },
        &flat,
        1e-6,
        &idx,
    )
    .unwrap()
}
