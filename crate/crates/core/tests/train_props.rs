use std::fs;
use std::path::Path;

use cdcn::checkpoint;
use cdcn::data::{synth_dataset, SampleRecord};
use cdcn::metrics::{Label, ThresholdPolicy};
use cdcn::models::{Ctx, Fusion, Modality, Mode, Model, ModelConfig, ParamStore};
use cdcn::train::{self, dump_features, evaluate, feature_maps, lr_at, AdamState, TrainConfig, BEST_CHECKPOINT, LOG_FILE};
use cdcn::{Error, Tensor};
use proptest::prelude::*;

fn scalar_store(p: f64) -> (ParamStore<f64>, cdcn::models::ParamId) {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::new([1], vec![p]).unwrap(), true).unwrap();
    (store, id)
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let (mut store, id) = scalar_store(0.7);
    let mut adam = AdamState::new(&store);
    for _ in 0..5 {
        adam.step(&mut store, &[(id, Some(Tensor::zeros([1])))], 1e-3, 0.0).unwrap();
    }
    assert_eq!(store.get(id).data(), &[0.7]);
    assert_eq!(adam.step_count(), 5);
}

proptest! {
    #[test]
    fn adam_first_step_moves_by_lr(g in prop_oneof![-100.0f64..-1e-3, 1e-3f64..100.0], p in -5.0f64..5.0, lr in 1e-5f64..1e-2) {
        let (mut store, id) = scalar_store(p);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[(id, Some(Tensor::new([1], vec![g]).unwrap()))], lr, 0.0).unwrap();
        // bias-corrected first step: -lr * g / (|g| + eps)
        let expect = p - lr * g / (g.abs() + cdcn::train::EPS);
        prop_assert!((store.get(id).data()[0] - expect).abs() <= 1e-12);
        prop_assert!((store.get(id).data()[0] - (p - lr * g.signum())).abs() <= lr * 1e-4);
    }
}

#[test]
fn adam_on_a_quadratic_decreases_monotonically() {
    // f(p) = 0.5 * 3 * (p - 0.25)^2
    let (mut store, id) = scalar_store(1.0);
    let mut adam = AdamState::new(&store);
    let f = |p: f64| 1.5 * (p - 0.25) * (p - 0.25);
    let mut losses = Vec::new();
    for _ in 0..60 {
        let p = store.get(id).data()[0];
        losses.push(f(p));
        let g = Tensor::new([1], vec![3.0 * (p - 0.25)]).unwrap();
        adam.step(&mut store, &[(id, Some(g))], 1e-2, 0.0).unwrap();
    }
    assert!(losses[10..].windows(2).all(|w| w[1] < w[0]));
    assert!(losses[59] < 0.15 * losses[0], "{losses:?}");
}

#[test]
fn adam_weight_decay_acts_without_gradient() {
    let (mut store, id) = scalar_store(2.0);
    let mut adam = AdamState::new(&store);
    adam.step(&mut store, &[(id, None)], 1e-3, 5e-5).unwrap();
    assert!((store.get(id).data()[0] - (2.0 - 1e-3)).abs() <= 1e-6);
}

#[test]
fn adam_rejects_non_finite_gradients_before_touching_parameters() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::new([2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let b = store.insert("b.weight", Tensor::new([1], vec![3.0]).unwrap(), true).unwrap();
    let mut adam = AdamState::new(&store);
    let grads = vec![
        (a, Some(Tensor::new([2], vec![1.0, 1.0]).unwrap())),
        (b, Some(Tensor::new([1], vec![f64::NAN]).unwrap())),
    ];
    match adam.step(&mut store, &grads, 1e-3, 0.0) {
        Err(Error::NonFiniteGradient { name, count }) => {
            assert_eq!(name, "b.weight");
            assert_eq!(count, 1);
        }
        other => panic!("expected a non-finite gradient error, got {other:?}"),
    }
    assert_eq!(store.get(a).data(), &[1.0, 2.0]);
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn lr_schedule() {
    assert_eq!(lr_at(1e-4, 20, 0), 1e-4);
    assert_eq!(lr_at(1e-4, 20, 19), 1e-4);
    assert_eq!(lr_at(1e-4, 20, 20), 5e-5);
    assert_eq!(lr_at(1e-4, 20, 40), 2.5e-5);
    for e in 0..200 {
        assert_eq!(lr_at(1e-4, 20, e), 0.5f64.powi((e / 20) as i32) * 1e-4);
    }
}

fn tiny_config(dir: &Path, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        batch_size: 4,
        seed: 9,
        checkpoint_dir: dir.to_path_buf(),
        model: ModelConfig { input_size: 32, init_channels: 8, ..ModelConfig::single_modal() },
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let data = synth_dataset(4, 4, 32, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = TrainConfig { augment: true, ..tiny_config(a.path(), 3) };
    let cfg_b = TrainConfig { checkpoint_dir: b.path().to_path_buf(), ..cfg_a.clone() };
    let ra = train::train(&cfg_a, &data, None).unwrap();
    let rb = train::train(&cfg_b, &data, None).unwrap();
    assert_eq!(ra.log.step_losses.len(), 6);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra.log.step_losses), bits(&rb.log.step_losses));
    assert_eq!(fs::read(&ra.last_checkpoint).unwrap(), fs::read(&rb.last_checkpoint).unwrap());
    assert_eq!(fs::read(a.path().join(LOG_FILE)).unwrap(), fs::read(b.path().join(LOG_FILE)).unwrap());

    let other = tempfile::tempdir().unwrap();
    let rc = train::train(&TrainConfig { seed: 10, ..tiny_config(other.path(), 3) }, &data, None).unwrap();
    assert_ne!(bits(&ra.log.step_losses), bits(&rc.log.step_losses));
}

#[test]
fn training_writes_checkpoints_and_log() {
    let data = synth_dataset(3, 3, 32, 2);
    let dev = synth_dataset(2, 2, 32, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..tiny_config(dir.path(), 3) };
    let out = train::train(&cfg, &data, Some(&dev)).unwrap();
    for name in ["epoch_0002.ckpt", "epoch_0003.ckpt", BEST_CHECKPOINT, LOG_FILE] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert!(!dir.path().join("epoch_0001.ckpt").exists());
    assert_eq!(out.last_checkpoint, dir.path().join("epoch_0003.ckpt"));
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (line, e) in log.lines().zip(&out.log.epochs) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], e.epoch);
        assert!(e.dev_acer.is_some());
        assert!((e.overall - (e.mse + e.cdl)).abs() <= 1e-6 * e.overall);
    }
    // the best epoch has the lowest dev ACER, later epochs winning ties
    let acers: Vec<f64> = out.log.epochs.iter().map(|e| e.dev_acer.unwrap()).collect();
    let min = acers.iter().cloned().fold(f64::MAX, f64::min);
    assert_eq!(out.best_epoch, acers.iter().rposition(|&a| a == min).unwrap());
    let best = checkpoint::load(&out.best_checkpoint).unwrap();
    assert_eq!(best.config(), &cfg.model);
}

#[test]
fn training_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let live_only = synth_dataset(4, 0, 32, 0);
    assert!(matches!(train::train(&cfg, &live_only, None), Err(Error::Dataset(_))));

    let wrong_size = synth_dataset(2, 2, 16, 0);
    assert!(train::train(&cfg, &wrong_size, None).is_err());

    let rgb_only: Vec<SampleRecord> = synth_dataset(2, 2, 32, 0)
        .into_iter()
        .map(|mut r| {
            r.images.retain(|&m, _| m == Modality::Rgb);
            r
        })
        .collect();
    let depth_cfg = TrainConfig {
        model: ModelConfig { modalities: vec![Modality::Depth], ..cfg.model.clone() },
        ..cfg.clone()
    };
    assert!(train::train(&depth_cfg, &rgb_only, None).is_err());

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let unwritable = TrainConfig { checkpoint_dir: blocker.join("sub"), ..cfg };
    assert!(train::train(&unwritable, &synth_dataset(2, 2, 32, 0), None).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let data = synth_dataset(3, 3, 32, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = train::train(&tiny_config(dir.path(), 2), &data, None).unwrap();
    let reloaded = checkpoint::load(&out.last_checkpoint).unwrap();
    let (before, _) = evaluate(&out.model, &data, ThresholdPolicy::Fixed(0.5), None).unwrap();
    let (after, _) = evaluate(&reloaded, &data, ThresholdPolicy::Fixed(0.5), None).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.sample_id, b.sample_id);
        assert!((a.score - b.score).abs() <= 1e-6);
    }
}

#[test]
fn initial_loss_against_zero_masks() {
    let cfg = ModelConfig { input_size: 64, init_channels: 16, ..ModelConfig::single_modal() };
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let data = synth_dataset(4, 4, 64, 0);
    let refs: Vec<&SampleRecord> = data.iter().collect();
    let batch = cdcn::data::collate::<f32>(&refs, &[Modality::Rgb]).unwrap();
    let mut ctx = Ctx::new(model.store(), Mode::Train, false);
    let out = model.forward(&mut ctx, &batch.inputs).unwrap();
    let (_, report) = model.loss(&mut ctx, &out, &Tensor::zeros([8, 1, 8, 8])).unwrap();
    assert!(report.overall.is_finite() && report.overall < 1.5, "{report:?}");
    // every output is a sigmoid, so MSE against zeros is E[sigma(z)^2] < 1
    assert!(report.mse > 0.0 && report.mse < 1.0);
}

#[test]
fn perfectly_fit_training_set_has_zero_acer() {
    let data = synth_dataset(4, 4, 32, 6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 8, lr_halve_every: 1000, ..tiny_config(dir.path(), 150) };
    let out = train::train(&cfg, &data, None).unwrap();
    let last = out.log.epochs.last().unwrap();
    assert!(last.overall < 0.01, "final loss {}", last.overall);
    let (rows, rep) = evaluate(&out.model, &data, ThresholdPolicy::Fixed(0.5), None).unwrap();
    assert_eq!(rep.raw.pooled.unwrap().acer, 0.0);
    for r in rows {
        assert_eq!(r.score >= 0.5, r.label == Label::Live, "{}", r.sample_id);
    }
}

fn uniform(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&v| v == t.data()[0])
}

#[test]
fn feature_dump_counts() {
    let cases = [
        (ModelConfig { input_size: 16, init_channels: 4, ..ModelConfig::single_modal() }, 4),
        (ModelConfig { input_size: 16, init_channels: 4, fusion: Fusion::Feature, ..ModelConfig::multi_modal() }, 10),
        (ModelConfig { input_size: 16, init_channels: 4, fusion: Fusion::Score, ..ModelConfig::multi_modal() }, 10),
        (ModelConfig { input_size: 16, init_channels: 4, fusion: Fusion::Input, ..ModelConfig::multi_modal() }, 4),
    ];
    let record = &synth_dataset(1, 0, 16, 0)[0];
    for (cfg, n) in cases {
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_features(&model, record, dir.path()).unwrap();
        assert_eq!(paths.len(), n, "{:?}", cfg.fusion);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), n);
        assert!(paths.last().unwrap().ends_with(format!("{}_mask.png", record.id)));
        let first = paths[0].file_name().unwrap().to_string_lossy().into_owned();
        assert!(first.ends_with("_low.png"), "{first}");
    }
}

#[test]
fn zero_input_gives_uniform_maps() {
    let cfg = ModelConfig { input_size: 16, init_channels: 4, ..ModelConfig::single_modal() };
    let model = Model::<f32>::new(cfg, 3).unwrap();
    let mut record = synth_dataset(1, 0, 16, 0).remove(0);
    record.images.insert(Modality::Rgb, Tensor::zeros([3, 16, 16]));
    let maps = feature_maps(&model, &record).unwrap();
    assert_eq!(maps.len(), 4);
    for m in &maps {
        assert!(uniform(&m.map), "{} is not uniform", m.name);
    }
    let dir = tempfile::tempdir().unwrap();
    for path in dump_features(&model, &record, dir.path()).unwrap() {
        let img = image::open(&path).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p == img.get_pixel(0, 0)), "{}", path.display());
    }
}

#[test]
fn dumped_mask_round_trips() {
    let cfg = ModelConfig { input_size: 32, init_channels: 4, ..ModelConfig::single_modal() };
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let record = &synth_dataset(0, 1, 32, 2)[0];
    let dir = tempfile::tempdir().unwrap();
    let mask_path = dump_features(&model, record, dir.path()).unwrap().pop().unwrap();
    let predicted = &model.predict_masks(&record.images.iter().map(|(&m, t)| (m, t.clone().reshape([1, 3, 32, 32]).unwrap())).collect()).unwrap()[0];
    let img = image::open(&mask_path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (4, 4));
    for (p, v) in img.pixels().zip(predicted.data()) {
        assert!((p[0] as f32 / 255.0 - v).abs() <= 1.0 / 255.0);
    }
}
