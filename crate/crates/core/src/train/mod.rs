//! Training, evaluation and feature dumps.

mod adam;
mod config;
mod eval;
mod features;

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{lr_at, AdamState, BETA1, BETA2, EPS};
pub use config::TrainConfig;
pub use eval::{
    evaluate, fuse_score_tables, read_scores, report, score_records, write_scores, EvalReport, MeanStdPct,
    MetricsPct, RawMetrics, ScoreRow, SubProtocolReport,
};
pub use features::{dump_features, feature_maps, FeatureMap};

use crate::checkpoint;
use crate::data::{augment, collate, Batch, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::Label;
use crate::models::{Ctx, Mode, Model};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Batch means of the training-mode loss components.
    pub mse: f64,
    pub cdl: f64,
    pub overall: f64,
    pub dev_acer: Option<f64>,
    pub dev_threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// `L_overall` of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model<f32>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState,
    batch: &Batch<f32>,
    lr: f64,
    weight_decay: f64,
) -> Result<LossReport> {
    let mut ctx = Ctx::new(model.store(), Mode::Train, true);
    let out = model.forward(&mut ctx, &batch.inputs)?;
    let (loss, report) = model.loss(&mut ctx, &out, &batch.masks)?;
    ctx.tape.backward(loss)?;
    let grads = ctx.param_grads();
    let running = ctx.take_updates();
    drop(ctx);
    adam.step(model.store_mut(), &grads, lr, weight_decay)?;
    model.store_mut().apply_updates(running);
    Ok(report)
}

fn check_dataset(cfg: &TrainConfig, records: &[SampleRecord], what: &str) -> Result<()> {
    for r in records {
        for m in &cfg.model.modalities {
            let img = r.images.get(m).ok_or_else(|| {
                Error::Dataset(format!("{what} sample `{}` has no {m} image but the model uses {m}", r.id))
            })?;
            if img.shape()[1] != cfg.model.input_size {
                return Err(Error::Dataset(format!(
                    "{what} sample `{}` is {}px, model expects {}px",
                    r.id,
                    img.shape()[1],
                    cfg.model.input_size
                )));
            }
        }
    }
    Ok(())
}

enum Msg {
    Batch(Batch<f32>),
    EpochEnd,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batches. Writes epoch
/// checkpoints, `best.ckpt` (lowest dev ACER, later epochs winning ties;
/// the last epoch without a dev set) and a JSON-lines log to
/// `cfg.checkpoint_dir`.
///
/// Batches are assembled on a worker thread that follows the seeded order,
/// so results do not depend on scheduling.
pub fn train(cfg: &TrainConfig, train_set: &[SampleRecord], dev: Option<&[SampleRecord]>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, train_set, "training")?;
    if let Some(dev) = dev {
        check_dataset(cfg, dev, "dev")?;
    }
    for label in [Label::Live, Label::Spoof] {
        if !train_set.iter().any(|r| r.label == label) {
            return Err(Error::Dataset(format!("training set has no {label} samples")));
        }
    }
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.store());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    let mut last_checkpoint = PathBuf::new();
    let modalities = cfg.model.modalities.clone();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Msg>>(2);
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let recs: Vec<SampleRecord> = chunk.iter().map(|&i| augment(&train_set[i], &mut rng, cfg.augment)).collect();
                    let refs: Vec<&SampleRecord> = recs.iter().collect();
                    if tx.send(collate(&refs, &modalities).map(Msg::Batch)).is_err() {
                        return;
                    }
                }
                if tx.send(Ok(Msg::EpochEnd)).is_err() {
                    return;
                }
            }
        });

        for epoch in 0..cfg.epochs {
            let lr = lr_at(cfg.lr, cfg.lr_halve_every, epoch);
            let mut sum = LossReport::default();
            let mut steps = 0;
            loop {
                let batch = match rx.recv().expect("batch worker ended early")? {
                    Msg::Batch(b) => b,
                    Msg::EpochEnd => break,
                };
                let r = train_step(&mut model, &mut adam, &batch, lr, cfg.weight_decay)?;
                log.step_losses.push(r.overall);
                sum.mse += r.mse;
                sum.cdl += r.cdl;
                sum.overall += r.overall;
                steps += 1;
            }
            let n = steps as f64;
            let (dev_acer, dev_threshold) = match dev {
                Some(d) => {
                    let (_, rep) = evaluate(&model, d, cfg.threshold, None)?;
                    let pooled = rep.raw.pooled.expect("pooled metrics");
                    (Some(pooled.acer), Some(pooled.threshold))
                }
                None => (None, None),
            };
            let entry = EpochLog {
                epoch,
                lr,
                steps,
                mse: sum.mse / n,
                cdl: sum.cdl / n,
                overall: sum.overall / n,
                dev_acer,
                dev_threshold,
            };
            log::info!(
                "epoch {epoch}: lr {lr:.3e} loss {:.6} (mse {:.6}, cdl {:.6}){}",
                entry.overall,
                entry.mse,
                entry.cdl,
                dev_acer.map_or(String::new(), |a| format!(" dev ACER {:.2}%", a * 100.0))
            );
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log.epochs.push(entry);

            let is_last = epoch + 1 == cfg.epochs;
            if (epoch + 1) % cfg.checkpoint_every == 0 || is_last {
                last_checkpoint = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                checkpoint::save(&model, &last_checkpoint)?;
            }
            let score = dev_acer.unwrap_or(0.0);
            if best.as_ref().map_or(true, |(b, _, _)| score <= *b) {
                best = Some((score, epoch, checkpoint::to_bytes(&model)));
            }
        }
        Ok(())
    })?;

    let (_, best_epoch, bytes) = best.expect("at least one epoch");
    let best_checkpoint = dir.join(BEST_CHECKPOINT);
    fs::write(&best_checkpoint, bytes).map_err(|e| Error::io(&best_checkpoint, e))?;
    Ok(TrainOutcome { model, last_checkpoint, best_checkpoint, best_epoch, log })
}
