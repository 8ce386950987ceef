use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cdcn::checkpoint;
use cdcn::data::{load_dataset, load_image, read_manifest, synth_dataset, write_dataset, SampleRecord};
use cdcn::metrics::ThresholdPolicy;
use cdcn::models::{Model, Modality};
use cdcn::train::{self, EvalReport, TrainConfig};
use cdcn::{Error, Tensor};

#[derive(Parser)]
#[command(name = "cdcn", version, about = "Central difference convolution networks for face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train_data` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `dev_data` from the config.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Score a dataset and report APCER/BPCER/ACER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `fixed:<t>`, a bare number, `min_acer` or `eer`.
        #[arg(long, default_value = "0.5")]
        threshold: String,
        /// Dataset the threshold is selected on (default: the evaluated one).
        #[arg(long)]
        threshold_data: Option<PathBuf>,
        /// Score CSV output.
        #[arg(long, default_value = "scores.csv")]
        scores: PathBuf,
        /// JSON report output (default: stdout).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print liveness scores for individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sample per flag: a path for single-modal models, otherwise
        /// `rgb=a.png,depth=b.png,ir=c.png`.
        #[arg(long = "image", alias = "images", required = true, num_args = 1..)]
        images: Vec<String>,
    },
    /// Weighted row-wise fusion of score files.
    FuseScores {
        /// Comma-separated score CSVs.
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long, default_value = "fused_scores.csv")]
        out: PathBuf,
        #[arg(long, default_value = "0.5")]
        threshold: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        live: usize,
        #[arg(long, default_value_t = 8)]
        spoof: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Save per-level feature maps and the predicted mask of one sample.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long, default_value = "features")]
        out: PathBuf,
    },
}

fn load_records(dir: &Path, model_cfg: &cdcn::models::ModelConfig) -> Result<Vec<SampleRecord>> {
    let manifest = read_manifest(dir)?;
    Ok(load_dataset(&manifest, model_cfg.input_size, &model_cfg.modalities)?)
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = std::io::stdout().lock();
            if let Err(e) = writeln!(out, "{json}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn parse_sample(spec: &str, model: &Model) -> Result<BTreeMap<Modality, Tensor>> {
    let cfg = model.config();
    let mut images = BTreeMap::new();
    if !spec.contains('=') {
        if cfg.modalities.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "model uses {} modalities; pass images as rgb=...,depth=...,ir=...",
                cfg.modalities.len()
            ))
            .into());
        }
        let m = cfg.modalities[0];
        images.insert(m, load_image(Path::new(spec), m, cfg.input_size)?);
        return Ok(images);
    }
    for part in spec.split(',') {
        let (m, path) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected modality=path, got `{part}`")))?;
        let m: Modality = m.parse()?;
        images.insert(m, load_image(Path::new(path), m, cfg.input_size)?);
    }
    Ok(images)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, dev } => {
            let mut cfg = TrainConfig::from_toml_file(&config)?;
            if data.is_some() {
                cfg.train_data = data;
            }
            if dev.is_some() {
                cfg.dev_data = dev;
            }
            let train_dir = cfg
                .train_data
                .clone()
                .ok_or_else(|| Error::Config("no training data: set train_data or pass --data".into()))?;
            let train_set = load_records(&train_dir, &cfg.model)?;
            let dev_set = cfg.dev_data.as_deref().map(|d| load_records(d, &cfg.model)).transpose()?;
            let out = train::train(&cfg, &train_set, dev_set.as_deref())?;
            let last = out.log.epochs.last().expect("at least one epoch");
            println!("final loss {:.6}", last.overall);
            println!("last checkpoint {}", out.last_checkpoint.display());
            println!("best checkpoint {} (epoch {})", out.best_checkpoint.display(), out.best_epoch + 1);
        }
        Command::Eval { checkpoint: ckpt, data, threshold, threshold_data, scores, report } => {
            let policy: ThresholdPolicy = threshold.parse()?;
            let model = checkpoint::load(&ckpt)?;
            let records = load_records(&data, model.config())?;
            let basis = threshold_data.as_deref().map(|d| load_records(d, model.config())).transpose()?;
            let (rows, rep) = train::evaluate(&model, &records, policy, basis.as_deref())?;
            train::write_scores(&scores, &rows)?;
            emit_report(&rep, report.as_deref())?;
        }
        Command::Predict { checkpoint: ckpt, images } => {
            let model = checkpoint::load(&ckpt)?;
            for spec in &images {
                let sample = parse_sample(spec, &model)?;
                let inputs = sample
                    .into_iter()
                    .map(|(m, t)| {
                        let shape: Vec<usize> = [1].iter().chain(t.shape()).copied().collect();
                        Ok((m, t.reshape(shape)?))
                    })
                    .collect::<cdcn::Result<_>>()?;
                let score = model.predict_scores(&inputs)?[0];
                println!("{spec}\t{score:.6}");
            }
        }
        Command::FuseScores { inputs, weights, out, threshold, report } => {
            let policy: ThresholdPolicy = threshold.parse()?;
            let tables = inputs.iter().map(train::read_scores).collect::<cdcn::Result<Vec<_>>>()?;
            let fused = train::fuse_score_tables(&tables, &weights)?;
            train::write_scores(&out, &fused)?;
            emit_report(&train::report(&fused, policy, None)?, report.as_deref())?;
        }
        Command::SynthData { out, live, spoof, seed, size } => {
            if size < 8 || size % 8 != 0 {
                return Err(Error::Config(format!("size must be a positive multiple of 8, got {size}")).into());
            }
            write_dataset(&out, &synth_dataset(live, spoof, size, seed))?;
            println!("wrote {} samples to {}", live + spoof, out.display());
        }
        Command::DumpFeatures { checkpoint: ckpt, data, sample, out } => {
            let model = checkpoint::load(&ckpt)?;
            let mut manifest = read_manifest(&data)?;
            manifest.rows.retain(|r| r.id == sample);
            if manifest.rows.is_empty() {
                return Err(Error::Dataset(format!("no sample `{sample}` in {}", data.display())).into());
            }
            let records = load_dataset(&manifest, model.config().input_size, &model.config().modalities)?;
            for path in train::dump_features(&model, &records[0], &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// The error chain without causes already quoted by their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            let validation = e.downcast_ref::<Error>().is_some_and(Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
