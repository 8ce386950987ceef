use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ThresholdPolicy;
use crate::models::{Fusion, Modality, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub checkpoint_dir: PathBuf,
    /// Write a per-epoch checkpoint every this many epochs (the last epoch
    /// is always written).
    pub checkpoint_every: usize,
    /// Random horizontal flips during training.
    pub augment: bool,
    /// Policy used to score the dev set when picking the best checkpoint.
    pub threshold: ThresholdPolicy,
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-5,
            epochs: 50,
            lr_halve_every: 20,
            batch_size: 8,
            seed: 0,
            model: ModelConfig::single_modal(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 1,
            augment: false,
            threshold: ThresholdPolicy::default(),
            train_data: None,
            dev_data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        self.model.validate()
    }

    /// Parses a flat TOML file whose keys are the fields of [`TrainConfig`]
    /// and [`ModelConfig`] side by side. Relative paths are resolved against
    /// the file's directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.checkpoint_dir);
        cfg.train_data.as_mut().map(resolve);
        cfg.dev_data.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let flat: Flat = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        flat.into_config()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ListOrString {
    List(Vec<String>),
    Csv(String),
}

impl ListOrString {
    fn items(self) -> Vec<String> {
        match self {
            ListOrString::List(v) => v,
            ListOrString::Csv(s) => s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Flat {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    epochs: Option<usize>,
    lr_halve_every: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    checkpoint_dir: Option<PathBuf>,
    checkpoint_every: Option<usize>,
    augment: Option<bool>,
    threshold: Option<String>,
    train_data: Option<PathBuf>,
    dev_data: Option<PathBuf>,
    theta: Option<f64>,
    init_channels: Option<usize>,
    expand_ratio: Option<f64>,
    input_size: Option<usize>,
    modalities: Option<ListOrString>,
    fusion: Option<String>,
    attention: Option<bool>,
    score_weights: Option<Vec<f64>>,
}

impl Flat {
    fn into_config(self) -> Result<TrainConfig> {
        let modalities = self
            .modalities
            .map(|m| m.items().iter().map(|s| s.parse()).collect::<Result<Vec<Modality>>>())
            .transpose()?;
        // multi-modal runs start from the multi-modal defaults
        let mut model = match &modalities {
            Some(m) if m.len() > 1 => ModelConfig { modalities: m.clone(), ..ModelConfig::multi_modal() },
            Some(m) => ModelConfig { modalities: m.clone(), ..ModelConfig::single_modal() },
            None => ModelConfig::single_modal(),
        };
        if self.score_weights.is_none() {
            model.score_weights = vec![1.0 / model.modalities.len() as f64; model.modalities.len()];
        }
        let d = TrainConfig::default();
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(model.theta, self.theta);
        set!(model.init_channels, self.init_channels);
        set!(model.expand_ratio, self.expand_ratio);
        set!(model.input_size, self.input_size);
        set!(model.attention, self.attention);
        set!(model.score_weights, self.score_weights);
        if let Some(f) = self.fusion {
            model.fusion = f.parse::<Fusion>()?;
        }
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            epochs: self.epochs.unwrap_or(d.epochs),
            lr_halve_every: self.lr_halve_every.unwrap_or(d.lr_halve_every),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            model,
            checkpoint_dir: self.checkpoint_dir.unwrap_or(d.checkpoint_dir),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            augment: self.augment.unwrap_or(d.augment),
            threshold: self.threshold.map(|t| t.parse()).transpose()?.unwrap_or(d.threshold),
            train_data: self.train_data,
            dev_data: self.dev_data,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
