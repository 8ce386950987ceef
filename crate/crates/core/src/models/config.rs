use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Ir];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::Config(format!("unknown modality `{other}` (expected rgb, depth or ir)"))),
        }
    }
}

/// How several modalities are combined. Ignored for single-modality models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Channel-concatenate the inputs into one backbone.
    Input,
    /// One unshared backbone per modality, multi-level features concatenated.
    Feature,
    /// One full network per modality, mean-mask scores averaged with weights.
    Score,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "input" => Ok(Fusion::Input),
            "feature" => Ok(Fusion::Feature),
            "score" => Ok(Fusion::Score),
            other => Err(Error::Config(format!("unknown fusion `{other}` (expected input, feature or score)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub theta: f64,
    pub init_channels: usize,
    pub expand_ratio: f64,
    pub input_size: usize,
    pub modalities: Vec<Modality>,
    pub fusion: Fusion,
    pub attention: bool,
    /// One weight per entry of `modalities`; used by score fusion.
    pub score_weights: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::single_modal()
    }
}

impl ModelConfig {
    /// RGB network with attention and 80 initial channels.
    pub fn single_modal() -> Self {
        Self {
            theta: 0.7,
            init_channels: 80,
            expand_ratio: 2.0,
            input_size: 256,
            modalities: vec![Modality::Rgb],
            fusion: Fusion::Feature,
            attention: true,
            score_weights: vec![1.0],
        }
    }

    /// Three unshared 64-channel branches with feature-level fusion.
    pub fn multi_modal() -> Self {
        Self {
            theta: 0.7,
            init_channels: 64,
            expand_ratio: 2.0,
            input_size: 256,
            modalities: Modality::ALL.to_vec(),
            fusion: Fusion::Feature,
            attention: false,
            score_weights: vec![1.0 / 3.0; 3],
        }
    }

    pub fn is_multi_modal(&self) -> bool {
        self.modalities.len() > 1
    }

    pub fn mask_size(&self) -> usize {
        self.input_size / 8
    }

    /// Width of the expanded layer inside each level cell.
    pub fn hidden_channels(&self) -> Result<usize> {
        let hidden = self.expand_ratio * self.init_channels as f64;
        let rounded = hidden.round();
        if (hidden - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "expand_ratio {} times init_channels {} is not a positive integer",
                self.expand_ratio, self.init_channels
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.init_channels == 0 {
            return bad("init_channels must be >= 1".into());
        }
        self.hidden_channels()?;
        if self.input_size < 8 || self.input_size % 8 != 0 {
            return bad(format!("input_size must be a positive multiple of 8, got {}", self.input_size));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return bad(format!("modality {m} listed twice"));
            }
        }
        if self.is_multi_modal() && self.fusion == Fusion::Feature && self.attention {
            return bad("attention is not supported with feature-level fusion".into());
        }
        if self.is_multi_modal() && self.fusion == Fusion::Score {
            if self.score_weights.len() != self.modalities.len() {
                return bad(format!(
                    "score_weights has {} entries for {} modalities",
                    self.score_weights.len(),
                    self.modalities.len()
                ));
            }
            if self.score_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return bad("score_weights must be finite and non-negative".into());
            }
            let total: f64 = self.score_weights.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return bad(format!("score_weights must sum to 1, got {total}"));
            }
        }
        Ok(())
    }
}
