//! APCER / BPCER / ACER, threshold selection and sub-protocol aggregation.
//!
//! Bona fide (live) presentations are the positive class: a spoof scored as
//! live is a false positive, a live face scored as spoof a false negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Dataset(format!("unknown label `{other}` (expected live or spoof)"))),
        }
    }
}

/// The three sub-protocols of the cross-ethnicity / cross-attack protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubProtocol {
    P1,
    P2,
    P3,
}

impl SubProtocol {
    pub const ALL: [SubProtocol; 3] = [SubProtocol::P1, SubProtocol::P2, SubProtocol::P3];

    pub fn as_str(self) -> &'static str {
        match self {
            SubProtocol::P1 => "4@1",
            SubProtocol::P2 => "4@2",
            SubProtocol::P3 => "4@3",
        }
    }
}

impl fmt::Display for SubProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "4@1" => Ok(SubProtocol::P1),
            "4@2" => Ok(SubProtocol::P2),
            "4@3" => Ok(SubProtocol::P3),
            other => Err(Error::Dataset(format!("unknown sub-protocol `{other}` (expected 4@1, 4@2 or 4@3)"))),
        }
    }
}

impl Serialize for SubProtocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SubProtocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub threshold: f64,
    pub sub_protocol: Option<SubProtocol>,
}

/// Tallies counts with the rule `score >= threshold` ⇒ predicted live.
pub fn confusion(scores: &[(f64, Label)], threshold: f64) -> Result<ConfusionCounts> {
    if scores.is_empty() {
        return Err(Error::Degenerate("no scores to tally".into()));
    }
    let mut c = ConfusionCounts::default();
    for &(s, label) in scores {
        match (s >= threshold, label) {
            (true, Label::Live) => c.tp += 1,
            (false, Label::Live) => c.fn_ += 1,
            (true, Label::Spoof) => c.fp += 1,
            (false, Label::Spoof) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `APCER = FP/(TN+FP)`, `BPCER = FN/(FN+TP)`, `ACER = (APCER+BPCER)/2`.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<ProtocolMetrics> {
    if c.tn + c.fp == 0 {
        return Err(Error::Degenerate("no attack samples: APCER is undefined".into()));
    }
    if c.fn_ + c.tp == 0 {
        return Err(Error::Degenerate("no bona fide samples: BPCER is undefined".into()));
    }
    let apcer = c.fp as f64 / (c.tn + c.fp) as f64;
    let bpcer = c.fn_ as f64 / (c.fn_ + c.tp) as f64;
    Ok(ProtocolMetrics { apcer, bpcer, acer: (apcer + bpcer) / 2.0, threshold: f64::NAN, sub_protocol: None })
}

/// Confusion plus metrics at a threshold.
pub fn metrics_at(scores: &[(f64, Label)], threshold: f64) -> Result<ProtocolMetrics> {
    let mut m = compute_metrics(&confusion(scores, threshold)?)?;
    m.threshold = threshold;
    Ok(m)
}

/// Mean and sample (n−1) standard deviation of the ACERs.
pub fn aggregate(sub_results: &[ProtocolMetrics]) -> Result<(f64, f64)> {
    let acers: Vec<f64> = sub_results.iter().map(|m| m.acer).collect();
    mean_std(&acers)
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 sub-protocols, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum ThresholdPolicy {
    Fixed(f64),
    MinAcer,
    Eer,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    /// Accepts `min_acer`, `eer`, `fixed:<t>` or a bare number.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "min_acer" | "min-acer" => return Ok(ThresholdPolicy::MinAcer),
            "eer" => return Ok(ThresholdPolicy::Eer),
            _ => {}
        }
        let num = s.strip_prefix("fixed:").or_else(|| s.strip_prefix("fixed=")).unwrap_or(s);
        num.parse::<f64>()
            .ok()
            .filter(|t| t.is_finite())
            .map(ThresholdPolicy::Fixed)
            .ok_or_else(|| Error::Config(format!("bad threshold policy `{s}` (use fixed:<t>, min_acer or eer)")))
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::MinAcer => f.write_str("min_acer"),
            ThresholdPolicy::Eer => f.write_str("eer"),
        }
    }
}

/// Candidate thresholds: 0, 1 and midpoints of adjacent distinct scores,
/// ascending.
pub fn candidate_thresholds(scores: &[(f64, Label)]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.iter().map(|p| p.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c: Vec<f64> = s.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    c.push(0.0);
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

pub fn select_threshold(dev_scores: &[(f64, Label)], policy: ThresholdPolicy) -> Result<f64> {
    let live = dev_scores.iter().any(|p| p.1 == Label::Live);
    let spoof = dev_scores.iter().any(|p| p.1 == Label::Spoof);
    if !(live && spoof) {
        return Err(Error::Degenerate("threshold selection needs both live and spoof samples".into()));
    }
    if let ThresholdPolicy::Fixed(t) = policy {
        return Ok(t);
    }
    let mut best: Option<(f64, f64)> = None;
    for t in candidate_thresholds(dev_scores) {
        let m = metrics_at(dev_scores, t)?;
        let cost = match policy {
            ThresholdPolicy::MinAcer => m.acer,
            _ => (m.apcer - m.bpcer).abs(),
        };
        // strict comparison keeps the lowest threshold among ties
        if best.map_or(true, |(c, _)| cost < c) {
            best = Some((cost, t));
        }
    }
    Ok(best.expect("candidates are never empty").1)
}

/// Formats a fraction as a percentage with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Rounds a fraction to a percentage with two decimals.
pub fn pct_value(v: f64) -> f64 {
    (v * 10000.0).round() / 100.0
}
