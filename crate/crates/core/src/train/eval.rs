use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{collate, SampleRecord};
use crate::error::{invalid, Error, Result};
use crate::metrics::{aggregate, metrics_at, pct_value, select_threshold, Label, ProtocolMetrics, SubProtocol, ThresholdPolicy};
use crate::models::Model;

const EVAL_BATCH: usize = 8;

/// One row of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub sub_protocol: SubProtocol,
    pub label: Label,
    pub score: f64,
}

/// Eval-mode liveness scores in record order. Chunks are scored in
/// parallel; eval-mode outputs do not depend on batch composition.
pub fn score_records(model: &Model<f32>, records: &[SampleRecord]) -> Result<Vec<ScoreRow>> {
    let modalities = model.config().modalities.clone();
    let chunks: Vec<&[SampleRecord]> = records.chunks(EVAL_BATCH).collect();
    let scored = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&SampleRecord> = chunk.iter().collect();
            let batch = collate::<f32>(&refs, &modalities)?;
            model.predict_scores(&batch.inputs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records
        .iter()
        .zip(scored.into_iter().flatten())
        .map(|(r, score)| ScoreRow { sample_id: r.id.clone(), sub_protocol: r.sub_protocol, label: r.label, score })
        .collect())
}

/// Metrics in percent, rounded to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsPct {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl From<&ProtocolMetrics> for MetricsPct {
    fn from(m: &ProtocolMetrics) -> Self {
        Self { apcer: pct_value(m.apcer), bpcer: pct_value(m.bpcer), acer: pct_value(m.acer) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubProtocolReport {
    pub sub_protocol: SubProtocol,
    pub n_live: usize,
    pub n_spoof: usize,
    #[serde(flatten)]
    pub metrics: MetricsPct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStdPct {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub threshold: f64,
    pub n_samples: usize,
    /// Metrics over all samples at the selected threshold.
    pub pooled: MetricsPct,
    pub sub_protocols: Vec<SubProtocolReport>,
    /// Mean ± sample std of the sub-protocol ACERs; present when at least
    /// two sub-protocols contain both classes.
    pub overall: Option<MeanStdPct>,
    /// Unrounded metrics for programmatic use.
    #[serde(skip)]
    pub raw: RawMetrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawMetrics {
    pub pooled: Option<ProtocolMetrics>,
    pub sub_protocols: Vec<ProtocolMetrics>,
    pub overall: Option<(f64, f64)>,
}

fn pairs(rows: &[&ScoreRow]) -> Vec<(f64, Label)> {
    rows.iter().map(|r| (r.score, r.label)).collect()
}

/// Builds the report for `rows`. The threshold comes from `policy` applied
/// to `threshold_rows` when given (e.g. a dev or training set), otherwise to
/// `rows` themselves.
pub fn report(rows: &[ScoreRow], policy: ThresholdPolicy, threshold_rows: Option<&[ScoreRow]>) -> Result<EvalReport> {
    let all: Vec<&ScoreRow> = rows.iter().collect();
    let basis: Vec<&ScoreRow> = threshold_rows.map_or_else(|| all.clone(), |t| t.iter().collect());
    let threshold = select_threshold(&pairs(&basis), policy)?;
    let pooled = metrics_at(&pairs(&all), threshold)?;
    let mut subs = Vec::new();
    let mut raw_subs = Vec::new();
    for p in SubProtocol::ALL {
        let part: Vec<&ScoreRow> = rows.iter().filter(|r| r.sub_protocol == p).collect();
        let n_live = part.iter().filter(|r| r.label == Label::Live).count();
        let n_spoof = part.len() - n_live;
        if n_live == 0 || n_spoof == 0 {
            if !part.is_empty() {
                log::warn!("sub-protocol {p} lacks one class ({n_live} live, {n_spoof} spoof); skipped");
            }
            continue;
        }
        let mut m = metrics_at(&pairs(&part), threshold)?;
        m.sub_protocol = Some(p);
        subs.push(SubProtocolReport { sub_protocol: p, n_live, n_spoof, metrics: (&m).into() });
        raw_subs.push(m);
    }
    let overall = if raw_subs.len() >= 2 { Some(aggregate(&raw_subs)?) } else { None };
    Ok(EvalReport {
        policy: policy.to_string(),
        threshold,
        n_samples: rows.len(),
        pooled: (&pooled).into(),
        sub_protocols: subs,
        overall: overall.map(|(m, s)| MeanStdPct { mean: pct_value(m), std: pct_value(s) }),
        raw: RawMetrics { pooled: Some(pooled), sub_protocols: raw_subs, overall },
    })
}

/// Scores `records` and reports on them.
pub fn evaluate(
    model: &Model<f32>,
    records: &[SampleRecord],
    policy: ThresholdPolicy,
    threshold_records: Option<&[SampleRecord]>,
) -> Result<(Vec<ScoreRow>, EvalReport)> {
    let rows = score_records(model, records)?;
    let basis = threshold_records.map(|t| score_records(model, t)).transpose()?;
    let rep = report(&rows, policy, basis.as_deref())?;
    Ok((rows, rep))
}

pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>().map_err(csv_err)?;
    let mut seen = BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.sample_id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id `{}` in {}", row.sample_id, path.display())));
        }
    }
    Ok(rows)
}

/// Row-wise weighted average of several score files over identical sample
/// ids. Output follows the first file's order; labels and sub-protocols
/// must agree across files.
pub fn fuse_score_tables(tables: &[Vec<ScoreRow>], weights: &[f64]) -> Result<Vec<ScoreRow>> {
    if tables.is_empty() {
        return Err(invalid!("no score files to fuse"));
    }
    if tables.len() != weights.len() {
        return Err(invalid!("{} score files but {} weights", tables.len(), weights.len()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid!("fusion weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid!("fusion weights must sum to 1, got {total}"));
    }
    let maps: Vec<BTreeMap<&str, &ScoreRow>> =
        tables.iter().map(|t| t.iter().map(|r| (r.sample_id.as_str(), r)).collect()).collect();
    let first: BTreeSet<&str> = maps[0].keys().copied().collect();
    for (i, m) in maps.iter().enumerate().skip(1) {
        let other: BTreeSet<&str> = m.keys().copied().collect();
        if other != first {
            let diff: Vec<&str> = first.symmetric_difference(&other).copied().collect();
            return Err(Error::Dataset(format!(
                "score file {} covers different samples than the first; symmetric difference: {}",
                i + 1,
                diff.join(", ")
            )));
        }
    }
    tables[0]
        .iter()
        .map(|row| {
            let mut score = 0.0;
            for (m, &w) in maps.iter().zip(weights) {
                let r = m[row.sample_id.as_str()];
                if r.label != row.label || r.sub_protocol != row.sub_protocol {
                    return Err(Error::Dataset(format!("sample `{}` has conflicting labels across files", row.sample_id)));
                }
                if !(0.0..=1.0).contains(&r.score) {
                    return Err(invalid!("score {} of `{}` outside [0, 1]", r.score, row.sample_id));
                }
                score += w * r.score;
            }
            Ok(ScoreRow { score, ..row.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, p: SubProtocol, label: Label, score: f64) -> ScoreRow {
        ScoreRow { sample_id: id.into(), sub_protocol: p, label, score }
    }

    fn table() -> Vec<ScoreRow> {
        vec![
            row("a", SubProtocol::P1, Label::Live, 0.9),
            row("b", SubProtocol::P1, Label::Spoof, 0.2),
            row("c", SubProtocol::P2, Label::Live, 0.4),
            row("d", SubProtocol::P2, Label::Spoof, 0.6),
        ]
    }

    #[test]
    fn fuse_rowwise_mean() {
        let mut other = table();
        for (r, s) in other.iter_mut().zip([0.5, 0.0, 0.8, 0.2]) {
            r.score = s;
        }
        let fused = fuse_score_tables(&[table(), other], &[0.5, 0.5]).unwrap();
        let scores: Vec<f64> = fused.iter().map(|r| r.score).collect();
        for (a, b) in scores.iter().zip([0.7, 0.1, 0.6, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_with_self_and_one_hot_weights() {
        assert_eq!(fuse_score_tables(&[table(), table()], &[0.3, 0.7]).unwrap().len(), 4);
        let mut other = table();
        other[0].score = 0.0;
        assert_eq!(fuse_score_tables(&[table(), other], &[1.0, 0.0]).unwrap(), table());
    }

    #[test]
    fn fuse_rejects_id_mismatch_naming_it() {
        let mut other = table();
        other[3].sample_id = "z".into();
        let err = fuse_score_tables(&[table(), other], &[0.5, 0.5]).unwrap_err().to_string();
        assert!(err.contains("d") && err.contains("z"), "{err}");
    }

    #[test]
    fn report_overall_matches_aggregate() {
        let rep = report(&table(), ThresholdPolicy::Fixed(0.5), None).unwrap();
        assert_eq!(rep.sub_protocols.len(), 2);
        let (m, s) = aggregate(&rep.raw.sub_protocols).unwrap();
        assert_eq!(rep.raw.overall, Some((m, s)));
        assert_eq!(rep.sub_protocols[0].metrics.acer, 0.0);
        assert_eq!(rep.sub_protocols[1].metrics.acer, 100.0);
    }
}
