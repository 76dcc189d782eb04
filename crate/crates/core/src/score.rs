//! Center-distance OOD scores and the baselines they are compared with.
//!
//! Every score follows "higher = more in-distribution". Records without any
//! in-distribution tag are rejected with [`REJECTED_SCORE`].

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::centers::{l2, CenterBank};
use crate::decompose::{decompose_record, DecompositionConfig, IndVocab, ObjectSample};
use crate::error::{Error, Result};
use crate::net::{self, ProjectionParams};
use crate::store::{FeatureRecord, ManifestEntry, Split, Store, StoreError};

/// Minimum representable score, given to rejected samples.
pub const REJECTED_SCORE: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("zero-norm {0}")]
    ZeroNorm(String),
    #[error("vector of length {found} against centers of width {expected}")]
    Dim { expected: usize, found: usize },
    #[error("empty center bank")]
    NoCenters,
    #[error("score file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Cosine,
    Euclidean,
    Kl,
    TagScore,
    MeanCs,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Cosine, Metric::Euclidean, Metric::Kl, Metric::TagScore, Metric::MeanCs];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Kl => "kl",
            Metric::TagScore => "tag_score",
            Metric::MeanCs => "mean_cs",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub record_id: String,
    pub split: Split,
    pub score: f64,
    pub best_class: Option<usize>,
    pub rejected_no_tag: bool,
    pub metric: Metric,
}

fn check_bank(v: ArrayView1<'_, f64>, bank: &CenterBank) -> Result<(), ScoreError> {
    if bank.num_classes() == 0 {
        return Err(ScoreError::NoCenters);
    }
    if v.len() != bank.width() {
        return Err(ScoreError::Dim { expected: bank.width(), found: v.len() });
    }
    Ok(())
}

/// First index attaining the maximum of `values`.
fn argmax(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.0 {
            best = (v, i);
        }
    }
    best
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let denom = (a.dot(&a) * b.dot(&b)).sqrt();
    (a.dot(&b) / denom).clamp(-1.0, 1.0)
}

/// Maximum cosine similarity to any center, with the first maximising class.
pub fn ood_score_cosine(projected: ArrayView1<'_, f64>, bank: &CenterBank) -> Result<(f64, usize), ScoreError> {
    check_bank(projected, bank)?;
    if l2(projected) == 0.0 {
        return Err(ScoreError::ZeroNorm("query vector".into()));
    }
    if let Some(c) = (0..bank.num_classes()).find(|&c| l2(bank.center(c)) == 0.0) {
        return Err(ScoreError::ZeroNorm(format!("center {c}")));
    }
    Ok(argmax((0..bank.num_classes()).map(|c| cosine(projected, bank.center(c)))))
}

/// Negated distance to the nearest center.
pub fn ood_score_euclidean(projected: ArrayView1<'_, f64>, bank: &CenterBank) -> Result<(f64, usize), ScoreError> {
    check_bank(projected, bank)?;
    Ok(argmax((0..bank.num_classes()).map(|c| {
        let diff = &projected - &bank.center(c);
        -l2(diff.view())
    })))
}

fn log_softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.mapv(|x| x - lse)
}

/// `KL(softmax(p) ‖ softmax(q))`, clamped at zero.
pub fn kl_softmax(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let (lp, lq) = (log_softmax(p), log_softmax(q));
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Negated smallest KL divergence between the softmaxed query and centers.
pub fn ood_score_kl(projected: ArrayView1<'_, f64>, bank: &CenterBank) -> Result<(f64, usize), ScoreError> {
    check_bank(projected, bank)?;
    Ok(argmax((0..bank.num_classes()).map(|c| -kl_softmax(projected, bank.center(c)))))
}

/// Highest tagging confidence among in-distribution tags, or the sentinel.
pub fn tag_score_baseline(record: &FeatureRecord, vocab: &IndVocab) -> f64 {
    record
        .tags
        .iter()
        .filter(|t| vocab.contains_tag(t.tag_id))
        .map(|t| t.confidence as f64)
        .reduce(f64::max)
        .unwrap_or(REJECTED_SCORE)
}

/// Class centers as the mean of each class's mean-pooled raw tokens.
pub fn mean_center_baseline(train: &[ObjectSample], k: usize) -> Result<CenterBank> {
    let pooled: Vec<(usize, Array1<f64>)> = train
        .iter()
        .filter(|s| s.label_id >= 0)
        .map(|s| (s.label_id as usize, s.mean_token()))
        .collect();
    Ok(CenterBank::from_class_means(k, pooled.iter().map(|(c, v)| (*c, v.view())))?)
}

/// Class centers as the mean projected feature of each class.
pub fn projected_class_means(params: &ProjectionParams, train: &[ObjectSample], k: usize) -> Result<CenterBank> {
    let mut projected = Vec::with_capacity(train.len());
    for s in train.iter().filter(|s| s.label_id >= 0) {
        let out = net::forward(params, s.tokens.view()).map_err(|e| Error::in_record(&s.record_id, e))?;
        projected.push((s.label_id as usize, out.projected));
    }
    Ok(CenterBank::from_class_means(k, projected.iter().map(|(c, v)| (*c, v.view())))?)
}

/// How test records are turned into scores.
#[derive(Debug, Clone, Copy)]
pub enum Detector<'a> {
    /// Project decomposed features, then compare with `centers`.
    Projected { params: &'a ProjectionParams, centers: &'a CenterBank, metric: Metric },
    /// Cosine between mean-pooled raw object tokens and raw class means.
    RawMeanCenters { centers: &'a CenterBank },
    TagScore,
}

impl Detector<'_> {
    pub fn metric(&self) -> Metric {
        match self {
            Detector::Projected { metric, .. } => *metric,
            Detector::RawMeanCenters { .. } => Metric::MeanCs,
            Detector::TagScore => Metric::TagScore,
        }
    }
}

/// Scores one record: decompose, reject when nothing in-distribution survives,
/// otherwise apply the detector.
pub fn score_record(
    record: &FeatureRecord,
    split: Split,
    vocab: &IndVocab,
    detector: &Detector<'_>,
    cfg: &DecompositionConfig,
) -> Result<ScoredSample> {
    let metric = detector.metric();
    let rejected = |id: &str| ScoredSample {
        record_id: id.to_string(),
        split,
        score: REJECTED_SCORE,
        best_class: None,
        rejected_no_tag: true,
        metric,
    };
    if let Detector::TagScore = detector {
        let score = tag_score_baseline(record, vocab);
        if score == REJECTED_SCORE {
            return Ok(rejected(&record.id));
        }
        return Ok(ScoredSample {
            record_id: record.id.clone(),
            split,
            score,
            best_class: None,
            rejected_no_tag: false,
            metric,
        });
    }
    let Some(sample) = decompose_record(record, vocab, cfg) else {
        return Ok(rejected(&record.id));
    };
    let (score, class) = match detector {
        Detector::Projected { params, centers, metric } => {
            let out = net::forward(params, sample.tokens.view())?;
            let v = out.projected.view();
            match metric {
                Metric::Euclidean => ood_score_euclidean(v, centers)?,
                Metric::Kl => ood_score_kl(v, centers)?,
                _ => ood_score_cosine(v, centers)?,
            }
        }
        Detector::RawMeanCenters { centers } => ood_score_cosine(sample.mean_token().view(), centers)?,
        Detector::TagScore => unreachable!(),
    };
    Ok(ScoredSample {
        record_id: record.id.clone(),
        split,
        score,
        best_class: Some(class),
        rejected_no_tag: false,
        metric,
    })
}

/// Scores `entries` in order.
pub fn score_dataset(
    store: &Store,
    entries: &[&ManifestEntry],
    vocab: &IndVocab,
    detector: &Detector<'_>,
    cfg: &DecompositionConfig,
) -> Result<Vec<ScoredSample>> {
    entries
        .iter()
        .map(|entry| {
            let record = store.read(entry).map_err(|e| Error::in_record(&entry.id, e))?;
            score_record(&record, entry.split, vocab, detector, cfg).map_err(|e| Error::in_record(&entry.id, e))
        })
        .collect()
}

pub const SCORE_HEADER: &str = "id,split,score,best_class,rejected,metric";

/// One line per sample; the sentinel prints as `-inf`, a missing class as `-`.
pub fn format_scores(samples: &[ScoredSample]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for s in samples {
        let class = s.best_class.map_or_else(|| "-".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.record_id, s.split, s.score, class, s.rejected_no_tag as u8, s.metric
        );
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredSample>, ScoreError> {
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || (idx == 0 && line == SCORE_HEADER) {
            continue;
        }
        let bad = |message: String| ScoreError::Parse { line: line_no, message };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let score = f[2].parse::<f64>().map_err(|e| bad(format!("score: {e}")))?;
        if score.is_nan() {
            return Err(bad("NaN score".into()));
        }
        let best_class = match f[3] {
            "-" => None,
            c => Some(c.parse::<usize>().map_err(|e| bad(format!("best_class: {e}")))?),
        };
        let rejected_no_tag = match f[4] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("rejected flag {other:?}"))),
        };
        samples.push(ScoredSample {
            record_id: f[0].to_string(),
            split: f[1].parse().map_err(bad)?,
            score,
            best_class,
            rejected_no_tag,
            metric: f[5].parse().map_err(bad)?,
        });
    }
    Ok(samples)
}

pub fn write_scores(samples: &[ScoredSample], path: &Path) -> Result<(), StoreError> {
    fs::write(path, format_scores(samples)).map_err(|e| StoreError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    Ok(parse_scores(&text)?)
}
