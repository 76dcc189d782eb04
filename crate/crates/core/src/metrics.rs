//! AUROC and FPR at a target TPR, with IND as the positive class and higher
//! scores meaning "more in-distribution". The rejection sentinel `-inf` is an
//! ordinary (minimal) score here.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no {0} scores")]
    Empty(&'static str),
    #[error("NaN score")]
    NaN,
    #[error("tpr target {0} outside (0, 1]")]
    BadTarget(f64),
}

fn check(ind: &[f64], ood: &[f64]) -> Result<(), MetricError> {
    if ind.is_empty() {
        return Err(MetricError::Empty("IND"));
    }
    if ood.is_empty() {
        return Err(MetricError::Empty("OOD"));
    }
    if ind.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(MetricError::NaN);
    }
    Ok(())
}

/// Mann-Whitney form with midranks: `P(s_ind > s_ood) + ½·P(s_ind = s_ood)`.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64, MetricError> {
    check(ind, ood)?;
    let mut all: Vec<(f64, bool)> = ind
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2
    let mut rank_sum_ind = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let n_ind = all[i..j].iter().filter(|(_, is_ind)| *is_ind).count();
        rank_sum_ind += midrank * n_ind as f64;
        i = j;
    }
    let (n1, n0) = (ind.len() as f64, ood.len() as f64);
    let u = rank_sum_ind - n1 * (n1 + 1.0) / 2.0;
    Ok(u / (n1 * n0))
}

/// Step-function ROC: a sample is predicted IND when `score >= threshold`.
/// The threshold is the largest observed IND score (or `+inf`) whose TPR
/// reaches `tpr_target`; returns `(fpr, threshold)`.
pub fn fpr_at_tpr(ind: &[f64], ood: &[f64], tpr_target: f64) -> Result<(f64, f64), MetricError> {
    check(ind, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(MetricError::BadTarget(tpr_target));
    }
    let n = ind.len();
    let mut sorted = ind.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // smallest accepted count reaching the target
    let needed = (1..=n)
        .find(|&k| k as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let threshold = sorted[needed - 1];
    let fpr = ood.iter().filter(|&&s| s >= threshold).count() as f64 / ood.len() as f64;
    Ok((fpr, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold_at_95: f64,
    pub n_ind: usize,
    pub n_ood: usize,
}

pub fn evaluate(ind: &[f64], ood: &[f64]) -> Result<EvalResult, MetricError> {
    let auroc = auroc(ind, ood)?;
    let (fpr95, threshold_at_95) = fpr_at_tpr(ind, ood, 0.95)?;
    Ok(EvalResult { auroc, fpr95, threshold_at_95, n_ind: ind.len(), n_ood: ood.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub metric: String,
    pub result: EvalResult,
}

/// `variant,metric,auroc,fpr95` with both values as percentages, 2 decimals.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("variant,metric,auroc,fpr95\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2}",
            r.variant,
            r.metric,
            100.0 * r.result.auroc,
            100.0 * r.result.fpr95
        );
    }
    out
}
