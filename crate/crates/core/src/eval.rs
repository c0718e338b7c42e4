//! Ranking metrics, score histograms and token heatmaps.
//!
//! Inliers are the positive class: scores are normality scores, so a good
//! detector ranks inliers above outliers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::ScoreReport;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("metric needs both inliers and outliers (got {inliers} inliers, {outliers} outliers)")]
    SingleClass { inliers: usize, outliers: usize },
    #[error("score {0} is not a number")]
    NaN(f64),
    #[error("histogram needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error("histogram class `{0}` has no scores")]
    EmptyClass(&'static str),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length { scores: scores.len(), labels: labels.len() });
    }
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::NaN(s));
    }
    let inliers = labels.iter().filter(|&&l| l).count();
    let outliers = labels.len() - inliers;
    if inliers == 0 || outliers == 0 {
        return Err(EvalError::SingleClass { inliers, outliers });
    }
    Ok((inliers, outliers))
}

/// Indices sorted by score, ascending.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random inlier scores above a random outlier, ties
/// counting one half (Mann–Whitney U over average ranks).
pub fn auroc(scores: &[f64], inlier: &[bool]) -> Result<f64, EvalError> {
    let (n_in, n_out) = check(scores, inlier)?;
    let idx = order(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| inlier[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_in * (n_in + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    Inlier,
    Outlier,
}

/// Average precision with step-wise interpolation: thresholds are the
/// distinct scores from high to low, tied scores enter together, and
/// `AP = Σ (R_n − R_{n−1})·P_n`. With outliers positive the scores are
/// negated.
pub fn aupr(scores: &[f64], inlier: &[bool], positive: PositiveClass) -> Result<f64, EvalError> {
    check(scores, inlier)?;
    let (s, pos): (Vec<f64>, Vec<bool>) = match positive {
        PositiveClass::Inlier => (scores.to_vec(), inlier.to_vec()),
        PositiveClass::Outlier => (scores.iter().map(|v| -v).collect(), inlier.iter().map(|l| !l).collect()),
    };
    let total_pos = pos.iter().filter(|&&p| p).count() as f64;
    let mut idx = order(&s);
    idx.reverse();
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s[idx[j + 1]] == s[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            seen += 1.0;
            if pos[k] {
                tp += 1.0;
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub n_in: usize,
    pub n_out: usize,
    pub split: String,
    pub config_hash: String,
}

pub fn metric_report(scores: &[f64], inlier: &[bool], split: &str, config_hash: &str) -> Result<MetricReport, EvalError> {
    let (n_in, n_out) = check(scores, inlier)?;
    Ok(MetricReport {
        auroc: auroc(scores, inlier)?,
        aupr_in: aupr(scores, inlier, PositiveClass::Inlier)?,
        aupr_out: aupr(scores, inlier, PositiveClass::Outlier)?,
        n_in,
        n_out,
        split: split.to_string(),
        config_hash: config_hash.to_string(),
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-class score histograms over a shared range. Each density vector sums
/// to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from the pooled minimum to the pooled maximum.
    pub edges: Vec<f64>,
    pub inlier: Vec<f64>,
    pub outlier: Vec<f64>,
}

/// Histogram over the joint range of the scores.
pub fn histogram(in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<Histogram, EvalError> {
    check_classes(in_scores, out_scores, bins)?;
    let lo = in_scores.iter().chain(out_scores).copied().fold(f64::INFINITY, f64::min);
    let hi = in_scores.iter().chain(out_scores).copied().fold(f64::NEG_INFINITY, f64::max);
    histogram_in(in_scores, out_scores, bins, lo, hi)
}

/// Histogram over the fixed axis `[lo, hi]` (e.g. `[0, 1]` for probability
/// scores); values outside are clamped into the end bins.
pub fn histogram_in(in_scores: &[f64], out_scores: &[f64], bins: usize, lo: f64, mut hi: f64) -> Result<Histogram, EvalError> {
    check_classes(in_scores, out_scores, bins)?;
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let density = |s: &[f64]| {
        let mut counts = vec![0.0; bins];
        for &v in s {
            let b = ((v - lo) / width).max(0.0) as usize;
            counts[b.min(bins - 1)] += 1.0;
        }
        counts.iter().map(|c| c / s.len() as f64).collect()
    };
    Ok(Histogram { edges, inlier: density(in_scores), outlier: density(out_scores) })
}

fn check_classes(in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<(), EvalError> {
    if bins < 2 {
        return Err(EvalError::Bins(bins));
    }
    if in_scores.is_empty() {
        return Err(EvalError::EmptyClass("inlier"));
    }
    if out_scores.is_empty() {
        return Err(EvalError::EmptyClass("outlier"));
    }
    if let Some(&s) = in_scores.iter().chain(out_scores).find(|s| s.is_nan()) {
        return Err(EvalError::NaN(s));
    }
    Ok(())
}

impl Histogram {
    /// `Σ min(p_in, p_out)`: 1 for identical histograms, 0 for disjoint ones.
    pub fn overlap(&self) -> f64 {
        self.inlier.iter().zip(&self.outlier).map(|(a, b)| a.min(*b)).sum()
    }

    /// Columns: `bin_start,bin_end,inlier,outlier,config_hash`.
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("bin_start,bin_end,inlier,outlier,config_hash\n");
        for i in 0..self.inlier.len() {
            let _ = writeln!(out, "{},{},{},{},{}", self.edges[i], self.edges[i + 1], self.inlier[i], self.outlier[i], config_hash);
        }
        out
    }

    /// Overlaid bar chart as a standalone SVG.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let bins = self.inlier.len() as f64;
        let top = self.inlier.iter().chain(&self.outlier).copied().fold(0.0, f64::max).max(1e-12);
        let bw = (w - 2.0 * pad) / bins;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
            escape_html(title)
        );
        for (series, color) in [(&self.inlier, "#1f77b4"), (&self.outlier, "#d62728")] {
            for (i, &d) in series.iter().enumerate() {
                let bh = d / top * (h - 2.0 * pad);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                    pad + bw * i as f64,
                    h - pad - bh,
                    bw,
                    bh
                );
            }
        }
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-size=\"12\">{:.4}</text>", h - pad + 15.0, self.edges[0]);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{:.4}</text>",
            w - pad,
            h - pad + 15.0,
            self.edges[self.edges.len() - 1]
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// White (p = 1) to full red (p = 0) for `P_D(original) = p`.
pub fn heat_rgb(p: f64) -> (u8, u8, u8) {
    let a = (1.0 - p).clamp(0.0, 1.0);
    let gb = (255.0 * (1.0 - a)).round() as u8;
    (255, gb, gb)
}

/// Standalone HTML page with one paragraph per document; each token's
/// background encodes `1 − P_D(original)`.
pub fn heatmap_html(reports: &[ScoreReport]) -> String {
    let mut s = String::from(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>token heatmap</title></head>\n<body style=\"font-family:monospace\">\n",
    );
    for r in reports {
        let _ = write!(s, "<p><b>{}</b> [{}] score={:.6}<br>", escape_html(&r.doc_id), escape_html(&r.label), r.score);
        for (tok, p) in &r.per_token {
            let (red, g, b) = heat_rgb(*p);
            let _ = write!(
                s,
                "<span style=\"background:#{red:02x}{g:02x}{b:02x}\" title=\"{p:.4}\">{}</span> ",
                escape_html(tok)
            );
        }
        s.push_str("</p>\n");
    }
    s.push_str("</body>\n</html>\n");
    s
}

/// Terminal rendering with 24-bit background colors.
pub fn heatmap_ansi(reports: &[ScoreReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = write!(s, "{} [{}] {:.4}: ", r.doc_id, r.label, r.score);
        for (tok, p) in &r.per_token {
            let (red, g, b) = heat_rgb(*p);
            let _ = write!(s, "\x1b[48;2;{red};{g};{b}m\x1b[30m{tok}\x1b[0m ");
        }
        s.push('\n');
    }
    s
}

pub use crate::pipeline::contamination_sweep;
