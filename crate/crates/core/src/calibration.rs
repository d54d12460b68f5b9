//! Expected calibration error and temperature scaling.

use std::fmt::Write as _;

use crate::classifier::argmax;
use crate::error::{Error, Result};
use crate::numerics::softmax;

/// Default number of equal-width confidence bins.
pub const DEFAULT_BINS: usize = 20;

/// Confidence (max class probability) of one prediction and whether its
/// argmax was right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bin {
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<Bin>,
    pub ece: f64,
    pub temperature_used: f64,
}

impl CalibrationReport {
    /// Tab-separated `bin count confidence accuracy` rows with a header.
    pub fn to_table(&self) -> String {
        let mut out = String::from("bin\tcount\tconfidence\taccuracy\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{:.6}\t{:.6}", b.count, b.confidence, b.accuracy);
        }
        out
    }
}

/// Bin of confidence `c` among `bins` half-open bins; `c = 1` lands in
/// the last one.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// `Σ_b (n_b / N) |acc(b) − conf(b)|` over equal-width bins on `[0, 1]`.
pub fn ece(records: &[CalibrationRecord], bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bin count must be at least 1".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for r in records {
        let b = bin_index(r.confidence, bins);
        counts[b] += 1;
        conf_sum[b] += r.confidence;
        hits[b] += r.correct as usize;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    let bins: Vec<Bin> = (0..bins)
        .map(|b| {
            if counts[b] == 0 {
                return Bin::default();
            }
            let c = counts[b] as f64;
            let bin = Bin {
                count: counts[b],
                confidence: conf_sum[b] / c,
                accuracy: hits[b] as f64 / c,
            };
            total += c / n * (bin.accuracy - bin.confidence).abs();
            bin
        })
        .collect();
    Ok(CalibrationReport {
        bins,
        ece: total,
        temperature_used: 1.0,
    })
}

/// Class log-scores for one query together with its true label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredQuery {
    pub log_scores: Vec<f64>,
    pub label: usize,
}

/// Records obtained by normalizing `log_scores / temperature`.
pub fn records_at(scored: &[ScoredQuery], temperature: f64) -> Result<Vec<CalibrationRecord>> {
    scored
        .iter()
        .map(|q| {
            let scaled: Vec<f64> = q.log_scores.iter().map(|s| s / temperature).collect();
            let probs = softmax(&scaled)?;
            Ok(CalibrationRecord {
                confidence: probs.iter().copied().fold(0.0, f64::max),
                correct: argmax(&q.log_scores) == q.label,
            })
        })
        .collect()
}

/// 101 log-spaced temperatures over `[0.05, 20]`; the midpoint is exactly 1.
pub fn temperature_grid() -> Vec<f64> {
    const POINTS: usize = 101;
    let (lo, hi) = (0.05f64.ln(), 20.0f64.ln());
    (0..POINTS)
        .map(|i| {
            if i == POINTS / 2 {
                1.0
            } else {
                (lo + (hi - lo) * i as f64 / (POINTS - 1) as f64).exp()
            }
        })
        .collect()
}

/// Grid temperature minimizing the ECE of the pooled validation
/// predictions; ties go to the temperature closest to 1 in log scale.
pub fn fit_temperature(scored: &[ScoredQuery], bins: usize) -> Result<CalibrationReport> {
    if scored.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best: Option<CalibrationReport> = None;
    for t in temperature_grid() {
        let mut report = ece(&records_at(scored, t)?, bins)?;
        report.temperature_used = t;
        let better = match &best {
            None => true,
            Some(b) => report.ece < b.ece || (report.ece == b.ece && t.ln().abs() < b.temperature_used.ln().abs()),
        };
        if better {
            best = Some(report);
        }
    }
    Ok(best.expect("grid is non-empty"))
}
