//! Evaluation metrics over integer rank predictions.

use serde::{Deserialize, Serialize};

use crate::error::{domain, MwrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: u64,
    pub truth: i32,
    pub prediction: i32,
    /// Annotator standard deviation, when the dataset provides one.
    pub sigma: Option<f64>,
}

impl EvalRecord {
    pub fn abs_error(&self) -> i64 {
        (self.prediction as i64 - self.truth as i64).abs()
    }
}

/// Pairwise (cascade) summation; the order of additions depends only on the
/// length of the input.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return domain("metrics need at least one record");
    }
    Ok(())
}

pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let errs: Vec<f64> = records.iter().map(|r| r.abs_error() as f64).collect();
    Ok(pairwise_sum(&errs) / records.len() as f64)
}

/// Percentage of records with `|prediction - truth| <= tolerance`.
pub fn cumulative_score(records: &[EvalRecord], tolerance: u32) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| r.abs_error() <= tolerance as i64).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Mean of `1 - exp(-(pred - truth)^2 / (2 sigma^2))`.
pub fn epsilon_error(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let terms = records
        .iter()
        .map(|r| match r.sigma {
            Some(s) if s.is_finite() && s > 0.0 => {
                let e = r.abs_error() as f64;
                Ok(1.0 - (-(e * e) / (2.0 * s * s)).exp())
            }
            Some(s) => Err(MwrError::Data(format!(
                "record {}: sigma must be positive, got {s}",
                r.id
            ))),
            None => Err(MwrError::Data(format!("record {}: missing sigma", r.id))),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms) / records.len() as f64)
}

/// Exact-match percentage.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    cumulative_score(records, 0)
}
