//! Validation curves and their summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: Split,
    /// Per parameter, ‰ of the normalized range.
    pub theta_l1: Vec<f64>,
    pub mean_l1: f64,
    /// Mean training loss since the previous row, when known.
    pub loss: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: u64, split: Split, theta_l1: Vec<f64>, loss: Option<f64>) -> Self {
        let mean_l1 = theta_l1.iter().sum::<f64>() / theta_l1.len().max(1) as f64;
        Self { step, split, theta_l1, mean_l1, loss }
    }
}

/// First step whose value drops below `threshold`.
pub fn convergence_step(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, v)| *v < threshold).map(|(k, _)| *k)
}

/// Sum of absolute successive differences.
pub fn total_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Median with linear interpolation; `None` for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Median of convergence steps where a run that never converged counts
/// as later than every run that did. `None` when that median run did not
/// converge.
pub fn censored_median(steps: &[Option<u64>]) -> Option<f64> {
    let mut v: Vec<f64> = steps.iter().map(|s| s.map_or(f64::INFINITY, |k| k as f64)).collect();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return None;
    }
    let m = v.len() / 2;
    let med = if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) };
    med.is_finite().then_some(med)
}

/// Writes rows after checking they share one parameter count, hold finite
/// values and have nondecreasing steps.
pub fn write_metrics_csv<W: Write>(out: W, params: &[String], rows: &[MetricsRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let finite = r.theta_l1.iter().all(|v| v.is_finite()) && r.mean_l1.is_finite();
        if r.theta_l1.len() != params.len() || !finite {
            return Err(HarnessError::Manifest(format!("metrics row {i} does not match the schema")));
        }
        if i > 0 && r.step < rows[i - 1].step {
            return Err(HarnessError::Manifest(format!("metrics row {i} goes back in time")));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "split".into()];
    header.extend(params.iter().map(|p| format!("l1_{p}")));
    header.extend(["l1_mean".to_string(), "loss".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.split.to_string()];
        rec.extend(r.theta_l1.iter().map(|v| v.to_string()));
        rec.push(r.mean_l1.to_string());
        rec.push(r.loss.map(|l| format!("{l:e}")).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
