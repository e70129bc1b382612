//! The cumulative ablation: plain path sampling, then path-wise moments,
//! path-wise variance reduction and importance-sampled paths.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{AblationRow, ExperimentConfig};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::experiment::{build_problem, run_on, RunSummary};
use crate::metrics::{censored_median, quantile};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub row: AblationRow,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub row: AblationRow,
    pub runs: usize,
    pub converged: usize,
    /// Runs that never converged count as slower than all others; `None`
    /// when the median run did not converge.
    pub median_convergence: Option<f64>,
    pub median_total_variation: f64,
}

/// Runs every configured row for seeds `seed, seed + 1, …`. Per-run files
/// go to `out/<row>/seed_<s>/`.
pub fn ablate(cfg: &ExperimentConfig, ds: &Dataset, out: Option<&Path>) -> Result<(Vec<AblationRun>, Vec<AblationSummary>)> {
    let problem = build_problem(cfg, ds)?;
    let mut runs = Vec::new();
    for s in 0..cfg.ablation.seeds {
        let seed = cfg.seed + s;
        for &row in &cfg.ablation.rows {
            let rcfg = cfg.with_row(row);
            let dir = out.map(|o| o.join(row.label().trim_start_matches('+')).join(format!("seed_{seed}")));
            let r = run_on(&rcfg, &problem, ds, seed, dir.as_deref())?;
            runs.push(AblationRun { row, seed, summary: r.summary });
        }
    }
    let summaries: Vec<AblationSummary> = cfg
        .ablation
        .rows
        .iter()
        .map(|&row| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.row == row).collect();
            let steps: Vec<Option<u64>> = mine.iter().map(|r| r.summary.convergence_step).collect();
            let tv: Vec<f64> = mine.iter().map(|r| r.summary.total_variation).collect();
            AblationSummary {
                row,
                runs: mine.len(),
                converged: steps.iter().flatten().count(),
                median_convergence: censored_median(&steps),
                median_total_variation: quantile(&tv, 0.5).unwrap_or(f64::NAN),
            }
        })
        .collect();
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        let mut w = csv::Writer::from_path(o.join("ablation.csv"))?;
        w.write_record(["row", "seed", "convergence_step", "total_variation", "final_val_l1", "steps_run"])?;
        for r in &runs {
            w.write_record(&[
                r.row.label().to_string(),
                r.seed.to_string(),
                r.summary.convergence_step.map(|k| k.to_string()).unwrap_or_default(),
                r.summary.total_variation.to_string(),
                r.summary.final_val_l1.map(|v| v.to_string()).unwrap_or_default(),
                r.summary.steps_run.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(o.join("ablation_summary.csv"))?;
        w.write_record(["row", "runs", "converged", "median_convergence_step", "median_total_variation"])?;
        for s in &summaries {
            w.write_record(&[
                s.row.label().to_string(),
                s.runs.to_string(),
                s.converged.to_string(),
                s.median_convergence.map(|v| v.to_string()).unwrap_or_default(),
                s.median_total_variation.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok((runs, summaries))
}
