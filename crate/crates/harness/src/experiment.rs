//! One training run: optional θ-importance sampling, then training with
//! periodic validation.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scrapl_core::encoder::Encoder;
use scrapl_core::optimizer::{train, write_step_log, LossKind, Problem, StepReport};
use scrapl_core::scattering::Scattering;
use scrapl_core::theta_is::{
    build_importance, build_pi, default_floor, read_pi_csv, write_heatmap_csv, write_importance_csv, write_pi_csv,
    ImportanceMatrix, PathDistribution,
};

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::metrics::{convergence_step, total_variation, write_metrics_csv, MetricsRow};

pub const CHECKPOINT: &str = "weights.scrpl";

pub fn build_problem(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Problem> {
    let setup = cfg.setup()?;
    let scattering = Scattering::new(&setup.spec)?;
    let encoder = Encoder::new(setup.encoder)?;
    Ok(Problem::new(setup.synth, scattering, encoder, ds.examples.clone())?)
}

/// θ-IS on the first `n_is` training examples at weights `w`.
pub fn importance(
    cfg: &ExperimentConfig,
    problem: &Problem,
    ds: &Dataset,
    w: &[f64],
    seed: u64,
) -> Result<(ImportanceMatrix, PathDistribution)> {
    let mut ids = ds.ids(Split::Train);
    ids.truncate(cfg.theta_is.n_is);
    if ids.is_empty() {
        return Err(HarnessError::Config("θ-IS needs training examples".into()));
    }
    let ticfg = scrapl_core::theta_is::ThetaIsConfig { seed, ..cfg.theta_is.clone() };
    let m = build_importance(problem, &ids, w, &ticfg)?;
    let floor = cfg.theta_is.floor.unwrap_or_else(|| default_floor(problem.num_paths()));
    let pi = build_pi(&m, floor)?;
    Ok((m, pi))
}

pub fn write_importance(out: &Path, problem: &Problem, m: &ImportanceMatrix, pi: &PathDistribution) -> Result<()> {
    fs::create_dir_all(out)?;
    write_importance_csv(BufWriter::new(fs::File::create(out.join("importance.csv"))?), m)?;
    write_pi_csv(BufWriter::new(fs::File::create(out.join("pi.csv"))?), pi, &m.meta)?;
    write_heatmap_csv(BufWriter::new(fs::File::create(out.join("pi_heatmap.csv"))?), &problem.scattering.table, &pi.pi)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub loss: LossKind,
    pub p_adam: bool,
    pub p_saga: bool,
    pub theta_is: bool,
    pub steps_run: u64,
    pub eval_every: u64,
    /// First validation step with mean θ L1 below the threshold.
    pub convergence_step: Option<u64>,
    /// Of the mean validation θ L1 curve.
    pub total_variation: f64,
    pub final_val_l1: Option<f64>,
    pub test_l1: Vec<f64>,
    pub skipped: u64,
}

pub struct RunResult {
    pub summary: RunSummary,
    /// Validation rows followed by one test row.
    pub metrics: Vec<MetricsRow>,
    pub weights: Vec<f64>,
    pub log: Vec<StepReport>,
    pub importance: Option<(ImportanceMatrix, PathDistribution)>,
}

fn mean_loss(log: &[StepReport], from: u64, to: u64) -> Option<f64> {
    let v: Vec<f64> = log.iter().filter(|r| r.k > from && r.k <= to && !r.skipped).map(|r| r.loss).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains one encoder from the initialization for `seed` and writes the
/// run's files to `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, out: Option<&Path>) -> Result<RunResult> {
    let problem = build_problem(cfg, ds)?;
    run_on(cfg, &problem, ds, seed, out)
}

/// As [`run_experiment`] with a prebuilt problem, whose target cache is
/// then shared between runs.
pub fn run_on(cfg: &ExperimentConfig, problem: &Problem, ds: &Dataset, seed: u64, out: Option<&Path>) -> Result<RunResult> {
    let train_ids = ds.ids(Split::Train);
    let val_ids = ds.ids(Split::Val);
    let test_ids = ds.ids(Split::Test);
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(HarnessError::Config("runs need training and validation examples".into()));
    }
    let w0 = problem.encoder.init_weights(seed);
    let uses_paths = cfg.train.loss == LossKind::Scrapl;
    let importance = if uses_paths && cfg.train.theta_is {
        let (m, pi) = importance(cfg, problem, ds, &w0, seed)?;
        if let Some(dir) = out {
            write_importance(dir, problem, &m, &pi)?;
        }
        Some((m, pi))
    } else {
        None
    };
    let pi = match (&importance, &cfg.train.pi_file) {
        (Some((_, d)), _) => Some(d.pi.clone()),
        (None, Some(f)) if uses_paths => Some(read_pi_csv(fs::File::open(f)?)?),
        _ => None,
    };
    let tcfg = cfg.train_config(seed, pi);
    let threshold = cfg.train.convergence_threshold;
    let stop = cfg.train.stop_at_convergence;
    let mut curve: Vec<(u64, Vec<f64>)> = Vec::new();
    let outcome = train(problem, &train_ids, &tcfg, w0, &mut |k, w| {
        let l1 = problem.theta_l1(w, &val_ids)?;
        let mean = l1.iter().sum::<f64>() / l1.len() as f64;
        curve.push((k, l1));
        Ok(!(stop && mean < threshold))
    })?;
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut prev = 0;
    for (k, l1) in curve {
        metrics.push(MetricsRow::new(k, Split::Val, l1, mean_loss(&outcome.log, prev, k)));
        prev = k;
    }
    let means: Vec<(u64, f64)> = metrics.iter().map(|r| (r.step, r.mean_l1)).collect();
    let steps_run = outcome.log.last().map_or(0, |r| r.k);
    let test_l1 = if test_ids.is_empty() { Vec::new() } else { problem.theta_l1(&outcome.weights, &test_ids)? };
    if !test_l1.is_empty() {
        metrics.push(MetricsRow::new(steps_run, Split::Test, test_l1.clone(), None));
    }
    let summary = RunSummary {
        seed,
        loss: tcfg.loss,
        p_adam: tcfg.p_adam,
        p_saga: tcfg.p_saga,
        theta_is: importance.is_some(),
        steps_run,
        eval_every: tcfg.eval_every,
        convergence_step: convergence_step(&means, threshold),
        total_variation: total_variation(&means.iter().map(|m| m.1).collect::<Vec<_>>()),
        final_val_l1: means.last().map(|m| m.1),
        test_l1,
        skipped: outcome.skipped,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), &ds.info.params, &metrics)?;
        write_step_log(BufWriter::new(fs::File::create(dir.join("steps.csv"))?), &outcome.log, false)?;
        let mut t = csv::Writer::from_path(dir.join("timing.csv"))?;
        t.write_record(["k", "wall_ms"])?;
        for r in &outcome.log {
            t.write_record(&[r.k.to_string(), format!("{:.3}", r.wall_ms)])?;
        }
        t.flush()?;
        problem.encoder.save(&dir.join(CHECKPOINT), &outcome.weights)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    Ok(RunResult { summary, metrics, weights: outcome.weights, log: outcome.log, importance })
}
