//! Wall time of one optimization step per loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use scrapl_core::optimizer::{Adam, AdamHyper, LossKind, Problem};
use scrapl_core::scattering::{filter_usage, reset_filter_usage};

use crate::config::BenchmarkConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::quantile;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub loss: LossKind,
    pub steps: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub num_paths: usize,
    pub batch_size: usize,
    pub rows: Vec<BenchRow>,
    /// Path-loss steps that applied second-order filters.
    pub second_order_steps: usize,
    /// Whether every path-loss step touched at most the sampled path's
    /// second-order filters, and exactly those when it had any.
    pub single_path_touch: bool,
    /// Peak resident set size of the process, in KiB.
    pub peak_rss_kib: Option<u64>,
}

impl BenchReport {
    pub fn median(&self, loss: LossKind) -> Option<f64> {
        self.rows.iter().find(|r| r.loss == loss).map(|r| r.median_ms)
    }
}

pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Times `cfg.steps` steps (gradient over a batch plus an Adam update) for
/// each loss on the current thread, after `cfg.warmup` untimed steps.
/// Targets of `ids` are computed beforehand.
pub fn benchmark(problem: &Problem, ids: &[usize], cfg: &BenchmarkConfig, seed: u64) -> Result<BenchReport> {
    if ids.is_empty() {
        return Err(HarnessError::Config("benchmark needs examples".into()));
    }
    let np = problem.num_paths();
    for &n in ids {
        for p in 0..np {
            problem.target(n, p)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = problem.encoder.init_weights(seed);
    let mut rows = Vec::new();
    let mut second_order_steps = 0;
    let mut single_path_touch = true;
    let mut cursor = 0usize;
    for &loss in &cfg.losses {
        let mut w = w0.clone();
        let mut adam = Adam::new(w.len(), AdamHyper::default(), false);
        let mut times = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.warmup + cfg.steps {
            let p = rng.random_range(0..np);
            let batch: Vec<usize> = (0..cfg.batch_size).map(|i| ids[(cursor + i) % ids.len()]).collect();
            cursor += cfg.batch_size;
            reset_filter_usage();
            let t = Instant::now();
            let mut g = vec![0.0; w.len()];
            for &n in &batch {
                let (_, gi) = problem.gradient(loss, n, &w, p, seed ^ step as u64)?;
                g.iter_mut().zip(gi).for_each(|(a, b)| *a += b / batch.len() as f64);
            }
            adam.step(&mut w, &g, 1e-4);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            if loss == LossKind::Scrapl {
                let usage = filter_usage();
                if !usage.is_empty() {
                    second_order_steps += 1;
                }
                single_path_touch &= usage.keys().all(|&k| k == p);
                let order2 = problem.scattering.table.entries[p].order == 2;
                single_path_touch &= order2 == usage.contains_key(&p);
            }
            if step >= cfg.warmup {
                times.push(ms);
            }
        }
        let q = |f| quantile(&times, f).unwrap_or(f64::NAN);
        rows.push(BenchRow { loss, steps: times.len(), median_ms: q(0.5), iqr_ms: q(0.75) - q(0.25) });
    }
    Ok(BenchReport { num_paths: np, batch_size: cfg.batch_size, rows, second_order_steps, single_path_touch, peak_rss_kib: peak_rss_kib() })
}

pub fn write_bench_csv<W: std::io::Write>(out: W, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["loss", "steps", "median_ms", "iqr_ms"])?;
    for r in &report.rows {
        let name = serde_json::to_value(r.loss)?.as_str().unwrap_or_default().to_string();
        w.write_record(&[name, r.steps.to_string(), format!("{:.4}", r.median_ms), format!("{:.4}", r.iqr_ms)])?;
    }
    w.flush()?;
    Ok(())
}
