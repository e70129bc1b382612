//! Parameter-error evaluation of a checkpoint.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use scrapl_core::encoder::Encoder;
use scrapl_core::optimizer::Example;
use scrapl_core::synths::write_wav;

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{HarnessError, Result};
use crate::metrics::{write_metrics_csv, MetricsRow};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub theta: Vec<f64>,
    pub theta_hat: Vec<f64>,
    /// `|θ̃ − θ|` per parameter, in ‰.
    pub l1: Vec<f64>,
}

/// Per-example errors of `predict` and their mean as a metrics row.
pub fn evaluate<F>(examples: &[&Example], step: u64, split: Split, predict: F) -> Result<(Vec<EvalRow>, MetricsRow)>
where
    F: Fn(&Example) -> Result<Vec<f64>> + Sync,
{
    let rows = examples
        .par_iter()
        .map(|e| {
            let theta_hat = predict(e)?;
            if theta_hat.len() != e.theta.len() {
                return Err(HarnessError::Manifest(format!("prediction for {} has {} parameters", e.id, theta_hat.len())));
            }
            let l1 = theta_hat.iter().zip(&e.theta).map(|(a, b)| 1000.0 * (a - b).abs()).collect();
            Ok(EvalRow { id: e.id, theta: e.theta.clone(), theta_hat, l1 })
        })
        .collect::<Result<Vec<_>>>()?;
    let u = examples.first().map_or(0, |e| e.theta.len());
    let mut mean = vec![0.0; u];
    for r in &rows {
        mean.iter_mut().zip(&r.l1).for_each(|(m, v)| *m += v);
    }
    let count = rows.len().max(1) as f64;
    let mean = mean.into_iter().map(|m| m / count).collect();
    Ok((rows, MetricsRow::new(step, split, mean, None)))
}

/// Loads a checkpoint written for `cfg`, evaluates it on `split`, and
/// writes `eval_<split>.csv`, `eval_<split>_summary.csv` and optionally
/// WAV renders of targets and reconstructions to `out`.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    checkpoint: &Path,
    split: Split,
    out: Option<&Path>,
    render: bool,
) -> Result<(Vec<EvalRow>, MetricsRow)> {
    let setup = cfg.setup()?;
    let (encoder, w) = Encoder::load(checkpoint)?;
    if encoder.cfg != setup.encoder {
        return Err(HarnessError::Manifest(format!("checkpoint {} was trained with another encoder", checkpoint.display())));
    }
    let ids = ds.ids(split);
    let examples: Vec<&Example> = ids.iter().map(|&i| &ds.examples[i]).collect();
    let (rows, summary) = evaluate(&examples, 0, split, |e| Ok(encoder.predict(&encoder.features(&e.audio)?, &w)?))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join(format!("eval_{split}.csv")))?;
        let mut header = vec!["id".to_string()];
        for prefix in ["theta", "theta_hat", "l1"] {
            header.extend(ds.info.params.iter().map(|p| format!("{prefix}_{p}")));
        }
        wtr.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.id.to_string()];
            rec.extend(r.theta.iter().chain(&r.theta_hat).chain(&r.l1).map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        let f = fs::File::create(dir.join(format!("eval_{split}_summary.csv")))?;
        write_metrics_csv(f, &ds.info.params, std::slice::from_ref(&summary))?;
        if render {
            let rdir = dir.join("renders");
            fs::create_dir_all(&rdir)?;
            for (r, e) in rows.iter().zip(&examples) {
                let pred = setup.synth.render(&r.theta_hat, e.seed)?;
                write_wav(&rdir.join(format!("{:05}_target.wav", e.id)), &e.audio, setup.synth.sample_rate())?;
                write_wav(&rdir.join(format!("{:05}_pred.wav", e.id)), &pred, setup.synth.sample_rate())?;
            }
        }
    }
    Ok((rows, summary))
}
