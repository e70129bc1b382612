//! Synthetic datasets: a manifest CSV, raw audio and a description file.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scrapl_core::optimizer::Example;
use scrapl_core::synths::Synth;

use crate::config::{ExperimentConfig, Scale, Task};
use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const AUDIO: &str = "audio.f64";
pub const INFO: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub task: Task,
    pub scale: Scale,
    pub chirplet_config: usize,
    pub seed: u64,
    pub n: usize,
    pub num_samples: usize,
    pub sample_rate: f64,
    pub params: Vec<String>,
}

pub struct Dataset {
    pub info: DatasetInfo,
    pub examples: Vec<Example>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Split sizes: train and validation rounded, test takes the rest.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Draws normalized parameters uniformly (log-uniform for log ranges),
/// one decoder seed per example, and a random split assignment.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let setup = cfg.setup()?;
    let synth = setup.synth;
    let n = cfg.data.n;
    let u = synth.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<f64>, u64)> =
        (0..n).map(|_| ((0..u).map(|_| rng.random::<f64>()).collect(), rng.random::<u64>())).collect();
    let [train, val, _] = split_counts(n, cfg.data.split);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let examples = draws
        .into_par_iter()
        .enumerate()
        .map(|(id, (theta, s))| {
            let audio = synth.render(&theta, s)?;
            Ok(Example { id, theta, seed: s, audio })
        })
        .collect::<std::result::Result<Vec<_>, scrapl_core::CoreError>>()?;
    let info = DatasetInfo {
        task: cfg.task,
        scale: cfg.scale,
        chirplet_config: cfg.chirplet_config,
        seed,
        n,
        num_samples: synth.num_samples(),
        sample_rate: synth.sample_rate(),
        params: synth.ranges().iter().map(|r| r.name.clone()).collect(),
    };
    Ok(Dataset { info, examples, splits })
}

fn manifest_header(params: &[String]) -> Vec<String> {
    let mut h = vec!["id".to_string(), "split".into(), "seed".into()];
    h.extend(params.iter().map(|p| format!("theta_{p}")));
    h
}

/// Writes `manifest.csv` (normalized θ), `audio.f64` (little-endian
/// samples, example-major) and `dataset.json`.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    w.write_record(manifest_header(&ds.info.params))?;
    for (e, s) in ds.examples.iter().zip(&ds.splits) {
        let mut r = vec![e.id.to_string(), s.to_string(), e.seed.to_string()];
        r.extend(e.theta.iter().map(|t| t.to_string()));
        w.write_record(&r)?;
    }
    w.flush()?;
    let mut a = BufWriter::new(fs::File::create(dir.join(AUDIO))?);
    for e in &ds.examples {
        for x in &e.audio {
            a.write_all(&x.to_le_bytes())?;
        }
    }
    a.flush()?;
    fs::write(dir.join(INFO), serde_json::to_string_pretty(&ds.info)?)?;
    Ok(())
}

/// Reads a dataset and checks it against `cfg`.
pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let info: DatasetInfo = serde_json::from_str(&fs::read_to_string(dir.join(INFO))?)?;
    let setup = cfg.setup()?;
    let synth = &setup.synth;
    if info.task != cfg.task
        || info.num_samples != synth.num_samples()
        || info.params.len() != synth.num_params()
        || (info.task == Task::Chirplet && info.chirplet_config != cfg.chirplet_config)
    {
        return Err(HarnessError::Manifest(format!(
            "dataset in {} was generated for a different task or length",
            dir.display()
        )));
    }
    let mut r = csv::Reader::from_path(dir.join(MANIFEST))?;
    if r.headers()?.iter().collect::<Vec<_>>() != manifest_header(&info.params) {
        return Err(HarnessError::Manifest("unexpected manifest columns".into()));
    }
    let mut audio = BufReader::new(fs::File::open(dir.join(AUDIO))?);
    let mut buf = vec![0u8; 8 * info.num_samples];
    let mut examples = Vec::with_capacity(info.n);
    let mut splits = Vec::with_capacity(info.n);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || HarnessError::Manifest(format!("malformed manifest row {i}"));
        let id: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let split = rec.get(1).and_then(Split::parse).ok_or_else(bad)?;
        let seed: u64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let theta = (3..rec.len()).map(|k| rec[k].parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        if id != i || theta.len() != info.params.len() {
            return Err(bad());
        }
        audio.read_exact(&mut buf).map_err(|_| HarnessError::Manifest("audio file is shorter than the manifest".into()))?;
        let samples = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        examples.push(scrapl_core::optimizer::Example { id, theta, seed, audio: samples });
        splits.push(split);
    }
    if examples.len() != info.n {
        return Err(HarnessError::Manifest(format!("manifest has {} rows, expected {}", examples.len(), info.n)));
    }
    Ok(Dataset { info, examples, splits })
}

/// Physical parameter values of an example.
pub fn physical(synth: &dyn Synth, theta: &[f64]) -> Vec<f64> {
    synth.ranges().iter().zip(theta).map(|(r, &t)| r.to_physical(t)).collect()
}
