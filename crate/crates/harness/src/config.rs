//! Experiment configuration. Files are TOML; a top-level `include` array
//! names files (relative to the including one) whose tables are merged
//! underneath it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use scrapl_core::encoder::EncoderConfig;
use scrapl_core::optimizer::{AdamHyper, BaseOptimizer, LossKind, TrainConfig};
use scrapl_core::scattering::{FilterbankSpec, Rho};
use scrapl_core::synths::{ChirpletConfig, ChirpletSynth, GranularConfig, GranularSynth, Synth};
use scrapl_core::theta_is::ThetaIsConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Chirplet,
    Granular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 512, split: [0.6, 0.2, 0.2] }
    }
}

/// Overrides of the scale's synth defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOverrides {
    pub sample_rate: Option<f64>,
    pub num_samples: Option<usize>,
    pub shift_range: Option<i64>,
    pub grain_len: Option<usize>,
    pub max_grains: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderOverrides {
    pub n_filters: Option<usize>,
    pub fmin_hz: Option<f64>,
    pub fmax_hz: Option<f64>,
    pub frame_size: Option<usize>,
    pub hop: Option<usize>,
    pub hidden: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: LossKind,
    pub p_adam: bool,
    pub p_saga: bool,
    /// Compute the path distribution by θ-importance sampling first.
    pub theta_is: bool,
    /// Path distribution written by `theta-is`; used when `theta_is` is off.
    pub pi_file: Option<PathBuf>,
    pub base: BaseOptimizer,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub random_decoder_seed: bool,
    /// End the run at the first validation θ L1 below the threshold.
    pub stop_at_convergence: bool,
    /// Convergence threshold on mean validation θ L1, in ‰.
    pub convergence_threshold: f64,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            loss: LossKind::Scrapl,
            p_adam: true,
            p_saga: true,
            theta_is: false,
            pi_file: None,
            base: BaseOptimizer::Adam,
            steps: 3000,
            batch_size: 4,
            lr: 1e-3,
            lr_end: None,
            beta1: t.hyper.beta1,
            beta2: t.hyper.beta2,
            eps: t.hyper.eps,
            weight_decay: t.weight_decay,
            eval_every: 50,
            random_decoder_seed: true,
            stop_at_convergence: false,
            convergence_threshold: 100.0,
            divergence_factor: t.divergence_factor,
            divergence_patience: t.divergence_patience,
        }
    }
}

/// One row of the ablation table; each adds to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Scrapl,
    PAdam,
    PSaga,
    ThetaIs,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [Self::Scrapl, Self::PAdam, Self::PSaga, Self::ThetaIs];

    pub fn label(self) -> &'static str {
        match self {
            Self::Scrapl => "scrapl",
            Self::PAdam => "+p-adam",
            Self::PSaga => "+p-saga",
            Self::ThetaIs => "+theta-is",
        }
    }

    /// `(p_adam, p_saga, theta_is)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::Scrapl => (false, false, false),
            Self::PAdam => (true, false, false),
            Self::PSaga => (true, true, false),
            Self::ThetaIs => (true, true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Number of seeds; run `s` uses master seed `seed + s`.
    pub seeds: u64,
    pub rows: Vec<AblationRow>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 5, rows: AblationRow::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub losses: Vec<LossKind>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            warmup: 2,
            batch_size: 1,
            losses: vec![LossKind::Scrapl, LossKind::FullJtfs, LossKind::Mss, LossKind::PLoss],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub scale: Scale,
    /// Chirplet parameter ranges, 1 to 4.
    pub chirplet_config: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthOverrides,
    /// Replaces the scale's default filterbank when present.
    pub scattering: Option<FilterbankSpec>,
    pub encoder: EncoderOverrides,
    pub train: TrainSection,
    pub theta_is: ThetaIsConfig,
    pub ablation: AblationConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Chirplet,
            scale: Scale::Desk,
            chirplet_config: 1,
            seed: 0,
            data: DataConfig::default(),
            synth: SynthOverrides::default(),
            scattering: None,
            encoder: EncoderOverrides::default(),
            train: TrainSection::default(),
            theta_is: ThetaIsConfig { n_is: 8, ..ThetaIsConfig::default() },
            ablation: AblationConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Synth, filterbank and encoder built from a config.
pub struct Setup {
    pub synth: Arc<dyn Synth>,
    pub spec: FilterbankSpec,
    pub encoder: EncoderConfig,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > 16 {
        return Err(HarnessError::Config(format!("include depth exceeded at {}", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse()?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(HarnessError::Config("include entries must be strings".into())),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(HarnessError::Config("include must be a string or array".into())),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let table = load_table(path, 0)?;
        let cfg: Self = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let s = self.data.split;
        if s.iter().any(|f| !(*f >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {s:?} must be nonnegative and sum to 1"));
        }
        if self.data.n == 0 {
            return bad("dataset needs at least one example".into());
        }
        if !(1..=4).contains(&self.chirplet_config) {
            return bad(format!("chirplet_config {} not in 1..=4", self.chirplet_config));
        }
        if self.train.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.ablation.seeds == 0 || self.ablation.rows.is_empty() {
            return bad("ablation needs at least one seed and one row".into());
        }
        if self.benchmark.steps == 0 || self.benchmark.batch_size == 0 {
            return bad("benchmark needs positive steps and batch size".into());
        }
        if self.theta_is.n_is == 0 {
            return bad("theta_is.n_is must be positive".into());
        }
        self.train_config(self.seed, None).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.setup().map_err(|e| match e {
            HarnessError::Core(c) => HarnessError::Config(c.to_string()),
            e => e,
        })?;
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        let o = &self.synth;
        let synth: Arc<dyn Synth> = match self.task {
            Task::Chirplet => {
                let mut c = match self.scale {
                    Scale::Desk => ChirpletConfig::desk(self.chirplet_config)?,
                    Scale::Full => ChirpletConfig::full(self.chirplet_config)?,
                };
                c.sample_rate = o.sample_rate.unwrap_or(c.sample_rate);
                c.num_samples = o.num_samples.unwrap_or(c.num_samples);
                c.shift_range = o.shift_range.unwrap_or(c.shift_range);
                Arc::new(ChirpletSynth::new(c)?)
            }
            Task::Granular => {
                let mut c = match self.scale {
                    Scale::Desk => GranularConfig::desk(),
                    Scale::Full => GranularConfig::full(),
                };
                c.sample_rate = o.sample_rate.unwrap_or(c.sample_rate);
                c.num_samples = o.num_samples.unwrap_or(c.num_samples);
                c.grain_len = o.grain_len.unwrap_or(c.grain_len);
                c.max_grains = o.max_grains.unwrap_or(c.max_grains);
                Arc::new(GranularSynth::new(c)?)
            }
        };
        let sr = synth.sample_rate();
        let n = synth.num_samples();
        let spec = match &self.scattering {
            Some(s) => s.clone(),
            None => default_spec(self.scale, sr, n),
        };
        spec.validate()?;
        if spec.n != n {
            return Err(HarnessError::Config(format!("filterbank length {} differs from synth length {n}", spec.n)));
        }
        let mut enc = EncoderConfig::desk(sr, n, synth.num_params());
        let e = &self.encoder;
        enc.n_filters = e.n_filters.unwrap_or(enc.n_filters);
        enc.fmin_hz = e.fmin_hz.unwrap_or(enc.fmin_hz);
        enc.fmax_hz = e.fmax_hz.unwrap_or(enc.fmax_hz);
        enc.frame_size = e.frame_size.unwrap_or(enc.frame_size);
        enc.hop = e.hop.unwrap_or(enc.hop);
        enc.hidden = e.hidden.clone().unwrap_or(enc.hidden);
        enc.validate()?;
        Ok(Setup { synth, spec, encoder: enc })
    }

    /// Optimizer settings for one run.
    pub fn train_config(&self, seed: u64, pi: Option<Vec<f64>>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: t.loss,
            p_adam: t.p_adam,
            p_saga: t.p_saga,
            pi,
            base: t.base,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_end: t.lr_end,
            hyper: AdamHyper { beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            weight_decay: t.weight_decay,
            seed,
            eval_every: t.eval_every,
            random_decoder_seed: t.random_decoder_seed,
            divergence_factor: t.divergence_factor,
            divergence_patience: t.divergence_patience,
        }
    }

    /// Copy with the flags of one ablation row.
    pub fn with_row(&self, row: AblationRow) -> Self {
        let mut c = self.clone();
        let (a, s, i) = row.flags();
        c.train.loss = LossKind::Scrapl;
        c.train.p_adam = a;
        c.train.p_saga = s;
        c.train.theta_is = i;
        c.train.pi_file = None;
        c
    }
}

/// Default filterbank for a scale: J = 12 and T = 4096 at full scale,
/// one octave less of averaging at desk scale.
pub fn default_spec(scale: Scale, sample_rate: f64, n: usize) -> FilterbankSpec {
    let (j, t_avg) = match scale {
        Scale::Full => (12, 4096),
        Scale::Desk => (11, 2048),
    };
    let j = j.min(n.trailing_zeros() as usize - 1);
    FilterbankSpec { j, q1: 8, q2: 2, j_fr: 3, q_fr: 2, t_avg: t_avg.min(n / 2), f_avg: 8, n, rho: Rho::Identity, sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let s = c.setup().unwrap();
        assert_eq!(s.spec.n, 8192);
        assert_eq!(s.synth.num_params(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("tasks = 'chirplet'"), Err(HarnessError::Toml(_))));
        assert!(ExperimentConfig::from_toml("[train]\nlr = 0.01").is_ok());
    }

    #[test]
    fn split_must_partition() {
        let e = ExperimentConfig::from_toml("[data]\nsplit = [0.5, 0.2, 0.2]").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.theta_is = true;
        c.ablation.rows = vec![AblationRow::Scrapl, AblationRow::ThetaIs];
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rows_are_cumulative() {
        let flags: Vec<_> = AblationRow::ALL.iter().map(|r| r.flags()).collect();
        assert_eq!(flags, vec![(false, false, false), (true, false, false), (true, true, false), (true, true, true)]);
    }
}
