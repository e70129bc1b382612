//! Training loop over a [`Problem`].

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::problem::{LossGrad, LossKind, Problem};
use super::state::{norm, sgd_step, Adam, AdamHyper, ScraplState, UpdateNorms};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub p_adam: bool,
    pub p_saga: bool,
    /// Path distribution; uniform when absent.
    pub pi: Option<Vec<f64>>,
    /// Optimizer for the non-path losses.
    pub base: BaseOptimizer,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear decay to this rate at the last step, if set.
    pub lr_end: Option<f64>,
    pub hyper: AdamHyper,
    pub weight_decay: f64,
    pub seed: u64,
    /// Call the observer every this many steps (0 disables it).
    pub eval_every: u64,
    /// Render predictions with a fresh decoder seed every step instead of
    /// the example's own seed.
    pub random_decoder_seed: bool,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Scrapl,
            p_adam: true,
            p_saga: true,
            pi: None,
            base: BaseOptimizer::Adam,
            steps: 1000,
            batch_size: 1,
            lr: 1e-4,
            lr_end: None,
            hyper: AdamHyper::default(),
            weight_decay: 0.01,
            seed: 0,
            eval_every: 0,
            random_decoder_seed: true,
            divergence_factor: 1e6,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Invalid("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_end.is_some_and(|l| !(l >= 0.0)) {
            return Err(CoreError::Invalid("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CoreError::Invalid("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, k: u64) -> f64 {
        match self.lr_end {
            Some(end) if self.steps > 1 => {
                let f = (k - 1) as f64 / (self.steps - 1) as f64;
                self.lr + (end - self.lr) * f
            }
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub k: u64,
    /// First example of the batch.
    pub n: usize,
    pub p: Option<usize>,
    pub loss: f64,
    pub g_norm: f64,
    pub g_current_norm: f64,
    pub g_saga_norm: f64,
    pub skipped: bool,
    pub wall_ms: f64,
}

impl StepReport {
    pub const HEADER: [&'static str; 9] =
        ["k", "n", "p", "loss", "g_norm", "g_current_norm", "g_saga_norm", "skipped", "wall_ms"];

    fn record(&self, wall: bool) -> Vec<String> {
        let mut r = vec![
            self.k.to_string(),
            self.n.to_string(),
            self.p.map(|p| p.to_string()).unwrap_or_default(),
            format!("{:e}", self.loss),
            format!("{:e}", self.g_norm),
            format!("{:e}", self.g_current_norm),
            format!("{:e}", self.g_saga_norm),
            (self.skipped as u8).to_string(),
        ];
        if wall {
            r.push(format!("{:.3}", self.wall_ms));
        }
        r
    }
}

/// Writes the step log as CSV; `wall` keeps the timing column.
pub fn write_step_log<W: Write>(out: W, log: &[StepReport], wall: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header = if wall { &StepReport::HEADER[..] } else { &StepReport::HEADER[..8] };
    w.write_record(header)?;
    for r in log {
        w.write_record(r.record(wall))?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub weights: Vec<f64>,
    pub log: Vec<StepReport>,
    pub skipped: u64,
    /// Set when the observer asked to stop.
    pub stopped_at: Option<u64>,
    pub state: Option<ScraplState>,
}

/// Observer called every `eval_every` steps with `(k, w)`; returning
/// `false` ends training.
pub type Observer<'a> = dyn FnMut(u64, &[f64]) -> Result<bool> + 'a;

/// Decoder seed for example `n` at step `k`.
pub fn decoder_seed(master: u64, k: u64, n: usize) -> u64 {
    let mut z = master ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (n as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_finite(k: u64, n: usize, p: usize, lg: &LossGrad) -> Result<()> {
    if lg.0.is_finite() && lg.1.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFiniteGradient { k, n, p })
    }
}

enum Stepper {
    Scrapl(Box<ScraplState>),
    Adam(Adam),
    Sgd,
}

/// Runs `cfg.steps` updates from `w0` on the examples `train_ids`.
pub fn train(problem: &Problem, train_ids: &[usize], cfg: &TrainConfig, w0: Vec<f64>, observer: &mut Observer) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() && cfg.steps > 0 {
        return Err(CoreError::Invalid("empty training set".into()));
    }
    let dim = problem.encoder.num_weights();
    if w0.len() != dim {
        return Err(CoreError::Manifest { expected: dim, got: w0.len() });
    }
    let paths = problem.num_paths();
    let mut stepper = match cfg.loss {
        LossKind::Scrapl => {
            let mut s = ScraplState::new(paths, dim, cfg.hyper, cfg.p_adam, cfg.p_saga)?;
            if let Some(pi) = &cfg.pi {
                s.set_pi(pi)?;
            }
            Stepper::Scrapl(Box::new(s))
        }
        _ => match cfg.base {
            BaseOptimizer::Adam => Stepper::Adam(Adam::new(dim, cfg.hyper, false)),
            BaseOptimizer::Sgd => Stepper::Sgd,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut w = w0;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut skipped = 0;
    let mut initial: Option<f64> = None;
    let mut over = 0;
    let mut stopped_at = None;

    for k in 1..=cfg.steps {
        let start = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = train_ids.to_vec();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let p = match &stepper {
            Stepper::Scrapl(s) => s.sample_path(&mut rng),
            _ => 0,
        };
        let results: Vec<Result<LossGrad>> = batch
            .par_iter()
            .map(|&n| {
                let seed = if cfg.random_decoder_seed {
                    decoder_seed(cfg.seed, k, n)
                } else {
                    problem.example(n).seed
                };
                let lg = problem.gradient(cfg.loss, n, &w, p, seed)?;
                check_finite(k, n, p, &lg)?;
                Ok(lg)
            })
            .collect();
        let mut loss = 0.0;
        let mut g = vec![0.0; dim];
        let mut bad = false;
        for r in results {
            match r {
                Ok((l, gi)) => {
                    loss += l;
                    for (a, b) in g.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
                Err(CoreError::NonFiniteGradient { .. }) => bad = true,
                Err(e) => return Err(e),
            }
        }
        let b = batch.len() as f64;
        loss /= b;
        g.iter_mut().for_each(|v| *v /= b);
        let p_logged = matches!(stepper, Stepper::Scrapl(_)).then_some(p);
        if bad {
            skipped += 1;
            if let Stepper::Scrapl(s) = &mut stepper {
                s.begin_step();
            }
            log.push(StepReport {
                k,
                n: batch[0],
                p: p_logged,
                loss: f64::NAN,
                g_norm: f64::NAN,
                g_current_norm: f64::NAN,
                g_saga_norm: f64::NAN,
                skipped: true,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            continue;
        }

        let lr = cfg.lr_at(k);
        if cfg.weight_decay > 0.0 {
            let f = 1.0 - lr * cfg.weight_decay;
            w.iter_mut().for_each(|v| *v *= f);
        }
        let norms = match &mut stepper {
            Stepper::Scrapl(s) => {
                s.begin_step();
                s.apply(p, &g, &mut w, lr)
            }
            Stepper::Adam(a) => {
                let d = a.direction(&g);
                let n = norm(&d);
                sgd_step(&mut w, &d, lr);
                UpdateNorms { g: norm(&g), g_current: n, g_saga: n }
            }
            Stepper::Sgd => {
                sgd_step(&mut w, &g, lr);
                let n = norm(&g);
                UpdateNorms { g: n, g_current: n, g_saga: n }
            }
        };
        log.push(StepReport {
            k,
            n: batch[0],
            p: p_logged,
            loss,
            g_norm: norms.g,
            g_current_norm: norms.g_current,
            g_saga_norm: norms.g_saga,
            skipped: false,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        let init = *initial.get_or_insert(loss);
        if loss > cfg.divergence_factor * init {
            over += 1;
            if over >= cfg.divergence_patience {
                return Err(CoreError::Diverged { k, loss, initial: init });
            }
        } else {
            over = 0;
        }
        if cfg.eval_every > 0 && k % cfg.eval_every == 0 && !observer(k, &w)? {
            stopped_at = Some(k);
            break;
        }
    }
    let state = match stepper {
        Stepper::Scrapl(s) => Some(*s),
        _ => None,
    };
    Ok(TrainOutcome { weights: w, log, skipped, stopped_at, state })
}
