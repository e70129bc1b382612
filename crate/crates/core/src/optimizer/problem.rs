//! A sound-matching problem: examples, the encoder that reads them, the
//! synth that renders predictions and the scattering that compares them.

use std::sync::{Arc, OnceLock};

use scrapl_autodiff::{Tape, Tensor, Var};

use crate::encoder::Encoder;
use crate::error::{CoreError, Result};
use crate::scattering::{mss_loss, Scattering};
use crate::synths::Synth;

/// One dataset item: normalized parameters, the decoder seed it was
/// rendered with, and the audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub audio: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Scrapl,
    FullJtfs,
    Mss,
    PLoss,
}

pub struct Problem {
    pub synth: Arc<dyn Synth>,
    pub scattering: Scattering,
    pub encoder: Encoder,
    examples: Vec<Example>,
    features: Vec<Tensor>,
    /// `targets[n][p]`, filled on first use.
    targets: Vec<Vec<OnceLock<Tensor>>>,
}

/// Value and gradient of a scalar loss with respect to the weights.
pub type LossGrad = (f64, Vec<f64>);

impl Problem {
    pub fn new(synth: Arc<dyn Synth>, scattering: Scattering, encoder: Encoder, examples: Vec<Example>) -> Result<Self> {
        let t = synth.num_samples();
        if scattering.spec().n != t || encoder.cfg.num_samples != t {
            return Err(CoreError::Invalid(format!(
                "synth renders {t} samples but scattering expects {} and encoder {}",
                scattering.spec().n,
                encoder.cfg.num_samples
            )));
        }
        if encoder.cfg.outputs != synth.num_params() {
            return Err(CoreError::Invalid("encoder outputs must match synth parameters".into()));
        }
        let mut features = Vec::with_capacity(examples.len());
        for e in &examples {
            if e.theta.len() != synth.num_params() {
                return Err(CoreError::Invalid(format!("example {} has {} parameters", e.id, e.theta.len())));
            }
            features.push(encoder.features(&e.audio)?);
        }
        let p = scattering.num_paths();
        let targets = examples.iter().map(|_| (0..p).map(|_| OnceLock::new()).collect()).collect();
        Ok(Self { synth, scattering, encoder, examples, features, targets })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_paths(&self) -> usize {
        self.scattering.num_paths()
    }

    pub fn example(&self, n: usize) -> &Example {
        &self.examples[n]
    }

    pub fn features(&self, n: usize) -> &Tensor {
        &self.features[n]
    }

    /// `φ_p(x_n)`, computed once.
    pub fn target(&self, n: usize, p: usize) -> Result<&Tensor> {
        if let Some(t) = self.targets[n][p].get() {
            return Ok(t);
        }
        let t = self.scattering.phi(&self.examples[n].audio, p)?;
        Ok(self.targets[n][p].get_or_init(|| t))
    }

    fn all_targets(&self, n: usize) -> Result<Vec<Tensor>> {
        if self.targets[n].iter().any(|t| t.get().is_none()) {
            let all = self.scattering.phi_all(&self.examples[n].audio)?;
            for (slot, t) in self.targets[n].iter().zip(all) {
                let _ = slot.set(t);
            }
        }
        Ok(self.targets[n].iter().map(|t| t.get().expect("filled").clone()).collect())
    }

    /// `θ̃ = E_{x_n}(w)`.
    pub fn predict(&self, n: usize, w: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(&self.features[n], w)
    }

    /// Records `x̃ = D(E_{x_n}(w))` with decoder seed `seed`, returning
    /// `(θ̃, x̃)` nodes.
    fn reconstruct(&self, tape: &mut Tape, n: usize, w: Var, seed: u64) -> Result<(Var, Var)> {
        let f = tape.constant(self.features[n].clone())?;
        let theta = self.encoder.encode(tape, f, w)?;
        let x = self.synth.decode(tape, theta, seed)?;
        Ok((theta, x))
    }

    fn run<F>(&self, w: &[f64], build: F) -> Result<LossGrad>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.to_vec()))?;
        let l = build(&mut tape, wv)?;
        let value = tape.scalar(l).ok_or_else(|| CoreError::Invalid("loss is not a scalar".into()))?;
        let g = tape.backward(l)?.take(wv).expect("weight gradient");
        Ok((value, g.into_real().expect("real gradient")))
    }

    /// `∇_w P‖φ_p(x_n) − φ_p(D(E_{x_n}(w)))‖²`; only path `p` is evaluated.
    pub fn scrapl_gradient(&self, n: usize, w: &[f64], p: usize, seed: u64) -> Result<LossGrad> {
        let target = self.target(n, p)?.clone();
        self.run(w, |tape, wv| {
            let (_, x) = self.reconstruct(tape, n, wv, seed)?;
            self.scattering.path_loss_to_target(tape, &target, x, p)
        })
    }

    /// `L^{φ_p}(x_n, D(θ))` and its gradient with respect to `θ`.
    pub fn theta_gradient(&self, n: usize, theta: &[f64], p: usize, seed: u64) -> Result<LossGrad> {
        let target = self.target(n, p)?.clone();
        self.run(theta, |tape, th| {
            let x = self.synth.decode(tape, th, seed)?;
            self.scattering.path_loss_to_target(tape, &target, x, p)
        })
    }

    /// Gradient of the full scattering distance.
    pub fn full_gradient(&self, n: usize, w: &[f64], seed: u64) -> Result<LossGrad> {
        let targets = self.all_targets(n)?;
        self.run(w, |tape, wv| {
            let (_, x) = self.reconstruct(tape, n, wv, seed)?;
            self.scattering.full_loss_to_targets(tape, &targets, x)
        })
    }

    pub fn mss_gradient(&self, n: usize, w: &[f64], seed: u64) -> Result<LossGrad> {
        self.run(w, |tape, wv| {
            let (_, x) = self.reconstruct(tape, n, wv, seed)?;
            let target = tape.constant(Tensor::vector(self.examples[n].audio.clone()))?;
            mss_loss(tape, target, x)
        })
    }

    /// Supervised `‖θ̃ − θ_n‖²`.
    pub fn ploss_gradient(&self, n: usize, w: &[f64]) -> Result<LossGrad> {
        self.run(w, |tape, wv| {
            let f = tape.constant(self.features[n].clone())?;
            let theta = self.encoder.encode(tape, f, wv)?;
            let u = self.examples[n].theta.len();
            let t = tape.constant(Tensor::real(&[1, u], self.examples[n].theta.clone())?)?;
            let d = tape.sub(theta, t)?;
            Ok(tape.sum_squares(d)?)
        })
    }

    pub fn gradient(&self, loss: LossKind, n: usize, w: &[f64], p: usize, seed: u64) -> Result<LossGrad> {
        match loss {
            LossKind::Scrapl => self.scrapl_gradient(n, w, p, seed),
            LossKind::FullJtfs => self.full_gradient(n, w, seed),
            LossKind::Mss => self.mss_gradient(n, w, seed),
            LossKind::PLoss => self.ploss_gradient(n, w),
        }
    }

    /// Mean absolute error of `θ̃` on `ids`, per parameter, in ‰ of the
    /// normalized range.
    pub fn theta_l1(&self, w: &[f64], ids: &[usize]) -> Result<Vec<f64>> {
        let u = self.synth.num_params();
        let mut acc = vec![0.0; u];
        for &n in ids {
            for (a, (p, t)) in acc.iter_mut().zip(self.predict(n, w)?.iter().zip(&self.examples[n].theta)) {
                *a += (p - t).abs();
            }
        }
        let count = ids.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| 1000.0 * a / count).collect())
    }
}
