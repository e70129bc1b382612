//! Differentiable decoders from normalized parameters `θ̃ ∈ [0,1]^U` to
//! audio. Each render also returns the Jacobian `∂x̃/∂θ̃` (computed in
//! forward mode), so the audio can be placed on a tape as an affine function
//! of the parameters.

mod chirplet;
mod dual;
mod granular;

use std::path::Path;

use scrapl_autodiff::{Tape, Tensor, Var};

pub use chirplet::{ChirpletConfig, ChirpletSynth};
pub use dual::Dual;
pub use granular::{GranularConfig, GranularSynth};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamScale {
    Linear,
    Log,
}

/// Physical range of one synth parameter.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub scale: ParamScale,
}

impl ParamRange {
    pub fn linear(name: &str, min: f64, max: f64) -> Self {
        Self { name: name.into(), min, max, scale: ParamScale::Linear }
    }

    pub fn log(name: &str, min: f64, max: f64) -> Self {
        Self { name: name.into(), min, max, scale: ParamScale::Log }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min.is_finite()
            && self.max.is_finite()
            && self.min <= self.max
            && (self.scale == ParamScale::Linear || self.min > 0.0);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "bad range for {}: [{}, {}] {:?}",
                self.name, self.min, self.max, self.scale
            )))
        }
    }

    /// Physical value of normalized `u` (clamped to `[0,1]`).
    pub fn to_physical(&self, u: f64) -> f64 {
        self.to_physical_dual(Dual::<1>::constant(u)).v
    }

    pub fn to_physical_dual<const K: usize>(&self, u: Dual<K>) -> Dual<K> {
        let u = if u.v < 0.0 {
            Dual::constant(0.0)
        } else if u.v > 1.0 {
            Dual::constant(1.0)
        } else {
            u
        };
        match self.scale {
            ParamScale::Linear => u * (self.max - self.min) + self.min,
            ParamScale::Log => (u * (self.max / self.min).ln()).exp() * self.min,
        }
    }

    /// Normalized coordinate of a physical value; errors outside the range.
    pub fn to_unit(&self, v: f64) -> Result<f64> {
        let tol = 1e-9 * (self.max.abs() + self.min.abs());
        if !(v >= self.min - tol && v <= self.max + tol) {
            return Err(CoreError::Invalid(format!(
                "{} = {v} outside [{}, {}]",
                self.name, self.min, self.max
            )));
        }
        if self.max == self.min {
            return Ok(0.0);
        }
        let u = match self.scale {
            ParamScale::Linear => (v - self.min) / (self.max - self.min),
            ParamScale::Log => (v / self.min).ln() / (self.max / self.min).ln(),
        };
        Ok(u.clamp(0.0, 1.0))
    }
}

/// Normalized parameter vector with the ranges that give it meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    values: Vec<f64>,
    ranges: Vec<ParamRange>,
}

impl SynthParams {
    pub fn new(values: &[f64], ranges: &[ParamRange]) -> Result<Self> {
        if values.len() != ranges.len() {
            return Err(CoreError::Invalid(format!(
                "{} values for {} ranges",
                values.len(),
                ranges.len()
            )));
        }
        Ok(Self {
            values: values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ranges: ranges.to_vec(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn physical(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.ranges)
            .map(|(&u, r)| r.to_physical(u))
            .collect()
    }
}

/// Audio and its Jacobian with respect to the normalized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub audio: Vec<f64>,
    /// `U` rows of `T` samples.
    pub jacobian: Vec<Vec<f64>>,
}

impl Rendered {
    pub(crate) fn from_duals<const K: usize>(x: &[Dual<K>]) -> Self {
        Self {
            audio: x.iter().map(|d| d.v).collect(),
            jacobian: (0..K).map(|k| x.iter().map(|d| d.d[k]).collect()).collect(),
        }
    }
}

pub trait Synth: Send + Sync {
    fn ranges(&self) -> &[ParamRange];

    fn num_samples(&self) -> usize;

    fn sample_rate(&self) -> f64;

    /// Audio at normalized parameters `theta` with decoder seed `seed`.
    fn render_dual(&self, theta: &[f64], seed: u64) -> Result<Rendered>;

    fn num_params(&self) -> usize {
        self.ranges().len()
    }

    fn render(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        Ok(self.render_dual(theta, seed)?.audio)
    }

    /// Records `x̃ = D(θ̃)` on the tape as `[T]`, where `theta` is a `[U]` or
    /// `[1,U]` node. The value is exact; the gradient is exact at the
    /// current value of `theta`.
    fn decode(&self, tape: &mut Tape, theta: Var, seed: u64) -> Result<Var> {
        let u = self.num_params();
        let t0 = tape.value(theta).as_real().map(<[f64]>::to_vec).ok_or_else(|| {
            CoreError::Invalid("synth parameters must be real".into())
        })?;
        if t0.len() != u {
            return Err(CoreError::Invalid(format!("expected {u} parameters, got {}", t0.len())));
        }
        let r = self.render_dual(&t0, seed)?;
        inject(tape, theta, &t0, &r)
    }
}

/// Affine tape node `x0 + J·(θ − θ0)` reproducing a render at `θ0`.
pub fn inject(tape: &mut Tape, theta: Var, theta0: &[f64], r: &Rendered) -> Result<Var> {
    let u = theta0.len();
    let t = r.audio.len();
    let mut bias = r.audio.clone();
    let mut jac = Vec::with_capacity(u * t);
    for (row, &th) in r.jacobian.iter().zip(theta0) {
        for (b, j) in bias.iter_mut().zip(row) {
            *b -= th * j;
        }
        jac.extend_from_slice(row);
    }
    let th = tape.reshape(theta, &[1, u])?;
    let w = tape.constant(Tensor::real(&[u, t], jac)?)?;
    let b = tape.constant(Tensor::vector(bias))?;
    let y = tape.affine(th, w, b)?;
    Ok(tape.reshape(y, &[t])?)
}

/// Circularly delays `x` by `shift` samples (negative shifts advance).
pub fn circular_shift<T: Clone>(x: &mut [T], shift: i64) {
    let n = x.len() as i64;
    if n == 0 {
        return;
    }
    x.rotate_right(shift.rem_euclid(n) as usize);
}

/// 16-bit mono WAV, clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, audio: &[f64], sample_rate: f64) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| CoreError::Invalid(format!("wav: {e}"));
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in audio {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)
            .map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}
