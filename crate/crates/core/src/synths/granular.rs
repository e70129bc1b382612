//! Granular texture of Hann-windowed chirp grains. Grain onsets, pitches and
//! gate thresholds come from the seed; density opens the gates smoothly and
//! slope sets the common chirp rate.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dual, ParamRange, Rendered, Synth};
use crate::error::{CoreError, Result};

/// Added to the peak before normalizing.
pub const PEAK_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GranularConfig {
    pub sample_rate: f64,
    pub num_samples: usize,
    pub max_grains: usize,
    pub grain_len: usize,
    pub pitch_min: f64,
    pub pitch_max: f64,
    /// Chirp rate at slope 1, in octaves per second.
    pub r_max: f64,
    /// Steepness of the grain gates.
    pub sharpness: f64,
    pub density: ParamRange,
    pub slope: ParamRange,
}

impl GranularConfig {
    pub fn full() -> Self {
        Self {
            sample_rate: 8192.0,
            num_samples: 32768,
            max_grains: 64,
            grain_len: 4096,
            pitch_min: 256.0,
            pitch_max: 2048.0,
            r_max: 8.0,
            sharpness: 20.0,
            density: ParamRange::linear("density", 0.0, 1.0),
            slope: ParamRange::linear("slope", 0.0, 1.0),
        }
    }

    /// One second of audio with quarter-second grains, short enough that a
    /// full-slope sweep stays below Nyquist inside the window.
    pub fn desk() -> Self {
        Self {
            num_samples: 8192,
            grain_len: 2048,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.density.validate()?;
        self.slope.validate()?;
        if self.grain_len == 0 || self.grain_len > self.num_samples || self.max_grains == 0 {
            return Err(CoreError::Invalid("grain length must lie in [1, T] and grains > 0".into()));
        }
        if !(self.pitch_min > 0.0 && self.pitch_min <= self.pitch_max && self.sample_rate > 0.0) {
            return Err(CoreError::Invalid("grain pitch range must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Grain {
    threshold: f64,
    start: usize,
    pitch: f64,
}

#[derive(Clone, Debug)]
pub struct GranularSynth {
    pub cfg: GranularConfig,
    ranges: Vec<ParamRange>,
}

impl GranularSynth {
    pub fn new(cfg: GranularConfig) -> Result<Self> {
        cfg.validate()?;
        let ranges = vec![cfg.density.clone(), cfg.slope.clone()];
        Ok(Self { cfg, ranges })
    }

    fn grains(&self, seed: u64) -> Vec<Grain> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = (c.pitch_max / c.pitch_min).ln();
        (0..c.max_grains)
            .map(|_| Grain {
                threshold: rng.random::<f64>(),
                start: rng.random_range(0..=c.num_samples - c.grain_len),
                pitch: c.pitch_min * (span * rng.random::<f64>()).exp(),
            })
            .collect()
    }

    /// Gate of a grain with threshold `u`: zero at density 0, rising
    /// smoothly past the threshold.
    fn gate(&self, density: Dual<2>, u: f64) -> Dual<2> {
        let s = self.cfg.sharpness;
        let closed = 1.0 / (1.0 + (s * u).exp());
        ((density - u) * s).sigmoid() - closed
    }

    /// Grain sum before peak normalization.
    pub fn render_raw(&self, theta: &[f64], seed: u64) -> Result<Vec<Dual<2>>> {
        if theta.len() != 2 {
            return Err(CoreError::Invalid(format!("granular takes 2 parameters, got {}", theta.len())));
        }
        let c = &self.cfg;
        let density = c.density.to_physical_dual(Dual::var(theta[0], 0));
        let rate = c.slope.to_physical_dual(Dual::var(theta[1], 1)) * c.r_max;
        let l = c.grain_len;
        let mut out = vec![Dual::constant(0.0); c.num_samples];
        for g in self.grains(seed) {
            let gate = self.gate(density, g.threshold);
            for j in 0..l {
                let tau = (j as f64 - (l / 2) as f64) / c.sample_rate;
                let hann = 0.5 - 0.5 * (2.0 * PI * j as f64 / l as f64).cos();
                let phase = (rate * (LN_2 * tau)).expm1_over_x() * (2.0 * PI * g.pitch * tau);
                out[g.start + j] = out[g.start + j] + gate * phase.sin() * hann;
            }
        }
        Ok(out)
    }
}

impl Synth for GranularSynth {
    fn ranges(&self) -> &[ParamRange] {
        &self.ranges
    }

    fn num_samples(&self) -> usize {
        self.cfg.num_samples
    }

    fn sample_rate(&self) -> f64 {
        self.cfg.sample_rate
    }

    fn render_dual(&self, theta: &[f64], seed: u64) -> Result<Rendered> {
        let raw = self.render_raw(theta, seed)?;
        let peak = raw
            .iter()
            .copied()
            .max_by(|a, b| a.v.abs().total_cmp(&b.v.abs()))
            .map(Dual::abs)
            .unwrap_or(Dual::constant(0.0));
        let gain = Dual::constant(1.0) / (peak + PEAK_EPS);
        let x: Vec<Dual<2>> = raw.into_iter().map(|v| v * gain).collect();
        Ok(Rendered::from_duals(&x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> GranularSynth {
        GranularSynth::new(GranularConfig::desk()).unwrap()
    }

    #[test]
    fn zero_density_is_silent() {
        let s = synth();
        let raw = s.render_raw(&[0.0, 0.5], 4).unwrap();
        let peak = raw.iter().fold(0.0f64, |m, d| m.max(d.v.abs()));
        // A single open grain peaks near 1.
        assert!(peak < 1e-3, "{peak}");
    }

    #[test]
    fn peak_at_most_one() {
        let s = synth();
        for seed in 0..5 {
            for th in [[0.2, 0.1], [0.9, 0.9], [1.0, 0.0]] {
                let x = s.render(&th, seed).unwrap();
                assert!(x.iter().all(|v| v.abs() <= 1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn zero_slope_gives_constant_pitch() {
        let s = synth();
        let seed = 7;
        let g = &s.grains(seed)[0];
        // A single grain in isolation: zero crossings evenly spaced.
        let mut one = s.clone();
        one.cfg.max_grains = 1;
        let x = one.render_raw(&[1.0, 0.0], seed).unwrap();
        let seg: Vec<f64> = x[g.start..g.start + s.cfg.grain_len].iter().map(|d| d.v).collect();
        let crossings: Vec<f64> = seg
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
            .map(|(i, w)| i as f64 + w[0] / (w[0] - w[1]))
            .collect();
        let gaps: Vec<f64> = crossings.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((s.cfg.sample_rate / mean - g.pitch).abs() < 0.01 * g.pitch);
        assert!(gaps.iter().all(|v| (v - mean).abs() < 0.05 * mean));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = synth();
        let th = [0.55, 0.35];
        let r = s.render_dual(&th, 11).unwrap();
        let h = 1e-6;
        for u in 0..2 {
            let (mut a, mut b) = (th, th);
            a[u] += h;
            b[u] -= h;
            let xa = s.render(&a, 11).unwrap();
            let xb = s.render(&b, 11).unwrap();
            let fd: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| (p - q) / (2.0 * h)).collect();
            let err = scrapl_autodiff::gradcheck::relative_error(&r.jacobian[u], &fd);
            assert!(err < 1e-5, "param {u}: {err:e}");
        }
    }
}
