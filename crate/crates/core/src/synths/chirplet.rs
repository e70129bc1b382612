//! AM/FM chirplet: an exponential chirp around a centre frequency, a raised
//! cosine amplitude modulation and a Gaussian envelope in log-frequency that
//! confines the sweep to a band of fixed width in octaves.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{circular_shift, Dual, ParamRange, Rendered, Synth};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChirpletConfig {
    pub sample_rate: f64,
    pub num_samples: usize,
    pub center_hz: f64,
    pub bandwidth_oct: f64,
    /// Circular shifts are drawn uniformly from `[-shift_range, shift_range]`.
    pub shift_range: i64,
    /// Fraction of the signal covered by the cosine ramps of the edge taper.
    pub taper: f64,
    /// AM rate in Hz.
    pub am: ParamRange,
    /// FM rate in octaves per second.
    pub fm: ParamRange,
}

impl ChirpletConfig {
    /// AM and FM ranges of the four benchmark configurations (1-based).
    pub fn ranges(config: usize) -> Result<(ParamRange, ParamRange)> {
        let (am, fm) = match config {
            1 => ((1.0, 2.0), (0.5, 1.0)),
            2 => ((1.0, 2.0), (2.0, 4.0)),
            3 => ((2.8, 8.4), (2.0, 4.0)),
            4 => ((2.8, 8.4), (4.0, 12.0)),
            _ => return Err(CoreError::Invalid(format!("chirplet configuration {config} not in 1..=4"))),
        };
        Ok((
            ParamRange::log("am_hz", am.0, am.1),
            ParamRange::log("fm_oct_per_s", fm.0, fm.1),
        ))
    }

    /// Full-size setting: 32768 samples at 8192 Hz, shifts of ±2048.
    pub fn full(config: usize) -> Result<Self> {
        let (am, fm) = Self::ranges(config)?;
        Ok(Self {
            sample_rate: 8192.0,
            num_samples: 32768,
            center_hz: 512.0,
            bandwidth_oct: 2.0,
            shift_range: 2048,
            taper: 0.1,
            am,
            fm,
        })
    }

    /// Desk-scale setting: 2 s at 4096 Hz, shifts scaled with the length.
    pub fn desk(config: usize) -> Result<Self> {
        Ok(Self {
            sample_rate: 4096.0,
            num_samples: 8192,
            shift_range: 512,
            ..Self::full(config)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.am.validate()?;
        self.fm.validate()?;
        if self.num_samples == 0 || self.shift_range < 0 || !(self.sample_rate > 0.0) {
            return Err(CoreError::Invalid("chirplet length, rate and shift range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.taper) || !(self.bandwidth_oct > 0.0) {
            return Err(CoreError::Invalid("chirplet taper must lie in [0,1], bandwidth > 0".into()));
        }
        Ok(())
    }
}

/// Tukey window value at sample `i` of `n`.
pub(crate) fn tukey(i: usize, n: usize, frac: f64) -> f64 {
    let ramp = frac * n as f64 / 2.0;
    let pos = (i as f64 + 0.5).min(n as f64 - i as f64 - 0.5);
    if pos >= ramp {
        1.0
    } else {
        0.5 * (1.0 - (PI * pos / ramp).cos())
    }
}

#[derive(Clone, Debug)]
pub struct ChirpletSynth {
    pub cfg: ChirpletConfig,
    ranges: Vec<ParamRange>,
}

impl ChirpletSynth {
    pub fn new(cfg: ChirpletConfig) -> Result<Self> {
        cfg.validate()?;
        let ranges = vec![cfg.am.clone(), cfg.fm.clone()];
        Ok(Self { cfg, ranges })
    }

    /// Shift applied for decoder seed `seed`.
    pub fn shift(&self, seed: u64) -> i64 {
        let s = self.cfg.shift_range;
        ChaCha8Rng::seed_from_u64(seed).random_range(-s..=s)
    }

    /// Render from physical rates; errors if either is outside its range.
    pub fn render_physical(&self, am_hz: f64, fm_oct: f64, seed: u64) -> Result<Vec<f64>> {
        let theta = [self.cfg.am.to_unit(am_hz)?, self.cfg.fm.to_unit(fm_oct)?];
        Ok(self.render_dual(&theta, seed)?.audio)
    }

    fn render_unshifted(&self, am: Dual<2>, fm: Dual<2>) -> Vec<Dual<2>> {
        let c = &self.cfg;
        let n = c.num_samples;
        let sigma_oct = c.bandwidth_oct / 4.0;
        (0..n)
            .map(|i| {
                let t = (i as f64 - (n / 2) as f64) / c.sample_rate;
                let oct = fm * t;
                let env = (oct * oct).scale(-0.5 / (sigma_oct * sigma_oct)).exp();
                let amp = ((am * (2.0 * PI * t)).cos() + 1.0) * 0.5;
                let phase = (oct * LN_2).expm1_over_x() * (2.0 * PI * c.center_hz * t);
                env * amp * phase.sin() * tukey(i, n, c.taper)
            })
            .collect()
    }
}

impl Synth for ChirpletSynth {
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
        if theta.len() != 2 {
            return Err(CoreError::Invalid(format!("chirplet takes 2 parameters, got {}", theta.len())));
        }
        let am = self.cfg.am.to_physical_dual(Dual::var(theta[0], 0));
        let fm = self.cfg.fm.to_physical_dual(Dual::var(theta[1], 1));
        let mut x = self.render_unshifted(am, fm);
        circular_shift(&mut x, self.shift(seed));
        Ok(Rendered::from_duals(&x))
    }
}
