//! Morlet and Gaussian filters for the joint time–frequency scattering.
//!
//! All temporal filters live on the DFT grid of the reflection-padded signal
//! (`M = 2N` bins); a bin index `f` is a signed frequency in `[-M/2, M/2)`.
//! Band-pass filters are stored as a window of `len` bins starting at `lo`
//! and are exactly zero outside it.

use scrapl_autodiff::fft::ifft;
use scrapl_autodiff::Complex64;

use crate::error::{CoreError, Result};

/// Centre of the highest band-pass filter, in cycles per sample.
pub const XI_MAX: f64 = 0.4;
/// Lower bound on filter width, in DFT bins.
pub const SIGMA_FLOOR_BINS: f64 = 1.0;
/// Spectral window of a temporal band-pass, in multiples of its width. The
/// window also sets the rate at which the band's modulus is sampled, so it
/// is twice the filter's effective support to leave room for the modulus.
pub const WINDOW_SIGMAS: f64 = 16.0;

/// Pointwise nonlinearity applied to each path output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    Identity,
    Log1p,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterbankSpec {
    pub j: usize,
    pub q1: usize,
    pub q2: usize,
    pub j_fr: usize,
    pub q_fr: usize,
    pub t_avg: usize,
    pub f_avg: usize,
    pub n: usize,
    pub rho: Rho,
    /// Only used to label rates in Hz.
    pub sample_rate: f64,
}

impl FilterbankSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Spec(m));
        if self.q1 == 0 || self.q2 == 0 || self.j_fr == 0 || self.q_fr == 0 || self.j == 0 {
            return fail("J, Q1, Q2, J_fr and Q_fr must be positive".into());
        }
        if !self.n.is_power_of_two() || self.n < 16 {
            return fail(format!("N = {} must be a power of two >= 16", self.n));
        }
        if self.j >= usize::BITS as usize || (1usize << self.j) > self.n {
            return fail(format!("N = {} too short for J = {}", self.n, self.j));
        }
        if !self.t_avg.is_power_of_two() || !self.f_avg.is_power_of_two() {
            return fail("T_avg and F_avg must be powers of two".into());
        }
        if self.t_avg > self.n || self.t_avg < 4 {
            return fail(format!("T_avg = {} must lie in [4, N]", self.t_avg));
        }
        if !(self.sample_rate > 0.0) {
            return fail("sample rate must be positive".into());
        }
        Ok(())
    }

    /// Padded transform length.
    pub fn padded_len(&self) -> usize {
        2 * self.n
    }

    /// Frames of a lowpassed row before the centre crop.
    pub fn frames_padded(&self) -> usize {
        8 * self.n / self.t_avg
    }

    /// Frames kept after cropping the padding away.
    pub fn frames(&self) -> usize {
        self.frames_padded() / 2
    }

    /// Subsampling factor of the frequential lowpass, in rows.
    pub fn freq_stride(&self) -> usize {
        (self.f_avg / 4).max(1)
    }

    pub fn n_first_order(&self) -> usize {
        self.j * self.q1
    }
}

/// A band-pass filter stored on a contiguous window of signed bins.
#[derive(Clone, Debug, PartialEq)]
pub struct BandFilter {
    /// Centre, in bins of the grid the filter lives on.
    pub center: f64,
    pub sigma: f64,
    /// First signed bin of the window.
    pub lo: i64,
    pub values: Vec<f64>,
}

impl BandFilter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Response at signed bin `f` (zero outside the window).
    pub fn at(&self, f: i64) -> f64 {
        let i = f - self.lo;
        if i < 0 || i as usize >= self.values.len() {
            0.0
        } else {
            self.values[i as usize]
        }
    }

    /// Full response on an `m`-bin grid in natural FFT order.
    pub fn dense(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (i, v) in self.values.iter().enumerate() {
            let f = self.lo + i as i64;
            out[f.rem_euclid(m as i64) as usize] += v;
        }
        out
    }
}

fn morlet(f: f64, center: f64, sigma: f64) -> f64 {
    let g = |u: f64| (-u * u / (2.0 * sigma * sigma)).exp();
    g(f - center) - g(center) * g(f)
}

/// Half-power spacing rule: adjacent filters cross where their squared
/// responses are one half.
fn natural_sigma(center: f64, q: usize) -> f64 {
    center * (1.0 - 2f64.powf(-1.0 / q as f64)) / (2.0 * 2f64.ln().sqrt())
}

/// Constant-Q Morlet family on an `m`-bin grid, highest centre first, each
/// window clipped to the signed range `[-m/2, m/2)`. Amplitudes follow a
/// Riemann-sum rule so the Littlewood–Paley sum is close to flat, then
/// everything is rescaled so its maximum over the grid is one.
fn morlet_family(m: usize, count: usize, q: usize, top: f64, support: f64) -> Vec<BandFilter> {
    let mut filters: Vec<BandFilter> = (0..count)
        .map(|k| {
            let center = top * 2f64.powf(-(k as f64) / q as f64);
            let sigma = natural_sigma(center, q).max(SIGMA_FLOOR_BINS);
            let spacing = center * (1.0 - 2f64.powf(-1.0 / q as f64));
            let amp = (spacing / (sigma * std::f64::consts::PI.sqrt())).sqrt();
            let len = (support * sigma).ceil().max(8.0) as usize;
            let len = len.next_power_of_two().min(m);
            let half = (m / 2) as i64;
            let lo = (center.round() as i64 - (len / 2) as i64).max(-half);
            let hi = (center.round() as i64 - (len / 2) as i64 + len as i64).min(m as i64 - half);
            let values = (lo..hi)
                .map(|f| amp * morlet(f as f64, center, sigma))
                .collect();
            BandFilter {
                center,
                sigma,
                lo,
                values,
            }
        })
        .collect();
    let lp = littlewood_paley(&filters, m);
    let peak = lp.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        let s = 1.0 / peak.sqrt();
        for f in &mut filters {
            for v in &mut f.values {
                *v *= s;
            }
        }
    }
    filters
}

/// `Σ|ψ̂(f)|²` on an `m`-bin grid in natural FFT order.
pub fn littlewood_paley(filters: &[BandFilter], m: usize) -> Vec<f64> {
    let mut lp = vec![0.0; m];
    for f in filters {
        for (i, v) in f.dense(m).into_iter().enumerate() {
            lp[i] += v * v;
        }
    }
    lp
}

/// Frequency-axis wavelet, as a kernel over row offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqFilter {
    /// Index among the `J_fr·Q_fr` magnitudes.
    pub scale: usize,
    /// +1 or -1.
    pub spin: i8,
    /// Centre in cycles per row (signed by spin).
    pub center: f64,
    /// Frequency response on the `l_fr` grid.
    pub response: Vec<f64>,
    /// Impulse response, indexed by row offset modulo `l_fr`.
    pub kernel: Vec<Complex64>,
}

#[derive(Clone, Debug)]
pub struct Filterbank {
    pub spec: FilterbankSpec,
    /// First-order Morlets, highest centre first.
    pub psi1: Vec<BandFilter>,
    /// Second-order temporal Morlets ("rates"), highest first.
    pub psi2: Vec<BandFilter>,
    /// Frequency-axis Morlets, both spins.
    pub psi_fr: Vec<FreqFilter>,
    /// Grid length for frequency-axis kernels.
    pub l_fr: usize,
    /// Temporal lowpass width in samples.
    pub phi_time_sigma: f64,
    /// Frequential lowpass width in rows.
    pub phi_fr_sigma: f64,
    /// Real kernel of the frequential lowpass, used as the spin-0 filter.
    pub phi_fr_kernel: Vec<f64>,
}

impl Filterbank {
    pub fn build(spec: &FilterbankSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.padded_len();
        let top = XI_MAX * m as f64;
        let psi1 = morlet_family(m, spec.n_first_order(), spec.q1, top, WINDOW_SIGMAS);
        let psi2 = morlet_family(m, spec.j * spec.q2, spec.q2, top, WINDOW_SIGMAS);

        let l_fr = (2 * spec.n_first_order()).next_power_of_two().max(8);
        let mut psi_fr = Vec::new();
        let fr_top = XI_MAX * l_fr as f64;
        let fr = morlet_family(l_fr, spec.j_fr * spec.q_fr, spec.q_fr, fr_top, 8.0);
        for (scale, f) in fr.iter().enumerate() {
            for spin in [1i8, -1] {
                let response: Vec<f64> = (0..l_fr)
                    .map(|k| {
                        let signed = if k < l_fr / 2 { k as i64 } else { k as i64 - l_fr as i64 };
                        f.at(signed * spin as i64)
                    })
                    .collect();
                let spectrum: Vec<Complex64> =
                    response.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                psi_fr.push(FreqFilter {
                    scale,
                    spin,
                    center: spin as f64 * f.center / l_fr as f64,
                    response,
                    kernel: ifft(&spectrum),
                });
            }
        }

        let phi_fr_sigma = spec.f_avg as f64 / 4.0;
        let phi_spec: Vec<Complex64> = (0..l_fr)
            .map(|k| {
                let signed = if k < l_fr / 2 { k as f64 } else { k as f64 - l_fr as f64 };
                let f = signed / l_fr as f64;
                let w = std::f64::consts::PI * f * phi_fr_sigma;
                Complex64::new((-2.0 * w * w).exp(), 0.0)
            })
            .collect();
        let phi_fr_kernel = ifft(&phi_spec).into_iter().map(|z| z.re).collect();

        Ok(Self {
            spec: spec.clone(),
            psi1,
            psi2,
            psi_fr,
            l_fr,
            phi_time_sigma: spec.t_avg as f64 / 4.0,
            phi_fr_sigma,
            phi_fr_kernel,
        })
    }

    /// Gaussian temporal lowpass at signed padded bin `f`.
    pub fn phi_time_at(&self, f: f64) -> f64 {
        let nu = f / self.spec.padded_len() as f64;
        let w = std::f64::consts::PI * nu * self.phi_time_sigma;
        (-2.0 * w * w).exp()
    }

    /// Convolution matrix `[rows, rows]` (row-major) of a frequency-axis
    /// filter over `rows` scalogram rows, zero-padded at the edges.
    pub fn freq_conv_matrix(&self, filter: Option<&FreqFilter>, rows: usize) -> Vec<Complex64> {
        let l = self.l_fr as i64;
        let mut out = vec![Complex64::new(0.0, 0.0); rows * rows];
        for i in 0..rows {
            for k in 0..rows {
                let d = (i as i64 - k as i64).rem_euclid(l) as usize;
                out[i * rows + k] = match filter {
                    Some(f) => f.kernel[d],
                    None => Complex64::new(self.phi_fr_kernel[d], 0.0),
                };
            }
        }
        out
    }

    /// Frequential lowpass with subsampling: `[ceil(rows/s), rows]`, each
    /// row a normalized Gaussian centred on a multiple of the stride.
    pub fn freq_lowpass_matrix(&self, rows: usize) -> (usize, Vec<f64>) {
        let s = self.spec.freq_stride();
        let out_rows = rows.div_ceil(s);
        let sig = self.phi_fr_sigma.max(1e-9);
        let mut mat = vec![0.0; out_rows * rows];
        for o in 0..out_rows {
            let c = (o * s) as f64;
            let row = &mut mat[o * rows..(o + 1) * rows];
            for (k, v) in row.iter_mut().enumerate() {
                let d = (k as f64 - c) / sig;
                *v = (-0.5 * d * d).exp();
            }
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        (out_rows, mat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> FilterbankSpec {
        FilterbankSpec {
            j: 6,
            q1: 4,
            q2: 2,
            j_fr: 2,
            q_fr: 1,
            t_avg: 256,
            f_avg: 8,
            n: 2048,
            rho: Rho::Identity,
            sample_rate: 1.0,
        }
    }

    #[test]
    fn filter_counts() {
        let spec = FilterbankSpec {
            j: 12,
            q1: 8,
            q2: 2,
            j_fr: 3,
            q_fr: 2,
            t_avg: 4096,
            f_avg: 8,
            n: 32768,
            rho: Rho::Identity,
            sample_rate: 8192.0,
        };
        let fb = Filterbank::build(&spec).unwrap();
        assert_eq!(fb.psi1.len(), 96);
        assert_eq!(fb.psi_fr.len(), 12);
    }

    #[test]
    fn short_input_rejected() {
        let mut spec = small_spec();
        spec.j = 12;
        assert!(matches!(Filterbank::build(&spec), Err(CoreError::Spec(_))));
    }

    #[test]
    fn band_pass_filters_have_negligible_dc() {
        let fb = Filterbank::build(&small_spec()).unwrap();
        for f in fb.psi1.iter().chain(&fb.psi2) {
            let peak = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(f.at(0).abs() < 1e-3 * peak);
        }
    }

    #[test]
    fn peaks_within_one_bin_of_centre() {
        let fb = Filterbank::build(&small_spec()).unwrap();
        for f in &fb.psi1 {
            let (imax, _) = f
                .values
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let peak_bin = (f.lo + imax as i64) as f64;
            assert!((peak_bin - f.center).abs() <= 1.0, "{peak_bin} vs {}", f.center);
        }
    }

    #[test]
    fn lowpass_matrix_rows_sum_to_one() {
        let fb = Filterbank::build(&small_spec()).unwrap();
        let (r, mat) = fb.freq_lowpass_matrix(13);
        assert_eq!(r, 7);
        for row in mat.chunks(13) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
