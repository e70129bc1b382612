//! Direct O(N²) evaluation of every path with naive DFTs, compared to the
//! multirate FFT implementation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapl_autodiff::Complex64;
use scrapl_core::scattering::*;

fn cis(a: f64) -> Complex64 {
    Complex64::from_polar(1.0, a)
}

fn signed_range(l: usize) -> (i64, i64) {
    let neg = (l / 2) as i64;
    (-neg, l as i64 - neg)
}

fn reflect_pad(x: &[f64]) -> Vec<f64> {
    let n = x.len() as i64;
    let h = n / 2;
    (-h..n + h)
        .map(|i| {
            let j = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            x[j as usize]
        })
        .collect()
}

/// `Σ_t u[t] e^{-2πi f t / len}` at signed frequency `f`.
fn dft_at(u: &[f64], f: i64) -> Complex64 {
    let l = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(t, &v)| v * cis(-2.0 * PI * (f as f64) * t as f64 / l))
        .sum()
}

struct Oracle<'a> {
    s: &'a Scattering,
}

impl Oracle<'_> {
    fn k_out(&self) -> usize {
        self.s.spec().frames_padded()
    }

    fn scalogram(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let xp = reflect_pad(x);
        let m = xp.len();
        let (a, b) = signed_range(m);
        let spectrum: Vec<Complex64> = (a..b).map(|f| dft_at(&xp, f)).collect();
        let x_at = |f: i64| spectrum[(f - a) as usize];
        self.s
            .fb
            .psi1
            .iter()
            .map(|filt| {
                let l = filt.len();
                (0..l)
                    .map(|t| {
                        let acc: Complex64 = (0..l as i64)
                            .map(|i| {
                                let f = filt.lo + i;
                                x_at(f) * filt.at(f) * cis(2.0 * PI * (f * t as i64) as f64 / l as f64)
                            })
                            .sum();
                        acc.norm() / m as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Gaussian time average onto the `K`-frame grid.
    fn lowpass(&self, u: &[f64]) -> Vec<f64> {
        let k = self.k_out() as i64;
        let l = u.len() as i64;
        let (la, lb) = signed_range(u.len());
        let m = self.s.spec().padded_len() as f64;
        let sig = self.s.spec().t_avg as f64 / 4.0;
        let spec: Vec<(i64, Complex64)> = (-k / 2 + 1..k / 2)
            .filter(|j| *j >= la && *j < lb)
            .map(|j| {
                let phi = (-2.0 * PI * PI * (j as f64 / m).powi(2) * sig * sig).exp();
                (j, dft_at(u, j) * phi)
            })
            .collect();
        (0..k)
            .map(|q| {
                let acc: Complex64 = spec
                    .iter()
                    .map(|(j, v)| v * cis(2.0 * PI * (j * q) as f64 / k as f64))
                    .sum();
                acc.re / l as f64
            })
            .collect()
    }

    fn freq_lowpass(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = self.s.spec().freq_stride();
        let sig = self.s.spec().f_avg as f64 / 4.0;
        (0..rows.len().div_ceil(s))
            .map(|o| {
                let w: Vec<f64> = (0..rows.len())
                    .map(|r| (-0.5 * ((r as f64 - (o * s) as f64) / sig).powi(2)).exp())
                    .collect();
                let z: f64 = w.iter().sum();
                (0..rows[0].len())
                    .map(|t| rows.iter().zip(&w).map(|(row, wi)| row[t] * wi).sum::<f64>() / z)
                    .collect()
            })
            .collect()
    }

    fn finish(&self, rows: Vec<Vec<f64>>, stride: usize) -> Vec<f64> {
        let spec = self.s.spec();
        let k = self.k_out();
        let g = (spec.padded_len() as f64 / k as f64 * stride as f64).sqrt();
        rows.iter()
            .flat_map(|r| {
                r[k / 4..k / 4 + spec.frames()].iter().map(move |v| {
                    let y = v * g;
                    match spec.rho {
                        Rho::Identity => y,
                        Rho::Log1p => y.ln_1p(),
                    }
                })
            })
            .collect()
    }

    fn kernel(&self, d: &PathDescriptor) -> Vec<Complex64> {
        let l = self.s.fb.l_fr;
        let spectrum: Vec<f64> = match d.scale {
            Some(sc) => self
                .s
                .fb
                .psi_fr
                .iter()
                .find(|f| f.scale == sc && f.spin == d.spin)
                .unwrap()
                .response
                .clone(),
            None => {
                let sig = self.s.spec().f_avg as f64 / 4.0;
                (0..l)
                    .map(|k| {
                        let f = if k < l / 2 { k as f64 } else { k as f64 - l as f64 } / l as f64;
                        (-2.0 * PI * PI * f * f * sig * sig).exp()
                    })
                    .collect()
            }
        };
        (0..l)
            .map(|dd| {
                spectrum
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * cis(2.0 * PI * (k * dd) as f64 / l as f64))
                    .sum::<Complex64>()
                    / l as f64
            })
            .collect()
    }

    fn path(&self, x: &[f64], p: usize) -> Vec<f64> {
        let u = self.scalogram(x);
        let d = self.s.table.get(p).unwrap().clone();
        let stride = self.s.spec().freq_stride();
        match d.order {
            0 => {
                let lam = u.len();
                let low: Vec<Vec<f64>> = u.iter().map(|r| self.lowpass(r)).collect();
                let sum: Vec<f64> = (0..self.k_out())
                    .map(|t| low.iter().map(|r| r[t]).sum::<f64>() / (lam as f64).sqrt())
                    .collect();
                self.finish(vec![sum], 1)
            }
            1 => {
                let low: Vec<Vec<f64>> = u[d.rows.clone()].iter().map(|r| self.lowpass(r)).collect();
                self.finish(self.freq_lowpass(&low), stride)
            }
            _ => {
                let rate = &self.s.fb.psi2[d.rate.unwrap()];
                let k2 = rate.len();
                let rows = d.rows.len();
                let z: Vec<Vec<Complex64>> = u[..rows]
                    .iter()
                    .map(|row| {
                        let (ra, rb) = signed_range(row.len());
                        let bins: Vec<(i64, Complex64)> = (rate.lo..rate.lo + k2 as i64)
                            .filter(|f| *f >= ra && *f < rb)
                            .map(|f| (f, dft_at(row, f) * rate.at(f)))
                            .collect();
                        (0..k2)
                            .map(|t| {
                                bins.iter()
                                    .map(|(f, v)| v * cis(2.0 * PI * (f * t as i64) as f64 / k2 as f64))
                                    .sum::<Complex64>()
                                    / row.len() as f64
                            })
                            .collect()
                    })
                    .collect();
                let ker = self.kernel(&d);
                let l = ker.len() as i64;
                let v: Vec<Vec<f64>> = (0..rows)
                    .map(|i| {
                        (0..k2)
                            .map(|t| {
                                (0..rows)
                                    .map(|kk| ker[(i as i64 - kk as i64).rem_euclid(l) as usize] * z[kk][t])
                                    .sum::<Complex64>()
                                    .norm()
                            })
                            .collect()
                    })
                    .collect();
                let low: Vec<Vec<f64>> = self.freq_lowpass(&v).iter().map(|r| self.lowpass(r)).collect();
                self.finish(low, stride)
            }
        }
    }
}

#[test]
fn every_path_matches_direct_evaluation() {
    for rho in [Rho::Identity, Rho::Log1p] {
        let spec = FilterbankSpec {
            j: 4,
            q1: 2,
            q2: 1,
            j_fr: 1,
            q_fr: 1,
            t_avg: 64,
            f_avg: 4,
            n: 1024,
            rho,
            sample_rate: 1.0,
        };
        let s = Scattering::new(&spec).unwrap();
        let oracle = Oracle { s: &s };
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..1024).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..1024).map(|_| r.random_range(-1.0..1.0)).collect();
        assert!(s.table.entries.iter().any(|e| e.order == 2));
        for p in 0..s.num_paths() {
            let fast = s.phi(&x, p).unwrap();
            let slow = oracle.path(&x, p);
            let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = fast.data().iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert_eq!(fast.numel(), slow.len());
            assert!(err <= 1e-8 * scale.max(1e-12), "path {p}: {err:e} (scale {scale:e})");

            let loss = s.path_loss_value(&x, &y, p).unwrap();
            let slow_y = oracle.path(&y, p);
            let direct = s.num_paths() as f64 * slow.iter().zip(&slow_y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            assert!((loss - direct).abs() <= 1e-8 * direct.max(1e-300), "loss {p}: {loss} vs {direct}");
        }
    }
}
