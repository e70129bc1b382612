//! Multirate evaluation of scattering paths on the tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use scrapl_autodiff::{Complex64, PadMode, Tape, Tensor, Var};

use super::filters::{Filterbank, FilterbankSpec, Rho};
use super::paths::{PathDescriptor, PathTable};
use crate::error::{CoreError, Result};

thread_local! {
    static SECOND_ORDER_USAGE: RefCell<BTreeMap<usize, u64>> = const { RefCell::new(BTreeMap::new()) };
}

/// Clears this thread's record of second-order filter applications.
pub fn reset_filter_usage() {
    SECOND_ORDER_USAGE.with(|u| u.borrow_mut().clear());
}

/// Per-path count of second-order filter applications on this thread since
/// the last reset.
pub fn filter_usage() -> BTreeMap<usize, u64> {
    SECOND_ORDER_USAGE.with(|u| u.borrow().clone())
}

fn note_second_order(p: usize) {
    SECOND_ORDER_USAGE.with(|u| *u.borrow_mut().entry(p).or_insert(0) += 1);
}

/// Band of signed bins `[lo, lo+len)` of the last axis of `x`, with bins
/// outside the axis' own signed range `[-⌊n/2⌋, n-⌊n/2⌋)` set to zero.
pub fn circ_window(tape: &mut Tape, x: Var, lo: i64, len: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = *shape.last().expect("rank >= 1") as i64;
    let neg = n / 2;
    let hi = lo + len as i64;
    let a = lo.max(-neg);
    let b = hi.min(n - neg);
    let axis = shape.len() - 1;
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = len;
    if a >= b {
        let z = if tape.value(x).is_complex() {
            Tensor::czeros(&out_shape)
        } else {
            Tensor::zeros(&out_shape)
        };
        return Ok(tape.constant(z)?);
    }
    let mut parts = Vec::with_capacity(2);
    if a < 0 {
        let end = b.min(0);
        parts.push(tape.slice(x, axis, (n + a) as usize, (end - a) as usize)?);
    }
    if b > 0 {
        let start = a.max(0);
        parts.push(tape.slice(x, axis, start as usize, (b - start) as usize)?);
    }
    let body = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, axis)?
    };
    let (left, right) = ((a - lo) as usize, (hi - b) as usize);
    if left == 0 && right == 0 {
        Ok(body)
    } else {
        Ok(tape.pad(body, left, right, PadMode::Zero)?)
    }
}

/// Rows of equal subsampled length share a group.
#[derive(Clone, Debug)]
struct Group {
    rows: Range<usize>,
    len: usize,
    /// Filter windows of all rows, `[rows, len]` row-major.
    filters: Tensor,
}

/// Per-signal cache of shared intermediate results.
pub struct ScatterCtx {
    spectrum: Var,
    row_fft: Vec<Option<Var>>,
    lowpassed: Vec<Option<Var>>,
    rate_stage: HashMap<usize, Var>,
}

impl ScatterCtx {
    pub fn spectrum(&self) -> Var {
        self.spectrum
    }
}

/// Filterbank, path table and everything needed to evaluate paths.
#[derive(Clone, Debug)]
pub struct Scattering {
    pub fb: Filterbank,
    pub table: PathTable,
    groups: Vec<Group>,
    /// Temporal lowpass on the output grid in natural FFT order, Nyquist bin
    /// zeroed.
    phi_window: Tensor,
}

impl Scattering {
    pub fn new(spec: &FilterbankSpec) -> Result<Self> {
        let fb = Filterbank::build(spec)?;
        let table = PathTable::enumerate(&fb);
        let mut groups: Vec<Group> = Vec::new();
        let mut start = 0;
        for (i, f) in fb.psi1.iter().enumerate() {
            let next_differs = fb.psi1.get(i + 1).is_none_or(|g| g.len() != f.len());
            if next_differs {
                let len = f.len();
                let mut data = Vec::with_capacity((i + 1 - start) * len);
                for g in &fb.psi1[start..=i] {
                    data.extend_from_slice(&g.values);
                }
                groups.push(Group {
                    rows: start..i + 1,
                    len,
                    filters: Tensor::real(&[i + 1 - start, len], data)?,
                });
                start = i + 1;
            }
        }
        let k_out = spec.frames_padded();
        let phi: Vec<f64> = (0..k_out)
            .map(|i| {
                let f = if i < k_out / 2 { i as i64 } else { i as i64 - k_out as i64 };
                if i == k_out / 2 {
                    0.0
                } else {
                    fb.phi_time_at(f as f64)
                }
            })
            .collect();
        Ok(Self {
            fb,
            table,
            groups,
            phi_window: Tensor::vector(phi),
        })
    }

    pub fn spec(&self) -> &FilterbankSpec {
        &self.fb.spec
    }

    pub fn num_paths(&self) -> usize {
        self.table.len()
    }

    fn descriptor(&self, p: usize) -> Result<&PathDescriptor> {
        self.table.get(p).ok_or(CoreError::InvalidPath {
            p,
            count: self.table.len(),
        })
    }

    /// Spectrum of the reflection-padded signal, `[2N]` complex.
    pub fn padded_spectrum(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = self.spec().n;
        let shape = tape.shape(x).to_vec();
        if shape != [n] {
            return Err(CoreError::Length {
                expected: n,
                got: shape.iter().product(),
            });
        }
        let padded = tape.pad(x, n / 2, n / 2, PadMode::Reflect)?;
        Ok(tape.fft(padded)?)
    }

    pub fn context(&self, tape: &mut Tape, x: Var) -> Result<ScatterCtx> {
        let spectrum = self.padded_spectrum(tape, x)?;
        Ok(self.context_from_spectrum(spectrum))
    }

    /// Context over a precomputed padded spectrum, for callers that build
    /// it some other way (e.g. as an affine map of synth parameters).
    pub fn context_from_spectrum(&self, spectrum: Var) -> ScatterCtx {
        ScatterCtx {
            spectrum,
            row_fft: vec![None; self.groups.len()],
            lowpassed: vec![None; self.groups.len()],
            rate_stage: HashMap::new(),
        }
    }

    /// Scalogram rows of group `g`, `[rows, len]`, each row the modulus of a
    /// first-order band sampled every `2N/len` padded samples.
    fn group_rows(&self, tape: &mut Tape, ctx: &ScatterCtx, g: usize) -> Result<Var> {
        let group = &self.groups[g];
        let m = self.spec().padded_len();
        let mut bands = Vec::with_capacity(group.rows.len());
        for f in &self.fb.psi1[group.rows.clone()] {
            let w = circ_window(tape, ctx.spectrum, f.lo, group.len)?;
            bands.push(tape.reshape(w, &[1, group.len])?);
        }
        let stacked = tape.concat(&bands, 0)?;
        let h = tape.constant(group.filters.clone())?;
        let y = tape.mul(stacked, h)?;
        let y = tape.ifft(y)?;
        let y = tape.modulus(y)?;
        Ok(tape.scalar_mul(y, group.len as f64 / m as f64)?)
    }

    fn row_fft(&self, tape: &mut Tape, ctx: &mut ScatterCtx, g: usize) -> Result<Var> {
        if let Some(v) = ctx.row_fft[g] {
            return Ok(v);
        }
        let rows = self.group_rows(tape, ctx, g)?;
        let f = tape.fft(rows)?;
        ctx.row_fft[g] = Some(f);
        Ok(f)
    }

    /// Scalogram as one tape node per group of equal-rate rows.
    pub fn scalogram(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let ctx = self.context(tape, x)?;
        (0..self.groups.len())
            .map(|g| self.group_rows(tape, &ctx, g))
            .collect()
    }

    /// Scalogram rows of a plain signal, highest frequency first; row `λ`
    /// has its own length.
    pub fn scalogram_rows(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.to_vec()))?;
        let groups = self.scalogram(&mut tape, xv)?;
        let mut rows = Vec::new();
        for (g, v) in self.groups.iter().zip(groups) {
            for r in tape.value(v).data().chunks(g.len) {
                rows.push(r.to_vec());
            }
        }
        Ok(rows)
    }

    /// Resamples row spectra `[r, len]` onto the `K`-bin output grid in
    /// natural FFT order, returning `[r, K]` spectra still to be filtered.
    fn to_output_grid(&self, tape: &mut Tape, spectra: Var, len: usize) -> Result<Var> {
        let k_out = self.spec().frames_padded();
        let half = k_out / 2;
        let pos = circ_window(tape, spectra, 0, half)?;
        let neg = circ_window(tape, spectra, -(half as i64), half)?;
        let axis = tape.shape(pos).len() - 1;
        let w = tape.concat(&[pos, neg], axis)?;
        Ok(tape.scalar_mul(w, k_out as f64 / len as f64)?)
    }

    fn finish_lowpass(&self, tape: &mut Tape, spectra: Var) -> Result<Var> {
        let phi = tape.constant(self.phi_window.clone())?;
        let y = tape.mul(spectra, phi)?;
        let y = tape.ifft(y)?;
        Ok(tape.real_part(y)?)
    }

    /// Time-averaged scalogram rows of group `g`, `[rows, K]` real.
    fn lowpassed(&self, tape: &mut Tape, ctx: &mut ScatterCtx, g: usize) -> Result<Var> {
        if let Some(v) = ctx.lowpassed[g] {
            return Ok(v);
        }
        let f = self.row_fft(tape, ctx, g)?;
        let w = self.to_output_grid(tape, f, self.groups[g].len)?;
        let y = self.finish_lowpass(tape, w)?;
        ctx.lowpassed[g] = Some(y);
        Ok(y)
    }

    /// Rows `rows` of a per-group quantity, concatenated along axis 0.
    fn gather_rows<F>(&self, tape: &mut Tape, ctx: &mut ScatterCtx, rows: Range<usize>, mut per_group: F) -> Result<Var>
    where
        F: FnMut(&mut Tape, &mut ScatterCtx, usize) -> Result<Var>,
    {
        let mut parts = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let a = rows.start.max(group.rows.start);
            let b = rows.end.min(group.rows.end);
            if a >= b {
                continue;
            }
            let v = per_group(tape, ctx, g)?;
            let v = if a == group.rows.start && b == group.rows.end {
                v
            } else {
                tape.slice(v, 0, a - group.rows.start, b - a)?
            };
            parts.push(v);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(tape.concat(&parts, 0)?)
        }
    }

    /// Rate-filtered scalogram rows `[rows, K2]` complex, in the time domain
    /// at spacing `2N/K2`.
    fn rate_stage(&self, tape: &mut Tape, ctx: &mut ScatterCtx, k: usize, rows: usize) -> Result<Var> {
        if let Some(&v) = ctx.rate_stage.get(&k) {
            return Ok(v);
        }
        let filt = &self.fb.psi2[k];
        let k2 = filt.len();
        let h = Tensor::vector(filt.values.clone());
        let stacked = self.gather_rows(tape, ctx, 0..rows, |tape, ctx, g| {
            let f = self.row_fft(tape, ctx, g)?;
            let w = circ_window(tape, f, filt.lo, k2)?;
            let hv = tape.constant(h.clone())?;
            let w = tape.mul(w, hv)?;
            Ok(tape.scalar_mul(w, k2 as f64 / self.groups[g].len as f64)?)
        })?;
        let y = tape.ifft(stacked)?;
        ctx.rate_stage.insert(k, y);
        Ok(y)
    }

    /// Crops the padding frames, applies the energy scale and `ρ`.
    fn finish_path(&self, tape: &mut Tape, y: Var, freq_stride: usize) -> Result<Var> {
        let spec = self.spec();
        let k_out = spec.frames_padded();
        let y = tape.slice(y, 1, k_out / 4, spec.frames())?;
        let hop = spec.padded_len() as f64 / k_out as f64;
        let y = tape.scalar_mul(y, (hop * freq_stride as f64).sqrt())?;
        Ok(match spec.rho {
            Rho::Identity => y,
            Rho::Log1p => tape.log1p(y)?,
        })
    }

    fn freq_lowpass(&self, tape: &mut Tape, y: Var, rows: usize) -> Result<Var> {
        let (out_rows, mat) = self.fb.freq_lowpass_matrix(rows);
        let a = tape.constant(Tensor::real(&[out_rows, rows], mat)?)?;
        Ok(tape.matmul(a, y)?)
    }

    /// `φ_p` within a shared context.
    pub fn path_in(&self, tape: &mut Tape, ctx: &mut ScatterCtx, p: usize) -> Result<Var> {
        let d = self.descriptor(p)?.clone();
        match d.order {
            0 => {
                let lambda = self.spec().n_first_order();
                let y = self.gather_rows(tape, ctx, 0..lambda, |t, c, g| self.lowpassed(t, c, g))?;
                let ones = Tensor::real(&[1, lambda], vec![1.0 / (lambda as f64).sqrt(); lambda])?;
                let a = tape.constant(ones)?;
                let y = tape.matmul(a, y)?;
                self.finish_path(tape, y, 1)
            }
            1 => {
                let y = self.gather_rows(tape, ctx, d.rows.clone(), |t, c, g| self.lowpassed(t, c, g))?;
                let y = self.freq_lowpass(tape, y, d.rows.len())?;
                self.finish_path(tape, y, self.spec().freq_stride())
            }
            _ => {
                note_second_order(p);
                let k = d.rate.expect("order-2 path has a rate");
                let rows = d.rows.len();
                let y = self.rate_stage(tape, ctx, k, rows)?;
                let filter = d
                    .scale
                    .map(|s| self.fb.psi_fr.iter().find(|f| f.scale == s && f.spin == d.spin).unwrap());
                let conv = match filter {
                    Some(f) => Tensor::complex(&[rows, rows], self.fb.freq_conv_matrix(Some(f), rows))?,
                    None => {
                        let m: Vec<f64> = self
                            .fb
                            .freq_conv_matrix(None, rows)
                            .iter()
                            .map(|z: &Complex64| z.re)
                            .collect();
                        Tensor::real(&[rows, rows], m)?
                    }
                };
                let c = tape.constant(conv)?;
                let y = tape.matmul(c, y)?;
                let y = tape.modulus(y)?;
                let y = self.freq_lowpass(tape, y, rows)?;
                let k2 = self.fb.psi2[k].len();
                let f = tape.fft(y)?;
                let w = self.to_output_grid(tape, f, k2)?;
                let y = self.finish_lowpass(tape, w)?;
                self.finish_path(tape, y, self.spec().freq_stride())
            }
        }
    }

    /// `φ_p(x)` as a `[bins, frames]` node.
    pub fn scatter_path(&self, tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
        self.descriptor(p)?;
        let mut ctx = self.context(tape, x)?;
        self.path_in(tape, &mut ctx, p)
    }

    /// `φ_p` of the signal whose padded spectrum is `spectrum`.
    pub fn scatter_path_from_spectrum(&self, tape: &mut Tape, spectrum: Var, p: usize) -> Result<Var> {
        self.descriptor(p)?;
        let mut ctx = self.context_from_spectrum(spectrum);
        self.path_in(tape, &mut ctx, p)
    }

    /// Every path of `x`, sharing the scalogram and rate stages.
    pub fn scatter_all(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut ctx = self.context(tape, x)?;
        (0..self.num_paths()).map(|p| self.path_in(tape, &mut ctx, p)).collect()
    }

    /// `φ_p(x)` of a plain signal, off any caller tape.
    pub fn phi(&self, x: &[f64], p: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.to_vec()))?;
        let y = self.scatter_path(&mut tape, xv, p)?;
        Ok(tape.value(y).clone())
    }

    /// All path outputs of a plain signal.
    pub fn phi_all(&self, x: &[f64]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.to_vec()))?;
        let ys = self.scatter_all(&mut tape, xv)?;
        Ok(ys.into_iter().map(|y| tape.value(y).clone()).collect())
    }

    fn squared_distance(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d = tape.sub(a, b)?;
        Ok(tape.sum_squares(d)?)
    }

    /// `P·‖φ_p(x) − φ_p(x̃)‖²`.
    pub fn path_loss(&self, tape: &mut Tape, x: Var, x_hat: Var, p: usize) -> Result<Var> {
        let a = self.scatter_path(tape, x, p)?;
        let b = self.scatter_path(tape, x_hat, p)?;
        let s = self.squared_distance(tape, a, b)?;
        Ok(tape.scalar_mul(s, self.num_paths() as f64)?)
    }

    /// `P·‖target − φ_p(x̃)‖²` against a precomputed `φ_p(x)`.
    pub fn path_loss_to_target(&self, tape: &mut Tape, target: &Tensor, x_hat: Var, p: usize) -> Result<Var> {
        let b = self.scatter_path(tape, x_hat, p)?;
        self.path_loss_node(tape, target, b)
    }

    /// `P·‖target − y‖²` for an already computed path output `y`.
    pub fn path_loss_node(&self, tape: &mut Tape, target: &Tensor, y: Var) -> Result<Var> {
        let a = tape.constant(target.clone())?;
        let s = self.squared_distance(tape, a, y)?;
        Ok(tape.scalar_mul(s, self.num_paths() as f64)?)
    }

    /// `(1/P) Σ_p path_loss = Σ_p ‖φ_p(x) − φ_p(x̃)‖²`.
    pub fn full_loss(&self, tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
        let a = self.scatter_all(tape, x)?;
        let b = self.scatter_all(tape, x_hat)?;
        let mut terms = Vec::with_capacity(a.len());
        for (u, v) in a.into_iter().zip(b) {
            terms.push(self.squared_distance(tape, u, v)?);
        }
        Ok(tape.add_many(&terms)?)
    }

    /// Full loss against precomputed targets for every path.
    pub fn full_loss_to_targets(&self, tape: &mut Tape, targets: &[Tensor], x_hat: Var) -> Result<Var> {
        let b = self.scatter_all(tape, x_hat)?;
        let mut terms = Vec::with_capacity(b.len());
        for (t, v) in targets.iter().zip(b) {
            let a = tape.constant(t.clone())?;
            terms.push(self.squared_distance(tape, a, v)?);
        }
        Ok(tape.add_many(&terms)?)
    }

    /// Off-tape value of the full loss.
    pub fn full_loss_value(&self, x: &[f64], x_hat: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(x.to_vec()))?;
        let b = tape.constant(Tensor::vector(x_hat.to_vec()))?;
        let l = self.full_loss(&mut tape, a, b)?;
        Ok(tape.scalar(l).unwrap())
    }

    /// Off-tape value of one path loss.
    pub fn path_loss_value(&self, x: &[f64], x_hat: &[f64], p: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(x.to_vec()))?;
        let b = tape.constant(Tensor::vector(x_hat.to_vec()))?;
        let l = self.path_loss(&mut tape, a, b, p)?;
        Ok(tape.scalar(l).unwrap())
    }
}
