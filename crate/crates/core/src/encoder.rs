//! Encoder `E_x(w)`: fixed log-frequency filterbank features followed by a
//! tanh MLP with a sigmoid output layer.
//!
//! Weights are one flat vector; the manifest lists `(fan_in, fan_out)` per
//! layer, each stored as a row-major `[fan_in, fan_out]` matrix followed by a
//! `[fan_out]` bias.
//!
//! Checkpoint layout (little-endian): the 8-byte magic `SCRPLW01`, a `u32`
//! header length, a JSON header (`{"version", "config", "layers", "count"}`),
//! then `count` `f64` weights.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapl_autodiff::fft::rfft;
use scrapl_autodiff::{value_and_grad, Complex64, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"SCRPLW01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub sample_rate: f64,
    pub num_samples: usize,
    pub n_filters: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub frame_size: usize,
    pub hop: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub init_seed: u64,
}

impl EncoderConfig {
    /// Desk-scale default for a signal of `num_samples` at `sample_rate`.
    pub fn desk(sample_rate: f64, num_samples: usize, outputs: usize) -> Self {
        Self {
            sample_rate,
            num_samples,
            n_filters: 32,
            fmin_hz: 64.0,
            fmax_hz: 0.45 * sample_rate,
            frame_size: 1024,
            hop: 512,
            hidden: vec![24, 24],
            outputs,
            init_seed: 0,
        }
    }

    pub fn frames(&self) -> usize {
        if self.num_samples < self.frame_size {
            0
        } else {
            1 + (self.num_samples - self.frame_size) / self.hop
        }
    }

    pub fn input_dim(&self) -> usize {
        self.frames() * self.n_filters
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(format!("encoder: {m}")));
        if self.frames() == 0 || self.hop == 0 {
            return bad("signal shorter than one frame, or zero hop");
        }
        if self.n_filters == 0 || self.outputs == 0 || self.hidden.contains(&0) {
            return bad("filter, hidden and output counts must be positive");
        }
        if !(self.fmin_hz > 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= self.sample_rate / 2.0) {
            return bad("need 0 < fmin < fmax <= Nyquist");
        }
        Ok(())
    }
}

/// One complex band: `(bin, weight)` pairs over positive frequencies.
#[derive(Clone, Debug)]
struct Band {
    taps: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<(usize, usize)>,
    window: Vec<f64>,
    bands: Vec<Band>,
    centers_hz: Vec<f64>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![cfg.input_dim()];
        widths.extend(&cfg.hidden);
        widths.push(cfg.outputs);
        let layers = widths.windows(2).map(|w| (w[0], w[1])).collect();

        let n = cfg.frame_size;
        let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let ratio = if cfg.n_filters > 1 {
            (cfg.fmax_hz / cfg.fmin_hz).powf(1.0 / (cfg.n_filters - 1) as f64)
        } else {
            2.0
        };
        let bin_hz = cfg.sample_rate / n as f64;
        let centers_hz: Vec<f64> = (0..cfg.n_filters).map(|b| cfg.fmin_hz * ratio.powi(b as i32)).collect();
        let bands = centers_hz
            .iter()
            .map(|&c| {
                // Adjacent bands cross at half amplitude; never narrower
                // than one bin.
                let sigma = (c * (ratio - 1.0) / (2.0 * (2.0 * 2f64.ln()).sqrt())).max(bin_hz);
                let taps = (0..=n / 2)
                    .filter_map(|k| {
                        let d = (k as f64 * bin_hz - c) / sigma;
                        // Evaluated at the frame centre: (-1)^k shifts by n/2.
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        (d.abs() <= 4.0).then(|| (k, sign * (-0.5 * d * d).exp()))
                    })
                    .collect();
                Band { taps }
            })
            .collect();
        Ok(Self { cfg, layers, window, bands, centers_hz })
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// `[frames, n_filters]` log1p band magnitudes. Features are data, not
    /// parameters, so they are computed off the tape.
    pub fn features(&self, x: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        if x.len() != c.num_samples {
            return Err(CoreError::Length { expected: c.num_samples, got: x.len() });
        }
        let gain = 2.0 / self.window.iter().sum::<f64>();
        let mut out = Vec::with_capacity(c.input_dim());
        for f in 0..c.frames() {
            let frame: Vec<f64> = x[f * c.hop..f * c.hop + c.frame_size]
                .iter()
                .zip(&self.window)
                .map(|(a, w)| a * w)
                .collect();
            let spec = rfft(&frame);
            for band in &self.bands {
                let z: Complex64 = band.taps.iter().map(|&(k, g)| spec[k] * g).sum();
                out.push((z.norm() * gain).ln_1p());
            }
        }
        Ok(Tensor::real(&[c.frames(), c.n_filters], out)?)
    }

    /// Flattened features of several signals as a `[B, D]` batch.
    pub fn feature_batch(&self, feats: &[&Tensor]) -> Result<Tensor> {
        let d = self.cfg.input_dim();
        let mut data = Vec::with_capacity(feats.len() * d);
        for f in feats {
            if f.numel() != d {
                return Err(CoreError::Length { expected: d, got: f.numel() });
            }
            data.extend_from_slice(f.data());
        }
        Ok(Tensor::real(&[feats.len(), d], data)?)
    }

    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::with_capacity(self.num_weights());
        for &(i, o) in &self.layers {
            let a = (6.0 / (i + o) as f64).sqrt();
            w.extend((0..i * o).map(|_| rng.random_range(-a..a)));
            w.extend(std::iter::repeat_n(0.0, o));
        }
        w
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.num_weights() {
            return Err(CoreError::Manifest { expected: self.num_weights(), got: len });
        }
        Ok(())
    }

    /// `θ̃ = E(w)` for a `[B, D]` feature batch, as a `[B, U]` node.
    pub fn encode(&self, tape: &mut Tape, feats: Var, w: Var) -> Result<Var> {
        self.check(tape.shape(w).iter().product())?;
        let d = self.cfg.input_dim();
        let shape = tape.shape(feats).to_vec();
        let numel: usize = shape.iter().product();
        let mut h = match shape.as_slice() {
            [_, k] if *k == d => feats,
            _ if numel == d => tape.reshape(feats, &[1, d])?,
            _ => return Err(CoreError::Length { expected: d, got: numel }),
        };
        let mut off = 0;
        for (l, &(i, o)) in self.layers.iter().enumerate() {
            let wm = tape.slice(w, 0, off, i * o)?;
            let wm = tape.reshape(wm, &[i, o])?;
            let b = tape.slice(w, 0, off + i * o, o)?;
            off += i * o + o;
            h = tape.affine(h, wm, b)?;
            h = if l + 1 == self.layers.len() { tape.sigmoid(h)? } else { tape.tanh(h)? };
        }
        Ok(h)
    }

    /// Off-tape `θ̃` for one feature tensor.
    pub fn predict(&self, feats: &Tensor, w: &[f64]) -> Result<Vec<f64>> {
        self.check(w.len())?;
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone())?;
        let wv = tape.constant(Tensor::vector(w.to_vec()))?;
        let y = self.encode(&mut tape, f, wv)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// `E_{x,u}(w)` and `∇_w E_{x,u}(w)`.
    pub fn coordinate_gradient(&self, feats: &Tensor, w: &[f64], u: usize) -> Result<(f64, Vec<f64>)> {
        self.check(w.len())?;
        if u >= self.cfg.outputs {
            return Err(CoreError::Invalid(format!("output {u} of {}", self.cfg.outputs)));
        }
        let f = |tape: &mut Tape, wv: Var| {
            let x = tape.constant(feats.clone())?;
            let y = self.encode(tape, x, wv).map_err(autodiff_err)?;
            let y = tape.slice(y, 1, u, 1)?;
            tape.sum(y)
        };
        let (v, g) = value_and_grad(&f, &Tensor::vector(w.to_vec()))?;
        Ok((v, g.into_real().expect("real gradient")))
    }

    /// `H(E_{x,u})(w)·z`.
    pub fn coordinate_hvp(&self, feats: &Tensor, w: &[f64], u: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check(w.len())?;
        let f = |tape: &mut Tape, wv: Var| {
            let x = tape.constant(feats.clone())?;
            let y = self.encode(tape, x, wv).map_err(autodiff_err)?;
            let y = tape.slice(y, 1, u, 1)?;
            tape.sum(y)
        };
        let h = scrapl_autodiff::hvp(&f, &Tensor::vector(w.to_vec()), &Tensor::vector(z.to_vec()))?;
        Ok(h.into_real().expect("real product"))
    }

    pub fn save(&self, path: &Path, w: &[f64]) -> Result<()> {
        self.check(w.len())?;
        let header = serde_json::json!({
            "version": VERSION,
            "config": self.cfg,
            "layers": self.layers,
            "count": w.len(),
        })
        .to_string();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        for v in w {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the encoder it describes and its weights.
    pub fn load(path: &Path) -> Result<(Self, Vec<f64>)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Invalid(format!("{} is not an encoder checkpoint", path.display())));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let header: serde_json::Value =
            serde_json::from_slice(&header).map_err(|e| CoreError::Invalid(format!("checkpoint header: {e}")))?;
        if header["version"].as_u64() != Some(VERSION as u64) {
            return Err(CoreError::Invalid(format!("unsupported checkpoint version {}", header["version"])));
        }
        let cfg: EncoderConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| CoreError::Invalid(format!("checkpoint config: {e}")))?;
        let enc = Self::new(cfg)?;
        let count = header["count"].as_u64().unwrap_or(0) as usize;
        enc.check(count)?;
        let mut buf = vec![0u8; 8 * count];
        f.read_exact(&mut buf)?;
        let w = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((enc, w))
    }
}

fn autodiff_err(e: CoreError) -> scrapl_autodiff::AutodiffError {
    match e {
        CoreError::Autodiff(a) => a,
        other => scrapl_autodiff::AutodiffError::Invalid { op: "encode", msg: other.to_string() },
    }
}
