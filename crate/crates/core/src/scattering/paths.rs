//! Enumeration of scattering paths.

use std::io::Write;
use std::ops::Range;

use super::filters::Filterbank;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct PathDescriptor {
    pub id: usize,
    pub order: u8,
    /// First-order rows this path reads.
    pub rows: Range<usize>,
    /// Index into `psi2` for order-2 paths.
    pub rate: Option<usize>,
    pub rate_hz: f64,
    /// Index among frequency-axis magnitudes; `None` for the lowpass.
    pub scale: Option<usize>,
    /// Frequency-axis centre in cycles per octave.
    pub scale_cpo: f64,
    pub spin: i8,
    pub frames: usize,
    pub bins: usize,
}

impl PathDescriptor {
    pub fn numel(&self) -> usize {
        self.frames * self.bins
    }
}

/// Dense, stable path indexing for one filterbank. Layout: the order-0 path,
/// then one order-1 path per first-order octave, then for each admissible
/// rate (highest first) the spin ±1 paths of every frequency scale followed
/// by the spin-0 path.
#[derive(Clone, Debug)]
pub struct PathTable {
    pub entries: Vec<PathDescriptor>,
}

/// Number of leading first-order rows whose envelope bandwidth admits rate
/// `k`: the rate's upper edge must not exceed the row's.
pub fn admissible_rows(fb: &Filterbank, k: usize) -> usize {
    let r = &fb.psi2[k];
    let edge = r.center + 4.0 * r.sigma;
    fb.psi1
        .iter()
        .take_while(|f| edge <= 4.0 * f.sigma)
        .count()
}

impl PathTable {
    pub fn enumerate(fb: &Filterbank) -> Self {
        let spec = &fb.spec;
        let frames = spec.frames();
        let stride = spec.freq_stride();
        let m = spec.padded_len() as f64;
        let mut entries = Vec::new();
        let mut push = |mut d: PathDescriptor| {
            d.id = entries.len();
            entries.push(d);
        };
        let lambda = spec.n_first_order();
        push(PathDescriptor {
            id: 0,
            order: 0,
            rows: 0..lambda,
            rate: None,
            rate_hz: 0.0,
            scale: None,
            scale_cpo: 0.0,
            spin: 0,
            frames,
            bins: 1,
        });
        for j in 0..spec.j {
            push(PathDescriptor {
                id: 0,
                order: 1,
                rows: j * spec.q1..(j + 1) * spec.q1,
                rate: None,
                rate_hz: 0.0,
                scale: None,
                scale_cpo: 0.0,
                spin: 0,
                frames,
                bins: spec.q1.div_ceil(stride),
            });
        }
        for k in 0..fb.psi2.len() {
            let rows = admissible_rows(fb, k);
            if rows == 0 {
                continue;
            }
            let rate_hz = fb.psi2[k].center / m * spec.sample_rate;
            let bins = rows.div_ceil(stride);
            for f in &fb.psi_fr {
                push(PathDescriptor {
                    id: 0,
                    order: 2,
                    rows: 0..rows,
                    rate: Some(k),
                    rate_hz,
                    scale: Some(f.scale),
                    scale_cpo: f.center * spec.q1 as f64,
                    spin: f.spin,
                    frames,
                    bins,
                });
            }
            push(PathDescriptor {
                id: 0,
                order: 2,
                rows: 0..rows,
                rate: Some(k),
                rate_hz,
                scale: None,
                scale_cpo: 0.0,
                spin: 0,
                frames,
                bins,
            });
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, p: usize) -> Option<&PathDescriptor> {
        self.entries.get(p)
    }

    /// CSV with columns `path_id, order, rate_hz, scale_cpo, spin, frames, bins`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "order", "rate_hz", "scale_cpo", "spin", "frames", "bins"])?;
        for e in &self.entries {
            w.write_record([
                e.id.to_string(),
                e.order.to_string(),
                format!("{:.6}", e.rate_hz),
                format!("{:.6}", e.scale_cpo),
                e.spin.to_string(),
                e.frames.to_string(),
                e.bins.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
