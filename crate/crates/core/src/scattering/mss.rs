//! Multiscale spectrogram distance (linear plus log magnitudes).

use scrapl_autodiff::{Tape, Tensor, Var};

use crate::error::Result;

pub const MSS_SIZES: [usize; 3] = [2048, 512, 128];
pub const MSS_EPS: f64 = 1e-7;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT frames of `x`, `[frames, size]`, with hop `size/4`.
/// Frame order is grouped by phase offset, which the L1 sums ignore.
fn stft_mag(tape: &mut Tape, x: Var, size: usize) -> Result<Option<Var>> {
    let n = tape.shape(x)[0];
    let hop = size / 4;
    let mut parts = Vec::new();
    for o in 0..4 {
        let start = o * hop;
        if start + size > n {
            continue;
        }
        let count = (n - start) / size;
        let s = tape.slice(x, 0, start, count * size)?;
        parts.push(tape.reshape(s, &[count, size])?);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let frames = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let w = tape.constant(Tensor::vector(hann(size)))?;
    let y = tape.mul(frames, w)?;
    let y = tape.fft(y)?;
    Ok(Some(tape.modulus(y)?))
}

/// Σ over sizes of `‖|S|−|S̃|‖₁ + ‖log(|S|+ε)−log(|S̃|+ε)‖₁`. Sizes longer
/// than the signal are skipped.
pub fn mss_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let mut terms = Vec::new();
    for &size in &MSS_SIZES {
        let (Some(a), Some(b)) = (stft_mag(tape, x, size)?, stft_mag(tape, x_hat, size)?) else {
            continue;
        };
        let d = tape.sub(a, b)?;
        let d = tape.modulus(d)?;
        terms.push(tape.sum(d)?);
        // log(s + ε) − log(t + ε) = log1p(s/ε) − log1p(t/ε)
        let la = tape.scalar_mul(a, 1.0 / MSS_EPS)?;
        let la = tape.log1p(la)?;
        let lb = tape.scalar_mul(b, 1.0 / MSS_EPS)?;
        let lb = tape.log1p(lb)?;
        let d = tape.sub(la, lb)?;
        let d = tape.modulus(d)?;
        terms.push(tape.sum(d)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    Ok(tape.add_many(&terms)?)
}

pub fn mss_loss_value(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(x.to_vec()))?;
    let b = tape.constant(Tensor::vector(x_hat.to_vec()))?;
    let l = mss_loss(&mut tape, a, b)?;
    Ok(tape.scalar(l).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn click(n: usize, at: usize) -> Vec<f64> {
        let mut x = vec![0.0; n];
        for (i, v) in x.iter_mut().enumerate().skip(at).take(16) {
            *v = (-((i - at) as f64) / 4.0).exp();
        }
        x
    }

    #[test]
    fn identical_signals_have_zero_distance() {
        let x: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.05).sin()).collect();
        assert_eq!(mss_loss_value(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn shifted_click_is_strictly_positive() {
        let a = click(4096, 1000);
        let b = click(4096, 1100);
        assert!(mss_loss_value(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn nonnegative_for_random_pairs() {
        let mut s = 1u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..5 {
            let a: Vec<f64> = (0..1024).map(|_| next()).collect();
            let b: Vec<f64> = (0..1024).map(|_| next()).collect();
            assert!(mss_loss_value(&a, &b).unwrap() >= 0.0);
        }
    }
}
