use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place DFT of every contiguous length-`n` chunk of `data`.
/// The inverse is normalized by `1/n`, so `inverse(forward(x)) == x`.
pub fn fft_rows(data: &mut [Complex64], n: usize, inverse: bool) {
    if n == 0 || data.is_empty() {
        return;
    }
    debug_assert_eq!(data.len() % n, 0);
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    plan.process(data);
    if inverse {
        let s = 1.0 / n as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }
}

/// Forward DFT of a single vector, returning a new buffer.
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut v = x.to_vec();
    fft_rows(&mut v, x.len(), false);
    v
}

/// Normalized inverse DFT of a single vector.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut v = x.to_vec();
    fft_rows(&mut v, x.len(), true);
    v
}

/// Forward DFT of a real vector.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    fft_rows(&mut v, x.len(), false);
    v
}
