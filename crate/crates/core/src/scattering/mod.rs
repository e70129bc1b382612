//! Joint time–frequency scattering with explicit path enumeration, plus the
//! per-path, full and multiscale-spectrogram losses.
//!
//! Path granularity: order 0 is a single lowpass path; order 1 has one path
//! per first-order octave (its `Q1` rows averaged in time, then in
//! frequency); order 2 has one path per admissible (rate, scale, spin).

mod filters;
mod mss;
mod paths;
mod transform;

pub use filters::{
    littlewood_paley, BandFilter, Filterbank, FilterbankSpec, FreqFilter, Rho, SIGMA_FLOOR_BINS,
    WINDOW_SIGMAS, XI_MAX,
};
pub use mss::{mss_loss, mss_loss_value, MSS_EPS, MSS_SIZES};
pub use paths::{admissible_rows, PathDescriptor, PathTable};
pub use transform::{circ_window, filter_usage, reset_filter_usage, ScatterCtx, Scattering};
