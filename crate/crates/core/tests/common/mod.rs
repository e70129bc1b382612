#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapl_core::encoder::{Encoder, EncoderConfig};
use scrapl_core::optimizer::{Example, Problem};
use scrapl_core::scattering::{FilterbankSpec, Rho, Scattering};
use scrapl_core::synths::{ChirpletConfig, ChirpletSynth, Synth};

pub fn tiny_spec() -> FilterbankSpec {
    FilterbankSpec { j: 4, q1: 2, q2: 1, j_fr: 1, q_fr: 1, t_avg: 64, f_avg: 4, n: 512, rho: Rho::Identity, sample_rate: 2048.0 }
}

pub fn tiny_synth() -> ChirpletSynth {
    let cfg = ChirpletConfig { sample_rate: 2048.0, num_samples: 512, shift_range: 32, ..ChirpletConfig::desk(4).unwrap() };
    ChirpletSynth::new(cfg).unwrap()
}

pub fn tiny_encoder() -> Encoder {
    let mut cfg = EncoderConfig::desk(2048.0, 512, 2);
    cfg.frame_size = 128;
    cfg.hop = 64;
    cfg.n_filters = 8;
    cfg.hidden = vec![6];
    Encoder::new(cfg).unwrap()
}

pub fn tiny_problem(n: usize, seed: u64) -> Problem {
    let synth = tiny_synth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|id| {
            let theta = vec![rng.random::<f64>(), rng.random::<f64>()];
            let s = rng.random::<u64>();
            let audio = synth.render(&theta, s).unwrap();
            Example { id, theta, seed: s, audio }
        })
        .collect();
    Problem::new(Arc::new(synth), Scattering::new(&tiny_spec()).unwrap(), tiny_encoder(), examples).unwrap()
}

/// Desk-scale chirplet problem on configuration `config` with `n` log-uniform examples.
pub fn desk_chirplet_problem(config: usize, n: usize, seed: u64) -> Problem {
    let synth = ChirpletSynth::new(ChirpletConfig::desk(config).unwrap()).unwrap();
    let spec = FilterbankSpec { j: 11, q1: 8, q2: 2, j_fr: 3, q_fr: 2, t_avg: 2048, f_avg: 8, n: 8192, rho: Rho::Identity, sample_rate: 4096.0 };
    let encoder = Encoder::new(EncoderConfig::desk(4096.0, 8192, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|id| {
            let theta = vec![rng.random::<f64>(), rng.random::<f64>()];
            let s = rng.random::<u64>();
            let audio = synth.render(&theta, s).unwrap();
            Example { id, theta, seed: s, audio }
        })
        .collect();
    Problem::new(Arc::new(synth), Scattering::new(&spec).unwrap(), encoder, examples).unwrap()
}
