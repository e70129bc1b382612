//! Per-path Adam moments and SAGA memory over the path set.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Textbook Adam. `eps_inside` places ε under the square root.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub eps_inside: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, hyper: AdamHyper, eps_inside: bool) -> Self {
        Self { hyper, eps_inside, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// Advances the moments with `g` and returns the update direction.
    pub fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(g.len());
        for ((m, v), &gi) in self.m.iter_mut().zip(&mut self.v).zip(g) {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            let (mh, vh) = (*m / c1, *v / c2);
            out.push(if self.eps_inside { mh / (eps + vh).sqrt() } else { mh / (vh.sqrt() + eps) });
        }
        out
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        let d = self.direction(g);
        for (wi, di) in w.iter_mut().zip(d) {
            *wi -= lr * di;
        }
    }
}

pub fn sgd_step(w: &mut [f64], g: &[f64], lr: f64) {
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= lr * gi;
    }
}

/// Norms of the vectors involved in one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateNorms {
    pub g: f64,
    pub g_current: f64,
    pub g_saga: f64,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Optimizer state over `P` paths for a weight vector of length `dim`.
/// Storage is `P·dim` for each of `m`, `v` and `ĝ` regardless of how many
/// examples are trained on.
#[derive(Clone, Debug)]
pub struct ScraplState {
    paths: usize,
    dim: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    g_hat: Vec<f64>,
    tau: Vec<u64>,
    visited: Vec<bool>,
    n_visited: usize,
    running_sum: Vec<f64>,
    k: u64,
    pi: Vec<f64>,
    sampler: WeightedIndex<f64>,
    pub hyper: AdamHyper,
    pub p_adam: bool,
    pub p_saga: bool,
    /// Shared moments used when `p_adam` is off.
    global: Adam,
}

impl ScraplState {
    pub fn new(paths: usize, dim: usize, hyper: AdamHyper, p_adam: bool, p_saga: bool) -> Result<Self> {
        if paths == 0 {
            return Err(CoreError::Invalid("need at least one path".into()));
        }
        let pi = vec![1.0 / paths as f64; paths];
        Ok(Self {
            paths,
            dim,
            m: vec![0.0; paths * dim],
            v: vec![0.0; paths * dim],
            g_hat: vec![0.0; paths * dim],
            tau: vec![0; paths],
            visited: vec![false; paths],
            n_visited: 0,
            running_sum: vec![0.0; dim],
            k: 0,
            sampler: WeightedIndex::new(&pi).expect("uniform weights"),
            pi,
            hyper,
            p_adam,
            p_saga,
            global: Adam::new(dim, hyper, true),
        })
    }

    pub fn num_paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn tau(&self, p: usize) -> u64 {
        self.tau[p]
    }

    pub fn visited(&self) -> usize {
        self.n_visited
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn first_moment(&self, p: usize) -> &[f64] {
        &self.m[p * self.dim..(p + 1) * self.dim]
    }

    pub fn second_moment(&self, p: usize) -> &[f64] {
        &self.v[p * self.dim..(p + 1) * self.dim]
    }

    pub fn memory(&self, p: usize) -> &[f64] {
        &self.g_hat[p * self.dim..(p + 1) * self.dim]
    }

    pub fn running_sum(&self) -> &[f64] {
        &self.running_sum
    }

    /// Replaces the sampling distribution; it must be nonnegative with a
    /// positive, finite sum, and is renormalized.
    pub fn set_pi(&mut self, pi: &[f64]) -> Result<()> {
        if pi.len() != self.paths {
            return Err(CoreError::Invalid(format!("π has {} entries for {} paths", pi.len(), self.paths)));
        }
        if pi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CoreError::Invalid("π entries must be finite and nonnegative".into()));
        }
        let total: f64 = pi.iter().sum();
        if !(total > 0.0) {
            return Err(CoreError::Invalid("π has no mass".into()));
        }
        self.pi = pi.iter().map(|v| v / total).collect();
        self.sampler = WeightedIndex::new(&self.pi).map_err(|e| CoreError::Invalid(format!("π: {e}")))?;
        Ok(())
    }

    /// Draws a path index from π.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Starts iteration `k+1` and returns the new `k`.
    pub fn begin_step(&mut self) -> u64 {
        self.k += 1;
        self.k
    }

    /// Moment update for path `p` at the current `k`; returns `g_current`.
    pub fn p_adam_update(&mut self, p: usize, g: &[f64]) -> Vec<f64> {
        assert!(self.tau[p] < self.k, "begin_step must precede the update");
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let big_p = self.paths as f64;
        let gap = (self.k - self.tau[p]) as f64 / big_p;
        let (d1, d2) = (beta1.powf(gap), beta2.powf(gap));
        let c1 = 1.0 - beta1.powf(self.k as f64 / big_p);
        let c2 = 1.0 - beta2.powf(self.k as f64 / big_p);
        let r = p * self.dim..(p + 1) * self.dim;
        let mut out = Vec::with_capacity(self.dim);
        for ((m, v), &gi) in self.m[r.clone()].iter_mut().zip(&mut self.v[r]).zip(g) {
            *m = d1 * *m + (1.0 - d1) * gi;
            *v = d2 * *v + (1.0 - d2) * gi * gi;
            out.push((*m / c1) / (eps + *v / c2).sqrt());
        }
        self.tau[p] = self.k;
        out
    }

    /// SAGA step over paths: applies `w ← w − lr·g_SAGA` using the memory as
    /// it was before this step, then stores `g_current` for `p`.
    pub fn p_saga_update(&mut self, p: usize, g_current: &[f64], w: &mut [f64], lr: f64) -> Vec<f64> {
        let denom = self.n_visited.max(1) as f64;
        let r = p * self.dim..(p + 1) * self.dim;
        let mut g_saga = Vec::with_capacity(self.dim);
        for ((gc, gh), s) in g_current.iter().zip(&self.g_hat[r.clone()]).zip(&self.running_sum) {
            g_saga.push(gc - gh + s / denom);
        }
        for (wi, gs) in w.iter_mut().zip(&g_saga) {
            *wi -= lr * gs;
        }
        for ((gh, s), gc) in self.g_hat[r].iter_mut().zip(&mut self.running_sum).zip(g_current) {
            *s += gc - *gh;
            *gh = *gc;
        }
        if !self.visited[p] {
            self.visited[p] = true;
            self.n_visited += 1;
        }
        g_saga
    }

    /// One full update for path `p` with raw gradient `g`, following the
    /// enabled flags. Call `begin_step` first.
    pub fn apply(&mut self, p: usize, g: &[f64], w: &mut [f64], lr: f64) -> UpdateNorms {
        let g_current = if self.p_adam {
            self.p_adam_update(p, g)
        } else {
            self.tau[p] = self.k;
            self.global.direction(g)
        };
        let g_saga = if self.p_saga {
            self.p_saga_update(p, &g_current, w, lr)
        } else {
            sgd_step(w, &g_current, lr);
            g_current.clone()
        };
        UpdateNorms { g: norm(g), g_current: norm(&g_current), g_saga: norm(&g_saga) }
    }

    /// Largest absolute difference between the maintained running sum and a
    /// fresh sum over visited paths.
    pub fn running_sum_error(&self) -> f64 {
        let mut fresh = vec![0.0; self.dim];
        for p in (0..self.paths).filter(|&p| self.visited[p]) {
            for (f, g) in fresh.iter_mut().zip(self.memory(p)) {
                *f += g;
            }
        }
        fresh.iter().zip(&self.running_sum).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bytes held by the state's buffers.
    pub fn allocated_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        f * (self.m.capacity() + self.v.capacity() + self.g_hat.capacity() + self.running_sum.capacity() + self.pi.capacity())
            + std::mem::size_of::<u64>() * self.tau.capacity()
            + self.visited.capacity()
            + f * 2 * self.global.m.capacity()
    }
}
