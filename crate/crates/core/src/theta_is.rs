//! Path importance from the curvature of per-parameter sensitivities.
//!
//! For an example `x`, parameter `u` and path `p`, the sensitivity is the
//! partial derivative of the path loss through the decoder with respect to
//! `θ_u`, evaluated at the encoder's prediction. Its curvature is the largest
//! eigenvalue magnitude of the weight-space derivative of
//! `v(w) = s(w)·∇E_u(w)`. Averaging curvatures over examples gives the
//! importance matrix `C`, and row-normalizing `C` gives the sampling
//! distribution over paths.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{CoreError, Result};
use crate::optimizer::{decoder_seed, Problem};
use crate::scattering::PathTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenConfig {
    pub max_iter: usize,
    /// Stop once successive estimates differ by less than this, relatively.
    pub rel_tol: f64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self { max_iter: 20, rel_tol: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenEstimate {
    /// Signed eigenvalue of largest magnitude.
    pub value: f64,
    pub vector: Vec<f64>,
    /// Matrix-vector products spent.
    pub iterations: usize,
    pub converged: bool,
}

impl EigenEstimate {
    fn invalid(dim: usize, iterations: usize) -> Self {
        Self { value: f64::NAN, vector: vec![0.0; dim], iterations, converged: false }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(CoreError::Invalid("start vector must be nonzero and finite".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm Gaussian vector from `seed`.
pub fn start_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Power iteration on a symmetric operator, with the Rayleigh-Ritz step
/// taken over every iterate so far (Lanczos with full
/// reorthogonalization). Each iteration costs one product. The estimate
/// is the Ritz value of largest magnitude; it stops when two successive
/// estimates agree to `rel_tol` and the Ritz residual is below
/// `rel_tol·|λ|`, or when the Krylov space becomes invariant.
pub fn top_eigenpair<F>(start: &[f64], cfg: &EigenConfig, mut matvec: F) -> Result<EigenEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let dim = start.len();
    let mut q = vec![unit(start)?];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut prev: Option<f64> = None;
    let mut scale = 0.0f64;
    let max_iter = cfg.max_iter.max(1);
    for j in 0..max_iter {
        let mut w = matvec(&q[j])?;
        if w.len() != dim {
            return Err(CoreError::Length { expected: dim, got: w.len() });
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Ok(EigenEstimate::invalid(dim, j + 1));
        }
        scale = scale.max(norm(&w));
        alpha.push(dot(&q[j], &w));
        for _ in 0..2 {
            for qi in &q {
                let c = dot(qi, &w);
                w.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
            }
        }
        let b = norm(&w);
        let k = j + 1;
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let idx = (0..k)
            .max_by(|&a, &c| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[c].abs()))
            .expect("nonempty");
        let theta = eig.eigenvalues[idx];
        let residual = b * eig.eigenvectors[(k - 1, idx)].abs();
        let invariant = b <= 1e-12 * scale.max(f64::MIN_POSITIVE) || k == dim;
        let settled = prev.is_some_and(|pv| (theta - pv).abs() <= cfg.rel_tol * theta.abs())
            && residual <= cfg.rel_tol * theta.abs();
        if invariant || settled || k == max_iter {
            let mut vector = vec![0.0; dim];
            for (i, qi) in q.iter().enumerate() {
                let c = eig.eigenvectors[(i, idx)];
                vector.iter_mut().zip(qi).for_each(|(v, x)| *v += c * x);
            }
            return Ok(EigenEstimate { value: theta, vector, iterations: k, converged: invariant || settled });
        }
        prev = Some(theta);
        beta.push(b);
        q.push(w.iter().map(|x| x / b).collect());
    }
    unreachable!("loop returns on its last iteration")
}

/// Plain power iteration with Rayleigh-quotient stopping. Works for
/// non-symmetric operators whose dominant eigenvalue is real.
pub fn power_iteration<F>(start: &[f64], cfg: &EigenConfig, mut matvec: F) -> Result<EigenEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let dim = start.len();
    let mut z = unit(start)?;
    let mut prev: Option<f64> = None;
    let max_iter = cfg.max_iter.max(1);
    for it in 1..=max_iter {
        let y = matvec(&z)?;
        if y.len() != dim {
            return Err(CoreError::Length { expected: dim, got: y.len() });
        }
        if !y.iter().all(|x| x.is_finite()) {
            return Ok(EigenEstimate::invalid(dim, it));
        }
        let rq = dot(&z, &y);
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok(EigenEstimate { value: 0.0, vector: z, iterations: it, converged: true });
        }
        let settled = prev.is_some_and(|pv| (rq - pv).abs() <= cfg.rel_tol * rq.abs());
        if settled || it == max_iter {
            return Ok(EigenEstimate { value: rq, vector: z, iterations: it, converged: settled });
        }
        prev = Some(rq);
        z = y.into_iter().map(|x| x / ny).collect();
    }
    unreachable!("loop returns on its last iteration")
}

/// The `k` eigenpairs of largest magnitude, found one at a time on the
/// operator deflated by the pairs already found.
pub fn deflated_eigenpairs<F>(dim: usize, k: usize, seed: u64, cfg: &EigenConfig, mut matvec: F) -> Result<Vec<EigenEstimate>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut found: Vec<EigenEstimate> = Vec::new();
    for i in 0..k.min(dim) {
        let mut start = start_vector(dim, seed.wrapping_add(i as u64));
        for e in &found {
            let c = dot(&e.vector, &start);
            start.iter_mut().zip(&e.vector).for_each(|(s, v)| *s -= c * v);
        }
        let est = {
            let found = &found;
            top_eigenpair(&start, cfg, |z| {
                let mut y = matvec(z)?;
                for e in found {
                    let c = e.value * dot(&e.vector, z);
                    y.iter_mut().zip(&e.vector).for_each(|(a, v)| *a -= c * v);
                }
                Ok(y)
            })?
        };
        let n = norm(&est.vector);
        let vector = if n > 0.0 { est.vector.iter().map(|x| x / n).collect() } else { est.vector.clone() };
        found.push(EigenEstimate { vector, ..est });
    }
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaIsConfig {
    /// Examples averaged over.
    pub n_is: usize,
    /// Probability floor; `None` means `0.1/P`.
    pub floor: Option<f64>,
    pub eigen: EigenConfig,
    pub seed: u64,
    /// Step in normalized parameter space for the loss Hessian.
    pub fd_step: f64,
    /// Symmetrize the sensitivity Jacobian; otherwise use its transpose
    /// with plain power iteration.
    pub symmetrize: bool,
}

impl Default for ThetaIsConfig {
    fn default() -> Self {
        Self { n_is: 32, floor: None, eigen: EigenConfig::default(), seed: 0, fd_step: 1e-4, symmetrize: true }
    }
}

/// Sensitivities of one `(x, p)` pair for all parameters, plus the
/// parameter-space Hessian of the path loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSensitivity {
    pub theta: Vec<f64>,
    pub loss: f64,
    /// `s_u` for every `u`.
    pub s: Vec<f64>,
    /// `U×U`, row-major, symmetrized.
    pub hessian: Vec<f64>,
}

/// `s_{x,u,p}(w)` for example `n`, decoder seed `seed`.
pub fn sensitivity(problem: &Problem, n: usize, w: &[f64], u: usize, p: usize, seed: u64) -> Result<f64> {
    let theta = problem.predict(n, w)?;
    if u >= theta.len() {
        return Err(CoreError::Invalid(format!("parameter {u} of {}", theta.len())));
    }
    Ok(problem.theta_gradient(n, &theta, p, seed)?.1[u])
}

/// Sensitivities and the loss Hessian at the encoder's prediction. The
/// Hessian comes from central differences of tape gradients, shortened
/// one-sidedly at the edges of `[0, 1]`.
pub fn path_sensitivity(problem: &Problem, n: usize, w: &[f64], p: usize, seed: u64, h: f64) -> Result<PathSensitivity> {
    let theta = problem.predict(n, w)?;
    let u = theta.len();
    let (loss, s) = problem.theta_gradient(n, &theta, p, seed)?;
    let mut hess = vec![0.0; u * u];
    for j in 0..u {
        let lo = (theta[j] - h).max(0.0);
        let hi = (theta[j] + h).min(1.0);
        let mut tl = theta.clone();
        tl[j] = lo;
        let mut th = theta.clone();
        th[j] = hi;
        let gl = problem.theta_gradient(n, &tl, p, seed)?.1;
        let gh = problem.theta_gradient(n, &th, p, seed)?.1;
        for i in 0..u {
            hess[i * u + j] = (gh[i] - gl[i]) / (hi - lo);
        }
    }
    for i in 0..u {
        for j in 0..i {
            let m = 0.5 * (hess[i * u + j] + hess[j * u + i]);
            hess[i * u + j] = m;
            hess[j * u + i] = m;
        }
    }
    Ok(PathSensitivity { theta, loss, s, hessian: hess })
}

/// Largest eigenvalue magnitude of `∇_w(s_u ∇E_u)` given the path's
/// sensitivities. With `symmetrize` the operator is
/// `½(∇s ∇E_uᵀ + ∇E_u ∇sᵀ) + s_u H(E_u)`; otherwise its transpose part
/// `∇s ∇E_uᵀ + s_u H(E_u)` is iterated directly.
pub fn curvature_from(
    encoder: &Encoder,
    feats: &scrapl_autodiff::Tensor,
    w: &[f64],
    u: usize,
    ps: &PathSensitivity,
    cfg: &ThetaIsConfig,
    seed: u64,
) -> Result<EigenEstimate> {
    let nu = ps.s.len();
    let grads: Vec<Vec<f64>> = (0..nu).map(|j| encoder.coordinate_gradient(feats, w, j).map(|g| g.1)).collect::<Result<_>>()?;
    let dim = w.len();
    let mut ds = vec![0.0; dim];
    for (j, g) in grads.iter().enumerate() {
        let c = ps.hessian[j * nu + u];
        ds.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
    }
    let a = &grads[u];
    let s = ps.s[u];
    let sym = cfg.symmetrize;
    let matvec = |z: &[f64]| -> Result<Vec<f64>> {
        let az = dot(a, z);
        let mut y: Vec<f64> = if sym {
            let sz = dot(&ds, z);
            ds.iter().zip(a).map(|(d, ai)| 0.5 * (d * az + ai * sz)).collect()
        } else {
            ds.iter().map(|d| d * az).collect()
        };
        if s != 0.0 {
            let hz = encoder.coordinate_hvp(feats, w, u, z)?;
            y.iter_mut().zip(hz).for_each(|(v, h)| *v += s * h);
        }
        Ok(y)
    };
    let start = start_vector(dim, seed);
    if sym {
        top_eigenpair(&start, &cfg.eigen, matvec)
    } else {
        power_iteration(&start, &cfg.eigen, matvec)
    }
}

/// Seed of the `(n, u, p)` start vector.
pub fn triple_seed(master: u64, n: usize, u: usize, p: usize) -> u64 {
    decoder_seed(master ^ 0x7E7A_1500_0000_0000, ((u as u64) << 32) | p as u64, n)
}

/// One curvature estimate with the example's own decoder seed.
pub fn curvature(problem: &Problem, n: usize, w: &[f64], u: usize, p: usize, cfg: &ThetaIsConfig) -> Result<EigenEstimate> {
    let seed = problem.example(n).seed;
    let ps = path_sensitivity(problem, n, w, p, seed, cfg.fd_step)?;
    curvature_from(&problem.encoder, problem.features(n), w, u, &ps, cfg, triple_seed(cfg.seed, n, u, p))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportanceMeta {
    pub spec_hash: String,
    pub encoder_hash: String,
    pub seed: u64,
    /// Example ids averaged over, in order.
    pub examples: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    pub num_params: usize,
    pub num_paths: usize,
    /// `U×P`, row-major.
    pub c: Vec<f64>,
    /// Samples kept per entry after dropping non-finite ones.
    pub counts: Vec<usize>,
    pub n_examples: usize,
    pub unconverged: usize,
    pub meta: ImportanceMeta,
    pub warnings: Vec<String>,
}

impl ImportanceMatrix {
    pub fn get(&self, u: usize, p: usize) -> f64 {
        self.c[u * self.num_paths + p]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.c[u * self.num_paths..(u + 1) * self.num_paths]
    }

    /// Rows without a positive entry.
    pub fn degenerate_rows(&self) -> Vec<usize> {
        (0..self.num_params).filter(|&u| !self.row(u).iter().any(|&c| c > 0.0)).collect()
    }
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn spec_hash(problem: &Problem) -> String {
    digest(&serde_json::to_vec(problem.scattering.spec()).unwrap_or_default())
}

pub fn encoder_hash(encoder: &Encoder, w: &[f64]) -> String {
    let mut bytes = serde_json::to_vec(&encoder.cfg).unwrap_or_default();
    w.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
    digest(&bytes)
}

/// `C_{u,p}` averaged over `ids`. Triples run in parallel; the mean is
/// summed in the order of `ids`, so the result does not depend on the
/// schedule.
pub fn build_importance(problem: &Problem, ids: &[usize], w: &[f64], cfg: &ThetaIsConfig) -> Result<ImportanceMatrix> {
    let nu = problem.synth.num_params();
    let np = problem.num_paths();
    if ids.is_empty() {
        return Err(CoreError::Invalid("importance needs at least one example".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&n| n >= problem.len()) {
        return Err(CoreError::Invalid(format!("example {bad} of {}", problem.len())));
    }
    let jobs: Vec<(usize, usize)> = ids.iter().flat_map(|&n| (0..np).map(move |p| (n, p))).collect();
    // Per job: one (value, converged) per parameter; `None` when non-finite.
    let results: Vec<Vec<Option<(f64, bool)>>> = jobs
        .par_iter()
        .map(|&(n, p)| -> Result<Vec<Option<(f64, bool)>>> {
            let seed = problem.example(n).seed;
            let ps = path_sensitivity(problem, n, w, p, seed, cfg.fd_step)?;
            let finite = ps.s.iter().chain(&ps.hessian).all(|v| v.is_finite());
            (0..nu)
                .map(|u| {
                    if !finite {
                        return Ok(None);
                    }
                    let e = curvature_from(&problem.encoder, problem.features(n), w, u, &ps, cfg, triple_seed(cfg.seed, n, u, p))?;
                    Ok(e.value.is_finite().then_some((e.value.abs(), e.converged)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; nu * np];
    let mut counts = vec![0usize; nu * np];
    let mut unconverged = 0;
    for (&(_, p), r) in jobs.iter().zip(&results) {
        for (u, v) in r.iter().enumerate() {
            if let Some((c, conv)) = v {
                sum[u * np + p] += c;
                counts[u * np + p] += 1;
                unconverged += usize::from(!conv);
            }
        }
    }
    let mut warnings = Vec::new();
    let dropped = counts.iter().map(|&c| ids.len() - c).sum::<usize>();
    if dropped > 0 {
        warnings.push(format!("{dropped} non-finite curvature samples dropped"));
    }
    let empty = counts.iter().filter(|&&c| c == 0).count();
    if empty > 0 {
        warnings.push(format!("{empty} entries had no finite samples and were set to zero"));
    }
    if unconverged > 0 {
        warnings.push(format!("{unconverged} eigenvalue estimates stopped at the iteration limit"));
    }
    let c = sum.iter().zip(&counts).map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 }).collect();
    let mut m = ImportanceMatrix {
        num_params: nu,
        num_paths: np,
        c,
        counts,
        n_examples: ids.len(),
        unconverged,
        meta: ImportanceMeta {
            spec_hash: spec_hash(problem),
            encoder_hash: encoder_hash(&problem.encoder, w),
            seed: cfg.seed,
            examples: ids.to_vec(),
        },
        warnings,
    };
    let degenerate = m.degenerate_rows();
    if !degenerate.is_empty() {
        m.warnings.push(format!("degenerate rows {degenerate:?}"));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathDistribution {
    pub pi: Vec<f64>,
    pub floor: f64,
    pub warnings: Vec<String>,
}

pub fn default_floor(num_paths: usize) -> f64 {
    0.1 / num_paths as f64
}

/// Row-normalizes, averages rows, then mixes in the floor:
/// `π = (1 − Pε)·π_raw + ε`. Rows without positive mass count as uniform.
pub fn pi_from_rows(rows: &[&[f64]], floor: f64) -> Result<PathDistribution> {
    let np = rows.first().map_or(0, |r| r.len());
    if np == 0 || rows.iter().any(|r| r.len() != np) {
        return Err(CoreError::Invalid("importance rows must be nonempty and equally long".into()));
    }
    if rows.iter().flat_map(|r| r.iter()).any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(CoreError::Invalid("importance entries must be finite and nonnegative".into()));
    }
    if !(floor >= 0.0 && floor * np as f64 <= 1.0) {
        return Err(CoreError::Range { name: "floor", value: floor, min: 0.0, max: 1.0 / np as f64 });
    }
    let mut raw = vec![0.0; np];
    let mut degenerate = 0;
    for r in rows {
        let total: f64 = r.iter().sum();
        if total > 0.0 {
            raw.iter_mut().zip(r.iter()).for_each(|(a, c)| *a += c / total);
        } else {
            degenerate += 1;
            raw.iter_mut().for_each(|a| *a += 1.0 / np as f64);
        }
    }
    let mut warnings = Vec::new();
    if degenerate == rows.len() {
        warnings.push("all importance rows are degenerate; using uniform".to_string());
    }
    let k = 1.0 - np as f64 * floor;
    let mut pi: Vec<f64> = raw.iter().map(|a| k * a / rows.len() as f64 + floor).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(PathDistribution { pi, floor, warnings })
}

pub fn build_pi(m: &ImportanceMatrix, floor: f64) -> Result<PathDistribution> {
    let rows: Vec<&[f64]> = (0..m.num_params).map(|u| m.row(u)).collect();
    let mut d = pi_from_rows(&rows, floor)?;
    d.warnings.extend(m.warnings.iter().cloned());
    Ok(d)
}

fn write_meta<W: Write>(out: &mut W, meta: &ImportanceMeta) -> Result<()> {
    writeln!(out, "# spec_hash={}", meta.spec_hash)?;
    writeln!(out, "# encoder_hash={}", meta.encoder_hash)?;
    writeln!(out, "# seed={}", meta.seed)?;
    let ids: Vec<String> = meta.examples.iter().map(|n| n.to_string()).collect();
    writeln!(out, "# examples={}", ids.join(" "))?;
    Ok(())
}

pub fn write_importance_csv<W: Write>(mut out: W, m: &ImportanceMatrix) -> Result<()> {
    write_meta(&mut out, &m.meta)?;
    writeln!(out, "# n_examples={}", m.n_examples)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "p", "c"])?;
    for u in 0..m.num_params {
        for p in 0..m.num_paths {
            w.write_record(&[u.to_string(), p.to_string(), m.get(u, p).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pi_csv<W: Write>(mut out: W, d: &PathDistribution, meta: &ImportanceMeta) -> Result<()> {
    write_meta(&mut out, meta)?;
    writeln!(out, "# floor={}", d.floor)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "pi"])?;
    for (p, v) in d.pi.iter().enumerate() {
        w.write_record(&[p.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `pi` column of a file written by [`write_pi_csv`].
pub fn read_pi_csv<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut pi = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let p: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| CoreError::Invalid(format!("bad path index on row {i}")))?;
        let v: f64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| CoreError::Invalid(format!("bad probability on row {i}")))?;
        if p != i {
            return Err(CoreError::Invalid(format!("row {i} holds path {p}")));
        }
        pi.push(v);
    }
    Ok(pi)
}

/// `π` against path coordinates, one row per path.
pub fn write_heatmap_csv<W: Write>(out: W, table: &PathTable, pi: &[f64]) -> Result<()> {
    if pi.len() != table.len() {
        return Err(CoreError::Length { expected: table.len(), got: pi.len() });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "order", "rate_hz", "scale_cpo", "spin", "pi"])?;
    for (e, v) in table.entries.iter().zip(pi) {
        w.write_record(&[
            e.id.to_string(),
            e.order.to_string(),
            e.rate_hz.to_string(),
            e.scale_cpo.to_string(),
            e.spin.to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
