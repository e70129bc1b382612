mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scrapl_autodiff::gradcheck::{central_difference, relative_error};
use scrapl_core::optimizer::*;

use common::*;

#[test]
fn mean_of_path_gradients_is_full_gradient() {
    let problem = tiny_problem(10, 1);
    let p = problem.num_paths();
    assert!((8..=40).contains(&p), "P = {p}");
    for n in 0..10 {
        let w = problem.encoder.init_weights(100 + n as u64);
        let seed = 7 + n as u64;
        let (full_loss, full) = problem.full_gradient(n, &w, seed).unwrap();
        let mut mean = vec![0.0; w.len()];
        let mut mean_loss = 0.0;
        for q in 0..p {
            let (l, g) = problem.scrapl_gradient(n, &w, q, seed).unwrap();
            mean_loss += l / p as f64;
            for (m, gi) in mean.iter_mut().zip(g) {
                *m += gi / p as f64;
            }
        }
        assert!((mean_loss - full_loss).abs() <= 1e-10 * full_loss);
        let err = relative_error(&mean, &full);
        assert!(err < 1e-8, "pair {n}: {err:e}");
    }
}

#[test]
fn gradient_vanishes_at_exact_reconstruction() {
    let mut problem = tiny_problem(1, 2);
    let enc = &problem.encoder;
    // Zero last layer: the encoder outputs sigmoid(bias) for every input.
    let mut w = enc.init_weights(3);
    let (i, o) = *enc.layers().last().unwrap();
    let start = w.len() - (i * o + o);
    w[start..start + i * o].iter_mut().for_each(|v| *v = 0.0);
    let theta = [0.3f64, 0.65];
    for (u, t) in theta.iter().enumerate() {
        w[start + i * o + u] = (t / (1.0 - t)).ln();
    }
    let th = problem.predict(0, &w).unwrap();
    let audio = problem.synth.render(&th, 42).unwrap();
    problem = scrapl_core::optimizer::Problem::new(
        problem.synth.clone(),
        problem.scattering.clone(),
        problem.encoder.clone(),
        vec![Example { id: 0, theta: th.clone(), seed: 42, audio }],
    )
    .unwrap();
    let mut shifted = w.clone();
    shifted[start + i * o] += 0.3;
    for p in 0..problem.num_paths() {
        let (l, g) = problem.scrapl_gradient(0, &w, p, 42).unwrap();
        let (_, g_off) = problem.scrapl_gradient(0, &shifted, p, 42).unwrap();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let off = g_off.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(l < 1e-20);
        assert!(gn <= 1e-8 * off.max(1e-300) || gn < 1e-14, "path {p}: {gn:e} vs {off:e}");
    }
}

#[test]
fn path_gradient_matches_finite_differences() {
    let problem = tiny_problem(3, 4);
    let w = problem.encoder.init_weights(9);
    let (n, p, seed) = (1, problem.num_paths() - 2, 17);
    let (_, g) = problem.scrapl_gradient(n, &w, p, seed).unwrap();
    let fd = central_difference(|v| Ok(problem.scrapl_gradient(n, v, p, seed).unwrap().0), &w, 1e-6).unwrap();
    let err = relative_error(&g, &fd);
    assert!(err < 1e-4, "{err:e}");
}

/// Adam with ε under the root, written out directly.
fn reference_adam(gs: &[Vec<f64>], lr: f64, w0: &[f64]) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; w0.len()];
    let mut v = vec![0.0; w0.len()];
    let mut w = w0.to_vec();
    let mut out = Vec::new();
    for (t, g) in gs.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (eps + vh).sqrt();
        }
        out.push(w.clone());
    }
    out
}

#[test]
fn single_path_moments_reduce_to_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 6;
    let gs: Vec<Vec<f64>> = (0..100).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let w0: Vec<f64> = (0..dim).map(|i| i as f64 * 0.1).collect();
    let reference = reference_adam(&gs, 1e-2, &w0);
    let mut s = ScraplState::new(1, dim, AdamHyper::default(), true, false).unwrap();
    let mut w = w0.clone();
    for (g, r) in gs.iter().zip(&reference) {
        s.begin_step();
        s.apply(0, g, &mut w, 1e-2);
        for (a, b) in w.iter().zip(r) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn running_sum_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 5;
    let mut s = ScraplState::new(7, dim, AdamHyper::default(), true, true).unwrap();
    let mut w = vec![0.0; dim];
    for step in 0..1000 {
        s.begin_step();
        let p = s.sample_path(&mut rng);
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gc = s.p_adam_update(p, &g);
        let before = s.visited();
        let out = s.p_saga_update(p, &gc, &mut w, 1e-3);
        if step == 0 {
            assert_eq!(before, 0);
            assert_eq!(out, gc);
        }
        assert!(s.running_sum_error() <= 1e-12);
    }
    assert_eq!(s.visited(), 7);
}

#[test]
fn sampling_follows_pi() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ScraplState::new(10, 1, AdamHyper::default(), true, true).unwrap();
    let mut counts = [0usize; 10];
    for _ in 0..100_000 {
        counts[s.sample_path(&mut rng)] += 1;
    }
    assert!(counts.iter().all(|&c| (9_000..=11_000).contains(&c)), "{counts:?}");

    let mut delta = vec![0.0; 10];
    delta[3] = 1.0;
    s.set_pi(&delta).unwrap();
    assert!((0..1000).all(|_| s.sample_path(&mut rng) == 3));

    let mut holed = vec![1.0; 10];
    holed[6] = 0.0;
    s.set_pi(&holed).unwrap();
    assert!((0..10_000).all(|_| s.sample_path(&mut rng) != 6));
}

#[test]
fn zero_steps_return_initial_weights() {
    let problem = tiny_problem(4, 3);
    let w0 = problem.encoder.init_weights(1);
    let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
    let out = train(&problem, &[0, 1, 2, 3], &cfg, w0.clone(), &mut |_, _| Ok(true)).unwrap();
    assert_eq!(out.weights, w0);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic() {
    let problem = tiny_problem(6, 3);
    let w0 = problem.encoder.init_weights(1);
    let cfg = TrainConfig { steps: 15, batch_size: 2, lr: 1e-3, seed: 11, ..TrainConfig::default() };
    let run = || {
        let out = train(&problem, &[0, 1, 2, 3, 4], &cfg, w0.clone(), &mut |_, _| Ok(true)).unwrap();
        let mut buf = Vec::new();
        write_step_log(&mut buf, &out.log, false).unwrap();
        (out.weights, buf)
    };
    let (wa, la) = run();
    let (wb, lb) = run();
    assert_eq!(wa, wb);
    assert_eq!(la, lb);
    let text = String::from_utf8(la).unwrap();
    assert!(text.starts_with("k,n,p,loss,g_norm,g_current_norm,g_saga_norm,skipped\n"));
    assert_eq!(text.lines().count(), 16);
}

#[test]
fn state_size_does_not_depend_on_dataset() {
    let sizes: Vec<usize> = [10usize, 1000]
        .iter()
        .map(|&n| {
            let problem = tiny_problem(n, 0);
            let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
            let ids: Vec<usize> = (0..n).collect();
            let w0 = problem.encoder.init_weights(0);
            let out = train(&problem, &ids, &cfg, w0, &mut |_, _| Ok(true)).unwrap();
            out.state.unwrap().allocated_bytes()
        })
        .collect();
    assert_eq!(sizes[0], sizes[1]);
    let problem = tiny_problem(1, 0);
    let expected = 3 * 8 * problem.num_paths() * problem.encoder.num_weights();
    assert!(sizes[0] >= expected && sizes[0] < expected + expected / 2);
}

#[test]
fn observer_can_stop_training() {
    let problem = tiny_problem(3, 3);
    let w0 = problem.encoder.init_weights(1);
    let cfg = TrainConfig { steps: 50, eval_every: 5, lr: 1e-3, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let out = train(&problem, &[0, 1, 2], &cfg, w0, &mut |k, _| {
        seen.push(k);
        Ok(k < 10)
    })
    .unwrap();
    assert_eq!(seen, vec![5, 10]);
    assert_eq!(out.stopped_at, Some(10));
    assert_eq!(out.log.len(), 10);
}

#[test]
fn supervised_gradient_matches_tape() {
    let problem = tiny_problem(2, 5);
    let w = problem.encoder.init_weights(2);
    let (l, g) = problem.ploss_gradient(1, &w).unwrap();
    let th = problem.predict(1, &w).unwrap();
    let direct: f64 = th.iter().zip(&problem.example(1).theta).map(|(a, b)| (a - b).powi(2)).sum();
    assert!((l - direct).abs() < 1e-14);
    let fd = central_difference(|v| Ok(problem.ploss_gradient(1, v).unwrap().0), &w, 1e-6).unwrap();
    assert!(relative_error(&g, &fd) < 1e-6);
}
