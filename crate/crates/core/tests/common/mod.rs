//! Helpers shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use vbinet::channel::{draw_sample, gen_iid, noise_var_for_snr};
use vbinet::constellation::Constellation;
use vbinet::detection::NetworkKind;
use vbinet::params::{init_params, DetectorParams, Dims};
use vbinet::rng::{stream, TRAIN_DOMAIN};
use vbinet::training::{sample_loss_grad, TrainingSample};

/// A small random problem for gradient checking: `N_t <= 4`, `L <= 3`,
/// parameters jittered around the default initialization.
pub fn micro_instance(kind: NetworkKind, seed: u64) -> (DetectorParams, TrainingSample, Constellation) {
    let mut rng = stream(seed, TRAIN_DOMAIN, 0xfd);
    let nt = rng.random_range(1..=4usize);
    let nr = nt + rng.random_range(0..=3usize);
    let layers = rng.random_range(1..=3usize);
    let c = Constellation::qam(if rng.random_bool(0.5) { 4 } else { 16 }).unwrap();
    let h = gen_iid(nr, nt, &mut rng).unwrap().h;
    let snr = rng.random_range(0.0..15.0);
    let nv = noise_var_for_snr(&h, snr).unwrap();
    let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
    let mut p = init_params(kind, Dims::new(nr, nt), layers, Some(&h)).unwrap();
    let flat: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|x| x * (1.0 + rng.random_range(-0.2..0.2)) + rng.random_range(-0.05..0.05))
        .collect();
    p.set_flat(&flat).unwrap();
    (p, TrainingSample::new(kind, h, s).unwrap(), c)
}

/// Largest per-coordinate violation of
/// `|g - fd| <= rel * max(|g|, |fd|) + abs`, as `(coordinate, analytic, fd)`.
pub fn fd_violations(
    p: &DetectorParams,
    s: &TrainingSample,
    c: &Constellation,
    rel: f64,
    abs: f64,
) -> Vec<(usize, f64, f64)> {
    let (_, g) = sample_loss_grad(p, s, c).unwrap();
    let base = p.to_flat();
    let mut bad = Vec::new();
    for i in 0..base.len() {
        let step = 1e-4 * (1.0 + base[i].abs());
        let eval = |x: f64| {
            let mut q = p.clone();
            let mut f = base.clone();
            f[i] = x;
            q.set_flat(&f).unwrap();
            sample_loss_grad(&q, s, c).unwrap().0
        };
        let fd = (eval(base[i] + step) - eval(base[i] - step)) / (2.0 * step);
        if (g[i] - fd).abs() > rel * g[i].abs().max(fd.abs()) + abs {
            bad.push((i, g[i], fd));
        }
    }
    bad
}
