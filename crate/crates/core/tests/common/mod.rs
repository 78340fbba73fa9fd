#![allow(dead_code)]

use hypermarg::nn::{self, Example, LossKind, ModelSpec, ParamVector};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely: central
/// differences carry roughly `eps * loss / step` of roundoff.
pub const REL_FLOOR: f64 = 1e-4;

pub fn fd_gradient(spec: &ModelSpec, theta: &ParamVector, batch: &[Example<'_>], loss: LossKind) -> Vec<f64> {
    let mut probe = theta.clone();
    (0..theta.len())
        .map(|i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + FD_STEP;
            let up = nn::loss_and_grad(spec, &probe, batch, loss).unwrap().0;
            probe.as_mut_slice()[i] = orig - FD_STEP;
            let down = nn::loss_and_grad(spec, &probe, batch, loss).unwrap().0;
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Seeded uniform draws in `[lo, hi)` for building test inputs.
pub fn uniform_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
