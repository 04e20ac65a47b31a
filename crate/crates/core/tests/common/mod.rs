#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seasons::linalg::Matrix;
use seasons::network::{run_trial_from, HiddenState, NetworkParams};
use seasons::training::{bptt, masked_mse, LossSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(TAU) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

/// Best & Fisher (1979) von Mises sampler.
pub fn sample_von_mises(mu: f64, kappa: f64, rng: &mut impl Rng) -> f64 {
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.gen();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let theta = if u3 > 0.5 { f.acos() } else { -f.acos() };
            return wrap(mu + theta);
        }
    }
}

pub fn sample_mixture(n: usize, w_a: f64, kappa: f64, mu_a: f64, mu_b: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mu = if rng.gen::<f64>() < w_a { mu_a } else { mu_b };
            sample_von_mises(mu, kappa, rng)
        })
        .collect()
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn lu_determinant(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        if m[p][k] == 0.0 {
            return 0.0;
        }
        if p != k {
            m.swap(p, k);
            det = -det;
        }
        det *= m[k][k];
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    det
}

fn loss_of(params: &NetworkParams, initial: &HiddenState, x: &[f64], steps: usize, spec: &LossSpec) -> f64 {
    let trace = run_trial_from(params, initial, x, steps).unwrap();
    masked_mse(&trace.output(), spec)
}

/// Largest relative error between BPTT and central differences over every
/// trainable entry; `floor` keeps near-zero entries from dominating.
pub fn max_gradient_error(
    params: &NetworkParams,
    initial: &HiddenState,
    x: &[f64],
    steps: usize,
    spec: &LossSpec,
    eps: f64,
    floor: f64,
) -> f64 {
    let trace = run_trial_from(params, initial, x, steps).unwrap();
    let grads = bptt(params, &trace, spec).unwrap();
    let mut worst = 0.0f64;
    let n_mats = params.matrices().len();
    for m in 0..n_mats {
        let len = params.matrices()[m].1.as_slice().len();
        for e in 0..len {
            let mut plus = params.clone();
            plus.matrices_mut()[m].as_mut_slice()[e] += eps;
            let mut minus = params.clone();
            minus.matrices_mut()[m].as_mut_slice()[e] -= eps;
            let fd = (loss_of(&plus, initial, x, steps, spec) - loss_of(&minus, initial, x, steps, spec)) / (2.0 * eps);
            let g = grads.mats[m].as_slice()[e];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
