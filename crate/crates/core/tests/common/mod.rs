//! Data generators and independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const TRUE_BETA: [f64; 4] = [0.5, 0.3, -0.2, 0.4];

pub fn poisson(rng: &mut impl Rng, mu: f64) -> f64 {
    // Knuth's product-of-uniforms method; fine for the small means used here.
    let limit = (-mu).exp();
    let mut k = 0.0;
    let mut p: f64 = rng.random();
    while p > limit {
        k += 1.0;
        p *= rng.random::<f64>();
    }
    k
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn synthetic(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 3));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut eta = TRUE_BETA[0];
        for j in 0..3 {
            let v = normal(&mut rng);
            x[[i, j]] = v;
            eta += TRUE_BETA[j + 1] * v;
        }
        y.push(poisson(&mut rng, eta.exp()));
    }
    (x, y)
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * out[k]).sum();
        out[row] = (b[row] - s) / a[row][row];
    }
    out
}

/// Newton-Raphson on the exact Poisson log-likelihood with an intercept
/// column. Returns `[b0, b1, .., bp]`.
pub fn newton_mle(x: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    let (n, p) = x.dim();
    let design = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; p + 1];
    b[0] = mean_y.ln();
    for _ in 0..100 {
        let mut grad = vec![0.0; p + 1];
        let mut hess = vec![vec![0.0; p + 1]; p + 1];
        for i in 0..n {
            let eta: f64 = (0..=p).map(|j| design(i, j) * b[j]).sum();
            let mu = eta.exp();
            for j in 0..=p {
                grad[j] += design(i, j) * (y[i] - mu);
                for k in 0..=p {
                    hess[j][k] += mu * design(i, j) * design(i, k);
                }
            }
        }
        let step = solve(hess, grad);
        for j in 0..=p {
            b[j] += step[j];
        }
        if step.iter().all(|s| s.abs() < 1e-15) {
            break;
        }
    }
    b
}

pub fn wide_fixture() -> (Array2<f64>, Vec<f64>) {
    // Three informative columns plus five noise columns.
    let (x3, y) = synthetic(31, 400);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(32);
    let mut x = Array2::zeros((400, 8));
    for i in 0..400 {
        for j in 0..3 {
            x[[i, j]] = x3[[i, j]];
        }
        for j in 3..8 {
            x[[i, j]] = normal(&mut rng);
        }
    }
    (x, y)
}

/// 12 columns: four count-like lags, a slope, seven binary flags.
pub fn gbm_fixture(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 12));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let level = rng.random_range(5..40) as f64;
        for j in 0..4 {
            x[[i, j]] = (level + rng.random_range(-3..=3) as f64).max(0.0);
        }
        x[[i, 4]] = (x[[i, 0]] - x[[i, 3]]) / 3.0;
        let hour = rng.random_range(0..7);
        x[[i, 5 + hour]] = 1.0;
        let bump = if (2..5).contains(&hour) { 6.0 } else { 0.0 };
        y.push((0.9 * x[[i, 0]] + bump + rng.random_range(-2.0..2.0)).max(0.0).round());
    }
    (x, y)
}

pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}
