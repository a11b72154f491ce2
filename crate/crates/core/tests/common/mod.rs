//! Independent oracles shared by the integration tests. They use explicit
//! inverses, determinants and plain loops, never the crate's factorizations.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

pub fn gauss_vec(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(a.abs())
    }
}

/// Predictive mean and variance through explicit inverses of both the
/// `n x n` and the `p x p` system. Inverses and determinants go through a
/// pivoted LU; the closed-form small-matrix inverse loses digits when
/// `noise_var` is small.
pub struct InverseOracle {
    pub mean_n: f64,
    pub mean_p: f64,
    pub var_n: f64,
    pub var_p: f64,
}

pub fn inverse_oracle(xl: &DMatrix<f64>, xt: &DVector<f64>, y: &DVector<f64>, g: f64) -> InverseOracle {
    let (p, n) = xl.shape();
    let pf = p as f64;
    let kn = (xl.transpose() * xl) / pf + DMatrix::identity(n, n) * g;
    let kn_inv = kn.lu().try_inverse().expect("n-system invertible");
    let kp = (xl * xl.transpose()) / pf + DMatrix::identity(p, p) * g;
    let kp_inv = kp.lu().try_inverse().expect("p-system invertible");
    let mean_n = (xt.transpose() * xl * &kn_inv * y)[0] / pf;
    let mean_p = (xt.transpose() * &kp_inv * xl * y)[0] / pf;
    let var_p = g + g / pf * (xt.transpose() * &kp_inv * xt)[0];
    // Same variance from the n-system: g + p^-1 |x|^2 - p^-2 k^T Kn^-1 k, k = X^T x.
    let k = xl.transpose() * xt;
    let var_n = g + xt.norm_squared() / pf - (k.transpose() * &kn_inv * &k)[0] / (pf * pf);
    InverseOracle {
        mean_n,
        mean_p,
        var_n,
        var_p,
    }
}

/// `log N(y; 0, cov)` with an explicit determinant and inverse.
pub fn mvn_logpdf(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let lu = cov.clone().lu();
    let det = lu.determinant();
    let inv = lu.try_inverse().expect("covariance invertible");
    -0.5 * (n * (2.0 * PI).ln() + det.ln() + (y.transpose() * inv * y)[0])
}

pub fn marginal_oracle(xl: &DMatrix<f64>, y: &DVector<f64>, g: f64) -> f64 {
    let (p, n) = xl.shape();
    let cov = (xl.transpose() * xl) / p as f64 + DMatrix::identity(n, n) * g;
    mvn_logpdf(y, &cov)
}

/// Layer-by-layer forward pass written with scalar loops.
pub fn forward_loops(layers: &[(DMatrix<f64>, DVector<f64>)], inputs: &DMatrix<f64>, relu: bool) -> DMatrix<f64> {
    let mut x = inputs.clone();
    for (w, b) in layers {
        let (din, dout) = w.shape();
        let mut next = DMatrix::zeros(dout, x.ncols());
        for col in 0..x.ncols() {
            for o in 0..dout {
                let mut acc = 0.0;
                for i in 0..din {
                    acc += w[(i, o)] * x[(i, col)];
                }
                acc -= b[o];
                next[(o, col)] = if relu && acc < 0.0 { 0.0 } else { acc };
            }
        }
        x = next;
    }
    x
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// Standard error of a sample mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Standard-normal CDF via a local `erfc`: Taylor series below 2.5,
/// continued fraction above. Accurate to about 1e-13.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        // erf Taylor series
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for k in 1..200 {
            term *= -x2 / k as f64;
            let add = term / (2 * k + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / PI.sqrt() * sum
    } else {
        // Lentz continued fraction for erfc
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for k in 1..300 {
            let a = k as f64 / 2.0;
            d = x + a * d;
            d = 1.0 / d;
            c = x + a / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / (f * PI.sqrt())
    }
}
