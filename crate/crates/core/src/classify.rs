//! Classification predictives on top of the regression machinery.
//!
//! Labels are fitted as regression targets with the conjugate update, giving a
//! Gaussian over the logit(s) per candidate. Binary probabilities use the
//! probit approximation `E[sigmoid(f)] ~ Phi(m / sqrt(8/pi + v))`; multi-class
//! probabilities use the mean-field softmax formula with the same inner
//! approximation.
//!
//! Binary labels in `{0, 1}` are encoded as `{-1, +1}` before fitting, so a
//! zero logit mean corresponds to an even split and the two-class mean-field
//! formula reduces to the same logit difference.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use std::sync::OnceLock;

use crate::blr::ComponentModel;
use crate::data::{test_matrix, Dataset, NetworkShape, TestPoint};
use crate::error::{Error, Result};
use crate::features::forward_features;
use crate::mixture::{mixture_weights, sorted_sum};
use crate::source::CandidateSource;

pub const GAUSS_HERMITE_NODES: usize = 64;

/// How `E[sigmoid(X)]`, `X ~ N(m, v)`, is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmoidExpectation {
    #[default]
    Probit,
    GaussHermite,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    static N: OnceLock<Normal> = OnceLock::new();
    N.get_or_init(|| Normal::new(0.0, 1.0).expect("unit normal")).cdf(x)
}

/// `Phi(m / sqrt(8/pi + v))`; the exact sigmoid when `v = 0`.
pub fn probit_sigmoid_expectation(mean: f64, var: f64) -> f64 {
    if var == 0.0 {
        return sigmoid(mean);
    }
    std_normal_cdf(mean / (8.0 / PI + var).sqrt())
}

/// Physicists' Gauss-Hermite nodes and weights from the Golub-Welsch
/// eigenproblem; weights sum to `sqrt(pi)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn gh64() -> &'static (Vec<f64>, Vec<f64>) {
    static GH: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GH.get_or_init(|| gauss_hermite(GAUSS_HERMITE_NODES))
}

/// `E[sigmoid(X)]` for `X ~ N(mean, var)` by 64-node Gauss-Hermite quadrature.
pub fn gauss_hermite_sigmoid_expectation(mean: f64, var: f64) -> f64 {
    if var == 0.0 {
        return sigmoid(mean);
    }
    let (x, w) = gh64();
    let s = (2.0 * var).sqrt();
    let terms: Vec<f64> = x.iter().zip(w).map(|(xi, wi)| wi * sigmoid(mean + s * xi)).collect();
    sorted_sum(&terms) / PI.sqrt()
}

impl SigmoidExpectation {
    pub fn eval(self, mean: f64, var: f64) -> f64 {
        match self {
            Self::Probit => probit_sigmoid_expectation(mean, var),
            Self::GaussHermite => gauss_hermite_sigmoid_expectation(mean, var),
        }
    }
}

/// Gaussian over the `K` logits at one test point under one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl LogitPosterior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if k == 0 || covariance.shape() != (k, k) {
            return Err(Error::invalid("logit covariance must be K x K with K >= 1"));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logit moments"));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("logit covariance must be symmetric"));
        }
        if covariance.diagonal().iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("logit variances must be non-negative"));
        }
        Ok(Self { mean, covariance })
    }

    /// Independent logits with the given variances.
    pub fn independent(mean: DVector<f64>, vars: &[f64]) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(vars));
        Self::new(mean, cov)
    }

    pub fn n_classes(&self) -> usize {
        self.mean.len()
    }

    /// Mean and variance of `f_k - f_r`.
    pub fn difference(&self, k: usize, r: usize) -> (f64, f64) {
        let c = &self.covariance;
        let v = (c[(k, k)] + c[(r, r)] - 2.0 * c[(k, r)]).max(0.0);
        (self.mean[k] - self.mean[r], v)
    }
}

/// Mean-field softmax probability of class `k`:
/// `(2 - K + sum_{r != k} 1 / E[sigmoid(f_k - f_r)])^-1`.
pub fn mean_field_prob(logits: &LogitPosterior, k: usize, method: SigmoidExpectation) -> Result<f64> {
    let kk = logits.n_classes();
    if kk < 2 || k >= kk {
        return Err(Error::invalid("mean-field needs K >= 2 and k < K"));
    }
    let inv: Vec<f64> = (0..kk)
        .filter(|&r| r != k)
        .map(|r| {
            let (m, v) = logits.difference(k, r);
            1.0 / method.eval(m, v)
        })
        .collect();
    let denom = 2.0 - kk as f64 + sorted_sum(&inv);
    if denom.is_nan() {
        return Err(Error::numeric("mean-field denominator is NaN"));
    }
    // An infinite denominator means some pairwise expectation underflowed to 0.
    Ok(if denom.is_infinite() { 0.0 } else { 1.0 / denom })
}

fn check_binary_labels(y: &DVector<f64>) -> Result<()> {
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("binary labels must be 0 or 1"));
    }
    Ok(())
}

/// Per-candidate logit moments and mixture weights for binary labels.
#[derive(Debug, Clone)]
pub struct BinaryRun {
    pub weights: Vec<f64>,
    /// `components[t][j] = (mean, var)` of the latent at test point `t`.
    pub components: Vec<Vec<(f64, f64)>>,
}

impl BinaryRun {
    pub fn prob(&self, t: usize, method: SigmoidExpectation) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components[t])
            .map(|(w, (m, v))| w * method.eval(*m, *v))
            .collect();
        sorted_sum(&terms)
    }
}

pub fn binary_run<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &Dataset,
    tests: &[TestPoint],
    shape: &NetworkShape,
) -> Result<BinaryRun> {
    check_binary_labels(data.y())?;
    let signed = Dataset::new(data.x1().clone(), data.y().map(|v| 2.0 * v - 1.0), data.noise_var())?;
    let run = crate::mixture::evaluate_candidates(candidates, &signed, tests, shape)?;
    Ok(BinaryRun {
        weights: run.weights,
        components: run.components,
    })
}

/// Probability of label 1 at `test`:
/// `sum_j w_j Phi(mu_j / sqrt(8/pi + sigma_j^2))` with the full predictive variance.
pub fn binary_class_prob<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &Dataset,
    test: &TestPoint,
    shape: &NetworkShape,
) -> Result<f64> {
    Ok(binary_run(candidates, data, std::slice::from_ref(test), shape)?.prob(0, SigmoidExpectation::Probit))
}

/// Training data with one-hot labels (`n x K`).
#[derive(Debug, Clone)]
pub struct MulticlassData {
    x1: DMatrix<f64>,
    y: DMatrix<f64>,
    noise_var: f64,
}

impl MulticlassData {
    pub fn new(x1: DMatrix<f64>, y: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        if y.nrows() != x1.ncols() {
            return Err(Error::invalid("label rows must match the number of inputs"));
        }
        if y.ncols() < 2 {
            return Err(Error::invalid("multi-class labels need K >= 2"));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid("noise variance must be positive and finite"));
        }
        if x1.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("inputs and labels must be finite"));
        }
        Ok(Self { x1, y, noise_var })
    }

    pub fn from_labels(x1: DMatrix<f64>, labels: &[usize], k: usize, noise_var: f64) -> Result<Self> {
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("label out of range"));
        }
        let y = DMatrix::from_fn(labels.len(), k, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        Self::new(x1, y, noise_var)
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_classes(&self) -> usize {
        self.y.ncols()
    }
}

/// Per-candidate logit posteriors and weights for multi-class labels.
#[derive(Debug, Clone)]
pub struct MulticlassRun {
    pub weights: Vec<f64>,
    /// Summed per-class log marginal likelihoods.
    pub log_marginals: Vec<f64>,
    /// `logits[t][j]`.
    pub logits: Vec<Vec<LogitPosterior>>,
}

impl MulticlassRun {
    pub fn prob(&self, t: usize, k: usize, method: SigmoidExpectation) -> Result<f64> {
        let terms = self
            .weights
            .iter()
            .zip(&self.logits[t])
            .map(|(w, l)| Ok(w * mean_field_prob(l, k, method)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(sorted_sum(&terms))
    }

    /// Class probabilities at test point `t`, optionally rescaled to sum to 1.
    pub fn probs(&self, t: usize, method: SigmoidExpectation, renormalize: bool) -> Result<Vec<f64>> {
        let kk = self.logits[t].first().map_or(0, LogitPosterior::n_classes);
        let mut out = (0..kk).map(|k| self.prob(t, k, method)).collect::<Result<Vec<f64>>>()?;
        if renormalize {
            let s = sorted_sum(&out);
            if s > 0.0 {
                out.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(out)
    }
}

pub fn multiclass_run<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &MulticlassData,
    tests: &[TestPoint],
    shape: &NetworkShape,
) -> Result<MulticlassRun> {
    if data.x1.nrows() != shape.input_dim() {
        return Err(Error::invalid("input dimension does not match the network"));
    }
    let xt = test_matrix(tests)?;
    if xt.nrows() != data.x1.nrows() {
        return Err(Error::invalid("test point dimension does not match the dataset"));
    }
    let kk = data.n_classes();
    let per: Vec<Result<(f64, Vec<LogitPosterior>)>> = (0..candidates.len())
        .into_par_iter()
        .map(|j| {
            let inner = || -> Result<(f64, Vec<LogitPosterior>)> {
                let theta = candidates.candidate(j)?;
                let train = forward_features(&theta, &data.x1, shape)?;
                let test = forward_features(&theta, &xt, shape)?;
                let mut lm = Vec::with_capacity(kk);
                let mut means = DMatrix::zeros(xt.ncols(), kk);
                let mut vars = DMatrix::zeros(xt.ncols(), kk);
                for k in 0..kk {
                    let model = ComponentModel::new(&train.xl, &data.y.column(k).into_owned(), data.noise_var)?;
                    lm.push(model.log_marginal());
                    for (t, (m, v)) in model.predict(&test.xl)?.into_iter().enumerate() {
                        means[(t, k)] = m;
                        vars[(t, k)] = v;
                    }
                }
                let logits = (0..xt.ncols())
                    .map(|t| {
                        let v: Vec<f64> = vars.row(t).iter().copied().collect();
                        LogitPosterior::independent(means.row(t).transpose(), &v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((sorted_sum(&lm), logits))
            };
            inner().map_err(|e| e.in_candidate(j))
        })
        .collect();
    let mut log_marginals = Vec::with_capacity(candidates.len());
    let mut logits = vec![Vec::with_capacity(candidates.len()); xt.ncols()];
    for r in per {
        let (lm, ls) = r?;
        log_marginals.push(lm);
        for (t, l) in ls.into_iter().enumerate() {
            logits[t].push(l);
        }
    }
    let weights = mixture_weights(&log_marginals, &candidates.log_prior_masses())?;
    Ok(MulticlassRun {
        weights,
        log_marginals,
        logits,
    })
}

/// Mean-field probability of class `k` at `test`.
pub fn multiclass_prob<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &MulticlassData,
    test: &TestPoint,
    shape: &NetworkShape,
    k: usize,
) -> Result<f64> {
    multiclass_run(candidates, data, std::slice::from_ref(test), shape)?.prob(0, k, SigmoidExpectation::Probit)
}

/// All class probabilities at `test`.
pub fn multiclass_probs<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &MulticlassData,
    test: &TestPoint,
    shape: &NetworkShape,
    renormalize: bool,
) -> Result<Vec<f64>> {
    multiclass_run(candidates, data, std::slice::from_ref(test), shape)?.probs(
        0,
        SigmoidExpectation::Probit,
        renormalize,
    )
}
