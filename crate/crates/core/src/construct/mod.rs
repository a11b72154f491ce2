//! Candidate generation.
//!
//! Two families: iid Gaussian draws (a discretized Gaussian prior), and
//! members of an equivalence class built around the marginal-likelihood
//! optimum. The Gram targets here are for the *scaled* Gram
//! `p^-1 X_L^T X_L`, which is the matrix the marginal likelihood sees.

mod equivalence;

use std::borrow::Cow;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Layer, NetworkShape, ThetaCandidate};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{tags, RngPolicy};
use crate::source::CandidateSource;

pub use equivalence::{
    build_equivalence_class, givens_rotate_rows, rotate_features, sample_colspace_theta, sample_preimage,
    ColumnSpaceSolver, EquivalenceClass, EquivalenceClassSpec, DEFAULT_GIVENS_STEPS,
};

/// `2 pi / (pi - 1)`: the variance scale that gives a ReLU feature unit variance.
pub const RELU_UNIT_VARIANCE_SCALE: f64 = 2.0 * PI / (PI - 1.0);

/// `Var relu(z)` for `z ~ N(0, c)`.
pub fn relu_feature_variance(c: f64) -> f64 {
    c * (PI - 1.0) / (2.0 * PI)
}

/// Per-entry prior variance `c / d_in`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorSpec {
    pub variance_scale: f64,
}

impl GaussianPriorSpec {
    pub fn new(variance_scale: f64) -> Result<Self> {
        if !(variance_scale > 0.0 && variance_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "variance scale must be positive, got {variance_scale}"
            )));
        }
        Ok(Self { variance_scale })
    }

    pub fn entry_sd(&self, fan_in: usize) -> f64 {
        (self.variance_scale / fan_in as f64).sqrt()
    }
}

impl Default for GaussianPriorSpec {
    fn default() -> Self {
        Self {
            variance_scale: RELU_UNIT_VARIANCE_SCALE,
        }
    }
}

/// Gaussian-prior candidates generated on demand from per-candidate streams.
#[derive(Debug, Clone)]
pub struct GaussianCandidates {
    shape: NetworkShape,
    j_count: usize,
    prior: GaussianPriorSpec,
    policy: RngPolicy,
}

impl GaussianCandidates {
    pub fn new(shape: NetworkShape, j_count: usize, prior: GaussianPriorSpec, seed: u64) -> Result<Self> {
        if j_count == 0 {
            return Err(Error::invalid("need at least one candidate"));
        }
        GaussianPriorSpec::new(prior.variance_scale)?;
        Ok(Self {
            shape,
            j_count,
            prior,
            policy: RngPolicy::new(seed),
        })
    }

    pub fn generate(&self, j: usize) -> ThetaCandidate {
        let mut rng = self.policy.stream(j as u64, tags::GAUSSIAN_CANDIDATE);
        let w = self.shape.widths();
        let layers = w
            .windows(2)
            .map(|pair| {
                let sd = self.prior.entry_sd(pair[0]);
                let data: Vec<f64> = (0..pair[0] * pair[1])
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer::without_bias(DMatrix::from_vec(pair[0], pair[1], data))
            })
            .collect();
        ThetaCandidate {
            layers,
            log_prior_mass: -(self.j_count as f64).ln(),
        }
    }
}

impl CandidateSource for GaussianCandidates {
    fn len(&self) -> usize {
        self.j_count
    }

    fn log_prior_mass(&self, _j: usize) -> f64 {
        -(self.j_count as f64).ln()
    }

    fn candidate(&self, j: usize) -> Result<Cow<'_, ThetaCandidate>> {
        Ok(Cow::Owned(self.generate(j)))
    }
}

/// `J` candidates with iid `N(0, c / d_in)` weights, zero biases and mass `1/J`.
pub fn sample_gaussian_candidates(
    shape: &NetworkShape,
    j_count: usize,
    prior: GaussianPriorSpec,
    seed: u64,
) -> Result<CandidateSet> {
    GaussianCandidates::new(shape.clone(), j_count, prior, seed)?.collect_set()
}

/// A target for the scaled Gram `p^-1 X_L^T X_L`.
///
/// `factor_vector` is the signed vector whose positive and negative parts
/// generate the target (`Y`, or its projection onto the row space of `X_1`).
#[derive(Debug, Clone, PartialEq)]
pub struct GramTarget {
    pub gram: DMatrix<f64>,
    pub scale_factor: f64,
    pub factor_vector: DVector<f64>,
}

fn optimum_scale(y: &DVector<f64>, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(Error::invalid(format!("noise_var must be positive, got {noise_var}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("targets contain non-finite values"));
    }
    let yty = y.norm_squared();
    if yty <= noise_var {
        return Err(Error::infeasible(format!(
            "Y^T Y = {yty} does not exceed noise_var = {noise_var}; no unique optimum"
        )));
    }
    Ok(1.0 - noise_var / yty)
}

fn relu_outer(v: &DVector<f64>, scale: f64) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_fn(n, n, |i, j| scale * (v[i] * v[j]).max(0.0))
}

/// Unconstrained maximizer `Y Y^T (1 - g / Y^T Y)`.
pub fn optimal_gram(y: &DVector<f64>, noise_var: f64) -> Result<GramTarget> {
    let s = optimum_scale(y, noise_var)?;
    Ok(GramTarget {
        gram: y * y.transpose() * s,
        scale_factor: s,
        factor_vector: y.clone(),
    })
}

/// The marginal likelihood attained at [`optimal_gram`]:
/// `-1/2 [n log 2pi + log Y^T Y + 1 + (n - 1) log g]`.
pub fn optimal_log_marginal(y: &DVector<f64>, noise_var: f64) -> Result<f64> {
    optimum_scale(y, noise_var)?;
    let n = y.len() as f64;
    Ok(-0.5 * (n * (2.0 * PI).ln() + y.norm_squared().ln() + 1.0 + (n - 1.0) * noise_var.ln()))
}

/// `relu(Y Y^T) (1 - g / Y^T Y)`.
///
/// `relu(Y Y^T) = relu(Y) relu(Y)^T + relu(-Y) relu(-Y)^T` holds entry by entry
/// (each product is either exactly `y_i y_j` or exactly zero), so the target
/// is PSD with rank at most 2 and is reachable by nonnegative features.
pub fn relu_optimal_gram(y: &DVector<f64>, noise_var: f64) -> Result<GramTarget> {
    let s = optimum_scale(y, noise_var)?;
    Ok(GramTarget {
        gram: relu_outer(y, s),
        scale_factor: s,
        factor_vector: y.clone(),
    })
}

/// Rank tolerance for the row-space projector, relative to the largest singular value.
pub const PROJECTOR_RANK_TOL: f64 = 1e-10;

/// Orthogonal projector onto the row space of `x1` (an `n x n` matrix).
pub fn row_space_projector(x1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x1.ncols();
    let svd = SVD::try_new(x1.clone(), false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::numeric("svd of X_1 did not converge"))?;
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if !(smax > 0.0) {
        return Err(Error::invalid("X_1 is zero"));
    }
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut proj = DMatrix::zeros(n, n);
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > PROJECTOR_RANK_TOL * smax {
            let v = v_t.row(k).transpose();
            proj += &v * v.transpose();
        }
    }
    Ok(proj)
}

/// `relu(P Y Y^T P^T) (1 - g / Y^T Y)` with `P` the projector onto the row
/// space of `X_1`. Equal to [`relu_optimal_gram`] whenever `rank(X_1) = n`.
pub fn projected_optimal_gram(x1: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<GramTarget> {
    if x1.ncols() != y.len() {
        return Err(Error::invalid("X_1 columns must match the number of targets"));
    }
    let s = optimum_scale(y, noise_var)?;
    let py = row_space_projector(x1)? * y;
    Ok(GramTarget {
        gram: relu_outer(&py, s),
        scale_factor: s,
        factor_vector: py,
    })
}

/// Nonnegative features `X_L` (`p x n`) with `p^-1 X_L^T X_L = target.gram`.
///
/// Row 1 is `sqrt(p s) relu(v)`, row 2 is `sqrt(p s) relu(-v)` where `v` is the
/// target's factor vector; the remaining rows are zero.
pub fn factor_gram_nonneg(target: &GramTarget, p: usize) -> Result<FeatureMatrix> {
    let v = &target.factor_vector;
    let n = v.len();
    if target.gram.shape() != (n, n) {
        return Err(Error::invalid("gram target and factor vector disagree in size"));
    }
    let has_pos = v.iter().any(|x| *x > 0.0);
    let has_neg = v.iter().any(|x| *x < 0.0);
    let rows_needed = usize::from(has_pos) + usize::from(has_neg);
    if p == 0 || p < rows_needed {
        return Err(Error::infeasible(format!(
            "p = {p} cannot hold {rows_needed} sign-split feature rows"
        )));
    }
    let scale = (p as f64 * target.scale_factor).sqrt();
    let mut xl = DMatrix::zeros(p, n);
    let mut row = 0;
    if has_pos {
        for i in 0..n {
            xl[(row, i)] = scale * v[i].max(0.0);
        }
        row += 1;
    }
    if has_neg {
        for i in 0..n {
            xl[(row, i)] = scale * (-v[i]).max(0.0);
        }
    }
    let mut reproduced = xl.transpose() * &xl;
    reproduced /= p as f64;
    let resid = (&reproduced - &target.gram).amax();
    let tol = 1e-12 * target.gram.amax().max(1.0);
    if resid > tol {
        return Err(Error::infeasible(format!(
            "target is not reachable by nonnegative rank-2 features (residual {resid:e})"
        )));
    }
    Ok(FeatureMatrix::new(xl))
}
