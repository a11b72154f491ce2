//! Bayesian linear regression on the final layer.
//!
//! With `w ~ N(0, p^-1 I)` and `y = w^T x_L + eps`, `eps ~ N(0, noise_var)`,
//! the marginal over training targets is `N(0, p^-1 X_L^T X_L + noise_var I)`
//! and the predictive at `x~_L` is Gaussian with
//!
//! ```text
//! mean = p^-1 x~^T X (p^-1 X^T X + g I)^-1 Y
//! var  = g + g p^-1 x~^T (p^-1 X X^T + g I)^-1 x~
//! ```
//!
//! [`ComponentModel`] factorizes whichever of the `n x n` ("dual") or `p x p`
//! ("primal") systems is smaller and answers every query from that one
//! factorization. Everything stays in log space.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentPosterior {
    pub pred_mean: f64,
    pub pred_var: f64,
    pub log_marginal: f64,
    pub candidate_index: usize,
}

/// Gaussian posterior over the final-layer weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayerPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

fn validate(xl: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64, p: usize) -> Result<()> {
    if xl.nrows() != p {
        return Err(Error::invalid(format!("features have {} rows but p = {p}", xl.nrows())));
    }
    if xl.ncols() != y.len() {
        return Err(Error::invalid(format!(
            "features have {} columns but there are {} targets",
            xl.ncols(),
            y.len()
        )));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::invalid(format!("noise_var must be positive, got {noise_var}")));
    }
    if xl.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite features or targets"));
    }
    Ok(())
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::numeric(format!("cholesky of the {what} system failed")))
}

#[derive(Debug, Clone)]
enum Form {
    /// `K = p^-1 X^T X + g I_n`; `alpha = K^-1 Y`.
    Dual {
        chol: Cholesky<f64, Dyn>,
        alpha: DVector<f64>,
    },
    /// `A = X X^T + p g I_p`; `beta = A^-1 X Y` is the posterior mean of `w`.
    Primal {
        chol: Cholesky<f64, Dyn>,
        beta: DVector<f64>,
    },
}

/// One candidate's conjugate regression, factorized once.
#[derive(Debug, Clone)]
pub struct ComponentModel {
    xl: DMatrix<f64>,
    noise_var: f64,
    form: Form,
    log_marginal: f64,
}

impl ComponentModel {
    /// Picks the smaller of the two systems.
    pub fn new(xl: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<Self> {
        if xl.ncols() <= xl.nrows() {
            Self::dual(xl, y, noise_var)
        } else {
            Self::primal(xl, y, noise_var)
        }
    }

    /// Factorizes the `n x n` system.
    pub fn dual(xl: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<Self> {
        let p = xl.nrows();
        validate(xl, y, noise_var, p)?;
        let n = xl.ncols();
        let mut k = xl.transpose() * xl;
        k /= p as f64;
        for i in 0..n {
            k[(i, i)] += noise_var;
        }
        let chol = cholesky(k, "n x n")?;
        let alpha = chol.solve(y);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = y.dot(&alpha);
        let log_marginal = -0.5 * (n as f64 * LN_2PI + logdet + quad);
        Ok(Self {
            xl: xl.clone(),
            noise_var,
            form: Form::Dual { chol, alpha },
            log_marginal,
        })
    }

    /// Factorizes the `p x p` system and converts via the push-through identity.
    pub fn primal(xl: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<Self> {
        let p = xl.nrows();
        validate(xl, y, noise_var, p)?;
        let n = xl.ncols();
        let mut a = xl * xl.transpose();
        let ridge = p as f64 * noise_var;
        for i in 0..p {
            a[(i, i)] += ridge;
        }
        let chol = cholesky(a, "p x p")?;
        let b = xl * y;
        let beta = chol.solve(&b);
        // det(g I_n + p^-1 X^T X) = g^(n-p) det(A) / p^p
        let logdet_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet = (n as f64 - p as f64) * noise_var.ln() + logdet_a - p as f64 * (p as f64).ln();
        // K^-1 Y = g^-1 (Y - X^T beta)
        let resid = y - xl.transpose() * &beta;
        let quad = y.dot(&resid) / noise_var;
        let log_marginal = -0.5 * (n as f64 * LN_2PI + logdet + quad);
        Ok(Self {
            xl: xl.clone(),
            noise_var,
            form: Form::Primal { chol, beta },
            log_marginal,
        })
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn p(&self) -> usize {
        self.xl.nrows()
    }

    pub fn is_dual(&self) -> bool {
        matches!(self.form, Form::Dual { .. })
    }

    /// Predictive `(mean, var)` for each column of `xl_test` (`p x m`).
    pub fn predict(&self, xl_test: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        let p = self.p();
        if xl_test.nrows() != p {
            return Err(Error::invalid(format!(
                "test features have {} rows but p = {p}",
                xl_test.nrows()
            )));
        }
        if xl_test.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite test features"));
        }
        let g = self.noise_var;
        let out = match &self.form {
            Form::Dual { chol, alpha } => {
                let mut k = self.xl.transpose() * xl_test;
                k /= p as f64;
                let v = chol
                    .l_dirty()
                    .solve_lower_triangular(&k)
                    .ok_or_else(|| Error::numeric("triangular solve failed"))?;
                (0..xl_test.ncols())
                    .map(|j| {
                        let mean = k.column(j).dot(alpha);
                        let explained = v.column(j).norm_squared();
                        let prior = xl_test.column(j).norm_squared() / p as f64;
                        // prior - explained >= 0 in exact arithmetic
                        (mean, g + (prior - explained).max(0.0))
                    })
                    .collect()
            }
            Form::Primal { chol, beta } => {
                let u = chol
                    .l_dirty()
                    .solve_lower_triangular(xl_test)
                    .ok_or_else(|| Error::numeric("triangular solve failed"))?;
                (0..xl_test.ncols())
                    .map(|j| {
                        let mean = xl_test.column(j).dot(beta);
                        (mean, g + g * u.column(j).norm_squared())
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Predictive mean and variance at one test point.
pub fn component_predictive(
    xl_train: &FeatureMatrix,
    xl_test: &FeatureMatrix,
    y: &DVector<f64>,
    noise_var: f64,
    p: usize,
) -> Result<(f64, f64)> {
    validate(&xl_train.xl, y, noise_var, p)?;
    if xl_test.n_cols() != 1 {
        return Err(Error::invalid("component_predictive takes a single test column"));
    }
    let model = ComponentModel::new(&xl_train.xl, y, noise_var)?;
    Ok(model.predict(&xl_test.xl)?[0])
}

/// Conjugate posterior: covariance `(p I + g^-1 X X^T)^-1`, mean `g^-1 cov X Y`.
pub fn final_layer_posterior(
    xl_train: &FeatureMatrix,
    y: &DVector<f64>,
    noise_var: f64,
    p: usize,
) -> Result<FinalLayerPosterior> {
    let xl = &xl_train.xl;
    validate(xl, y, noise_var, p)?;
    let mut precision = xl * xl.transpose();
    precision /= noise_var;
    for i in 0..p {
        precision[(i, i)] += p as f64;
    }
    let chol = cholesky(precision, "posterior precision")?;
    let inv = chol.inverse();
    let covariance = (&inv + inv.transpose()) * 0.5;
    let mean = chol.solve(&(xl * y)) / noise_var;
    Ok(FinalLayerPosterior { mean, covariance })
}

/// `log N(Y; 0, p^-1 X^T X + g I)` through the dense `n x n` factorization.
pub fn log_marginal_likelihood(xl_train: &FeatureMatrix, y: &DVector<f64>, noise_var: f64, p: usize) -> Result<f64> {
    validate(&xl_train.xl, y, noise_var, p)?;
    Ok(ComponentModel::dual(&xl_train.xl, y, noise_var)?.log_marginal())
}

/// Summands `log(lambda_k + g) + (q_k^T Y)^2 / (lambda_k + g)`, `k = 1..n`,
/// for the eigenpairs of the scaled Gram `p^-1 X^T X`.
///
/// When `p < n` the thin SVD leaves an `(n - r)`-dimensional null space. Its
/// basis is free, so it is completed with the normalized residual of `Y`
/// (carrying all of the leftover energy) plus arbitrary orthonormal vectors.
pub fn spectral_terms(xl_train: &FeatureMatrix, y: &DVector<f64>, noise_var: f64, p: usize) -> Result<Vec<f64>> {
    let xl = &xl_train.xl;
    validate(xl, y, noise_var, p)?;
    let n = y.len();
    let scaled = xl / (p as f64).sqrt();
    let svd =
        SVD::try_new(scaled, false, true, f64::EPSILON, 0).ok_or_else(|| Error::numeric("svd did not converge"))?;
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut terms = Vec::with_capacity(n);
    let mut captured = 0.0;
    for (k, s) in svd.singular_values.iter().enumerate() {
        let lambda = s * s;
        let proj = v_t.row(k).dot(&y.transpose());
        captured += proj * proj;
        terms.push((lambda + noise_var).ln() + proj * proj / (lambda + noise_var));
    }
    if terms.len() < n {
        let leftover = (y.norm_squared() - captured).max(0.0);
        terms.push(noise_var.ln() + leftover / noise_var);
        terms.resize(n, noise_var.ln());
    }
    Ok(terms)
}

/// Marginal likelihood from the singular value decomposition of `X_L / sqrt(p)`.
pub fn log_marginal_likelihood_spectral(
    xl_train: &FeatureMatrix,
    y: &DVector<f64>,
    noise_var: f64,
    p: usize,
) -> Result<f64> {
    let terms = spectral_terms(xl_train, y, noise_var, p)?;
    Ok(-0.5 * (terms.len() as f64 * LN_2PI + terms.iter().sum::<f64>()))
}

/// Marginal likelihood as a function of the scaled Gram `G = p^-1 X^T X`
/// directly, via its symmetric eigendecomposition.
pub fn log_marginal_from_gram(gram: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<f64> {
    let n = y.len();
    if gram.shape() != (n, n) {
        return Err(Error::invalid(format!("gram is {:?}, expected {n}x{n}", gram.shape())));
    }
    if !(noise_var > 0.0) || gram.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("invalid gram, targets or noise level"));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let mut total = 0.0;
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        let s = lambda + noise_var;
        if !(s > 0.0) {
            return Err(Error::numeric(format!("gram eigenvalue {lambda} below -noise_var")));
        }
        let proj = eig.eigenvectors.column(k).dot(y);
        total += s.ln() + proj * proj / s;
    }
    Ok(-0.5 * (n as f64 * LN_2PI + total))
}

/// Upper bound `-(n/2) log(2 pi) - n log(gamma)` implied by positive semidefiniteness.
pub fn log_marginal_upper_bound(n: usize, noise_var: f64) -> f64 {
    -0.5 * n as f64 * ((2.0 * PI).ln() + noise_var.ln())
}
