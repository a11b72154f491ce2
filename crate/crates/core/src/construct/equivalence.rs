//! Members of the equivalence class of interior weights that share one
//! feature Gram (and therefore one marginal likelihood).
//!
//! Three generators are composed:
//! - Givens rotations that move mass from an active feature row into an
//!   all-zero row. These are orthogonal, so `X_L^T X_L` is unchanged, and with
//!   angles in `[0, pi/2]` both rows stay nonnegative.
//! - ReLU preimages: entries where `X_L = 0` may take any negative
//!   pre-activation.
//! - Column-space solutions of `Theta^T X_1 = Z`, free in the orthogonal
//!   complement of `col(X_1)` when `n < d`.

use std::borrow::Cow;
use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{factor_gram_nonneg, relu_optimal_gram, GramTarget, RELU_UNIT_VARIANCE_SCALE};
use crate::data::{Activation, CandidateSet, Dataset, Layer, NetworkShape, ThetaCandidate};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{tags, RngPolicy, StreamRng};
use crate::source::CandidateSource;

/// Givens rotations composed per rotation sample.
pub const DEFAULT_GIVENS_STEPS: usize = 8;

const MAX_ANGLE_RETRIES: usize = 64;

fn default_scale() -> f64 {
    RELU_UNIT_VARIANCE_SCALE.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceClassSpec {
    pub n_rotations: usize,
    pub n_preimage: usize,
    pub n_colspace: usize,
    /// Preimage entries are `-|N(0, preimage_scale^2)|`.
    #[serde(default = "default_scale")]
    pub preimage_scale: f64,
    /// Column-space noise has entries `N(0, colspace_scale^2 / d)`.
    #[serde(default = "default_scale")]
    pub colspace_scale: f64,
}

impl EquivalenceClassSpec {
    /// Counts with both scales set to `sqrt(c)`, `c = 2 pi / (pi - 1)`, so that
    /// pre-activations and weights match the Gaussian prior's magnitudes.
    pub fn new(n_rotations: usize, n_preimage: usize, n_colspace: usize) -> Self {
        Self {
            n_rotations,
            n_preimage,
            n_colspace,
            preimage_scale: default_scale(),
            colspace_scale: default_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rotations == 0 || self.n_preimage == 0 || self.n_colspace == 0 {
            return Err(Error::invalid("equivalence class counts must be at least 1"));
        }
        if !(self.preimage_scale >= 0.0 && self.colspace_scale >= 0.0)
            || !self.preimage_scale.is_finite()
            || !self.colspace_scale.is_finite()
        {
            return Err(Error::invalid(
                "equivalence class scales must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n_rotations * self.n_preimage * self.n_colspace
    }
}

impl Default for EquivalenceClassSpec {
    fn default() -> Self {
        Self::new(10, 10, 10)
    }
}

/// Rotates rows `i` and `j` of `m` by `angle`:
/// `row_i <- cos row_i - sin row_j`, `row_j <- sin row_i + cos row_j`.
pub fn givens_rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for col in 0..m.ncols() {
        let a = m[(i, col)];
        let b = m[(j, col)];
        m[(i, col)] = c * a - s * b;
        m[(j, col)] = s * a + c * b;
    }
}

fn check_nonneg(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("features must be finite and nonnegative"));
    }
    Ok(())
}

fn zero_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows()).filter(|&r| m.row(r).iter().all(|v| *v == 0.0)).collect()
}

fn one_rotation(xl: &DMatrix<f64>, steps: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let mut m = xl.clone();
    for _ in 0..steps {
        let zeros = zero_rows(&m);
        let active: Vec<usize> = (0..m.nrows()).filter(|r| !zeros.contains(r)).collect();
        if zeros.is_empty() || active.is_empty() {
            break;
        }
        let a = active[rng.random_range(0..active.len())];
        let z = zeros[rng.random_range(0..zeros.len())];
        for _ in 0..MAX_ANGLE_RETRIES {
            let angle = rng.random::<f64>() * FRAC_PI_2;
            let mut trial = m.clone();
            givens_rotate_rows(&mut trial, a, z, angle);
            if trial.iter().all(|v| *v >= -1e-12) {
                m = trial;
                break;
            }
        }
    }
    m.apply(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    m
}

/// `n_samples` nonnegativity-preserving rotations of `xl`, each a composition
/// of [`DEFAULT_GIVENS_STEPS`] Givens rotations pairing a random active row
/// with a random all-zero row at an angle drawn uniformly from `[0, pi/2]`.
/// A composition stops early once no all-zero row is left.
pub fn rotate_features(xl: &FeatureMatrix, n_samples: usize, seed: u64) -> Result<Vec<FeatureMatrix>> {
    check_nonneg(&xl.xl)?;
    if zero_rows(&xl.xl).is_empty() {
        return Err(Error::infeasible("rotations need at least one all-zero feature row"));
    }
    let policy = RngPolicy::new(seed);
    Ok((0..n_samples)
        .map(|i| {
            let mut rng = policy.stream(i as u64, tags::ROTATION);
            FeatureMatrix::new(one_rotation(&xl.xl, DEFAULT_GIVENS_STEPS, &mut rng))
        })
        .collect())
}

/// Pre-activations `Z` with `relu(Z) = xl`: positive entries are kept and zero
/// entries become `-|N(0, scale^2)|`.
pub fn sample_preimage(xl: &FeatureMatrix, n_samples: usize, scale: f64, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    check_nonneg(&xl.xl)?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid("preimage scale must be finite and non-negative"));
    }
    let policy = RngPolicy::new(seed);
    Ok((0..n_samples)
        .map(|i| {
            let mut rng = policy.stream(i as u64, tags::PREIMAGE);
            let mut z = xl.xl.clone();
            for v in z.iter_mut() {
                if *v == 0.0 {
                    *v = -(scale * rng.sample::<f64, _>(StandardNormal)).abs();
                }
            }
            z
        })
        .collect())
}

/// Solves `Theta^T X_1 = Z` for two-layer weights, given `rank(X_1) = n`.
///
/// With the thin QR `X_1 = Q R`, the minimum-norm solution is
/// `Q R^-T Z^T` and every other solution adds `(I - Q Q^T) W`.
#[derive(Debug, Clone)]
pub struct ColumnSpaceSolver {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    x1: DMatrix<f64>,
}

impl ColumnSpaceSolver {
    pub fn new(x1: &DMatrix<f64>) -> Result<Self> {
        let (d, n) = x1.shape();
        if n > d {
            return Err(Error::infeasible(format!(
                "n = {n} exceeds d = {d}; Theta^T X_1 = Z is overdetermined"
            )));
        }
        let qr = x1.clone().qr();
        let r = qr.r();
        let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= 1e-10 * max {
            return Err(Error::infeasible("X_1 does not have full column rank"));
        }
        Ok(Self {
            q: qr.q(),
            r,
            x1: x1.clone(),
        })
    }

    pub fn d(&self) -> usize {
        self.x1.nrows()
    }

    /// Minimum-norm `Theta` (`d x p`).
    pub fn min_norm(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.x1.ncols() {
            return Err(Error::invalid("Z must have one column per training input"));
        }
        let m = self
            .r
            .transpose()
            .solve_lower_triangular(&z.transpose())
            .ok_or_else(|| Error::numeric("triangular solve failed"))?;
        Ok(&self.q * m)
    }

    /// `(I - Q Q^T) W`.
    pub fn project_out(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let qt = self.q.transpose();
        w - &self.q * (qt * w)
    }

    /// `max |Theta^T X_1 - Z|`.
    pub fn residual(&self, theta: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
        (theta.transpose() * &self.x1 - z).amax()
    }

    /// One column-space sample with noise `N(0, scale^2 / d)`.
    pub fn sample(&self, z: &DMatrix<f64>, scale: f64, rng: &mut StreamRng) -> Result<ThetaCandidate> {
        let d = self.d();
        let p = z.nrows();
        let mut theta = self.min_norm(z)?;
        if scale > 0.0 {
            let sd = scale / (d as f64).sqrt();
            let data: Vec<f64> = (0..d * p).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            theta += self.project_out(&DMatrix::from_vec(d, p, data));
        }
        let resid = self.residual(&theta, z);
        if resid > 1e-8 * z.amax().max(1.0) {
            return Err(Error::numeric(format!("column-space residual {resid:e} too large")));
        }
        Ok(ThetaCandidate {
            layers: vec![Layer::without_bias(theta)],
            log_prior_mass: 0.0,
        })
    }
}

fn least_squares_residual(x1: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    // Theta^T X_1 = Z  <=>  X_1^T Theta = Z^T
    let a = x1.transpose();
    let svd = SVD::new(a.clone(), true, true);
    match svd.solve(&z.transpose(), 1e-12) {
        Ok(theta) => (a * theta - z.transpose()).amax(),
        Err(_) => f64::NAN,
    }
}

/// `n_samples` two-layer weight matrices solving `Theta^T X_1 = Z`. Each
/// candidate carries prior mass 1; callers building a set reassign masses.
pub fn sample_colspace_theta(
    x1: &DMatrix<f64>,
    z: &DMatrix<f64>,
    n_samples: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<ThetaCandidate>> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid("column-space scale must be finite and non-negative"));
    }
    let solver = match ColumnSpaceSolver::new(x1) {
        Ok(s) => s,
        Err(Error::Infeasible(msg)) => {
            let resid = least_squares_residual(x1, z);
            return Err(Error::infeasible(format!("{msg}; best achievable residual {resid:e}")));
        }
        Err(e) => return Err(e),
    };
    let policy = RngPolicy::new(seed);
    (0..n_samples)
        .map(|i| solver.sample(z, scale, &mut policy.stream(i as u64, tags::COLSPACE)))
        .collect()
}

/// Equivalence class around the ReLU-feasible optimum, generated lazily.
///
/// Candidate `j` is `(rotation r, preimage i, column-space sample c)` with
/// `j = (r * n_preimage + i) * n_colspace + c`; all carry equal prior mass.
#[derive(Debug, Clone)]
pub struct EquivalenceClass {
    spec: EquivalenceClassSpec,
    target: GramTarget,
    base_features: FeatureMatrix,
    rotations: Vec<FeatureMatrix>,
    preimages: Vec<DMatrix<f64>>,
    colspace_seeds: Vec<u64>,
    solver: ColumnSpaceSolver,
}

impl EquivalenceClass {
    pub fn new(data: &Dataset, shape: &NetworkShape, spec: EquivalenceClassSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if shape.n_layers() != 1 || shape.activation() != Activation::Relu {
            return Err(Error::invalid(
                "equivalence classes are built for two-layer ReLU networks",
            ));
        }
        if shape.input_dim() != data.d() {
            return Err(Error::invalid("network input width does not match the dataset"));
        }
        let p = shape.feature_dim();
        if p < 3 {
            return Err(Error::invalid(
                "p must be at least 3 (two active rows plus one slack row)",
            ));
        }
        if data.n() > data.d() {
            return Err(Error::infeasible(format!(
                "n = {} exceeds d = {}; column-space solutions need n <= d",
                data.n(),
                data.d()
            )));
        }
        let solver = ColumnSpaceSolver::new(data.x1())?;
        let target = relu_optimal_gram(data.y(), data.noise_var())?;
        let base_features = factor_gram_nonneg(&target, p)?;
        let policy = RngPolicy::new(seed);
        let rotations = rotate_features(&base_features, spec.n_rotations, policy.derive_seed(0, tags::ROTATION))?;
        let mut preimages = Vec::with_capacity(spec.n_rotations * spec.n_preimage);
        for (r, rot) in rotations.iter().enumerate() {
            preimages.extend(sample_preimage(
                rot,
                spec.n_preimage,
                spec.preimage_scale,
                policy.derive_seed(r as u64, tags::PREIMAGE),
            )?);
        }
        let colspace_seeds = (0..preimages.len())
            .map(|k| policy.derive_seed(k as u64, tags::COLSPACE))
            .collect();
        Ok(Self {
            spec,
            target,
            base_features,
            rotations,
            preimages,
            colspace_seeds,
            solver,
        })
    }

    pub fn spec(&self) -> &EquivalenceClassSpec {
        &self.spec
    }

    pub fn target(&self) -> &GramTarget {
        &self.target
    }

    pub fn base_features(&self) -> &FeatureMatrix {
        &self.base_features
    }

    pub fn rotations(&self) -> &[FeatureMatrix] {
        &self.rotations
    }

    /// `(rotation, preimage, colspace)` indices of candidate `j`.
    pub fn indices(&self, j: usize) -> (usize, usize, usize) {
        let s = &self.spec;
        (
            j / (s.n_preimage * s.n_colspace),
            (j / s.n_colspace) % s.n_preimage,
            j % s.n_colspace,
        )
    }
}

impl CandidateSource for EquivalenceClass {
    fn len(&self) -> usize {
        self.spec.size()
    }

    fn log_prior_mass(&self, _j: usize) -> f64 {
        -(self.spec.size() as f64).ln()
    }

    fn candidate(&self, j: usize) -> Result<Cow<'_, ThetaCandidate>> {
        let (r, i, c) = self.indices(j);
        let k = r * self.spec.n_preimage + i;
        let mut rng = RngPolicy::new(self.colspace_seeds[k]).stream(c as u64, tags::COLSPACE);
        let mut theta = self
            .solver
            .sample(&self.preimages[k], self.spec.colspace_scale, &mut rng)?;
        theta.log_prior_mass = self.log_prior_mass(j);
        Ok(Cow::Owned(theta))
    }
}

/// Materialized `n_rotations x n_preimage x n_colspace` equivalence class.
pub fn build_equivalence_class(
    data: &Dataset,
    shape: &NetworkShape,
    spec: EquivalenceClassSpec,
    seed: u64,
) -> Result<CandidateSet> {
    EquivalenceClass::new(data, shape, spec, seed)?.collect_set()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn quarter_turn_swaps_rows() {
        let mut m = dmatrix![1.0, 2.0; 0.5, 0.0; 0.0, 0.0];
        givens_rotate_rows(&mut m, 0, 2, FRAC_PI_2);
        assert!((m - dmatrix![0.0, 0.0; 0.5, 0.0; 1.0, 2.0]).amax() < 1e-15);
    }

    #[test]
    fn rotation_requires_slack_row() {
        let f = FeatureMatrix::new(dmatrix![1.0, 0.0; 0.0, 1.0]);
        assert!(matches!(rotate_features(&f, 2, 0), Err(Error::Infeasible(_))));
        let neg = FeatureMatrix::new(dmatrix![-1.0, 0.0; 0.0, 0.0]);
        assert!(matches!(rotate_features(&neg, 2, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unique_preimage_for_positive_features() {
        let f = FeatureMatrix::new(dmatrix![1.0, 2.0; 0.5, 3.0]);
        for z in sample_preimage(&f, 3, 1.0, 4).unwrap() {
            assert_eq!(z, f.xl);
        }
    }

    #[test]
    fn preimage_rejects_negative_features() {
        let f = FeatureMatrix::new(dmatrix![1.0, -2.0]);
        assert!(matches!(sample_preimage(&f, 1, 1.0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn colspace_overdetermined_reports_residual() {
        let x1 = dmatrix![1.0, 2.0, 3.0];
        let z = dmatrix![1.0, 0.0, 1.0];
        match sample_colspace_theta(&x1, &z, 1, 0.0, 0) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("residual")),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(EquivalenceClassSpec::new(0, 1, 1).validate().is_err());
        assert!(EquivalenceClassSpec::new(1, 1, 1).validate().is_ok());
        assert_eq!(EquivalenceClassSpec::default().size(), 1000);
        let parsed: EquivalenceClassSpec =
            serde_json::from_str(r#"{"n_rotations":2,"n_preimage":3,"n_colspace":4}"#).unwrap();
        assert_eq!(parsed, EquivalenceClassSpec::new(2, 3, 4));
    }
}
