//! Domain types shared by every module, plus synthetic data generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tags, RngPolicy};

/// Training inputs (columns are samples), targets and observation noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x1: DMatrix<f64>,
    y: DVector<f64>,
    noise_var: f64,
}

impl Dataset {
    pub fn new(x1: DMatrix<f64>, y: DVector<f64>, noise_var: f64) -> Result<Self> {
        if x1.nrows() == 0 || x1.ncols() == 0 {
            return Err(Error::invalid("dataset needs d >= 1 and n >= 1"));
        }
        if y.len() != x1.ncols() {
            return Err(Error::invalid(format!(
                "targets have length {} but inputs have {} columns",
                y.len(),
                x1.ncols()
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise_var must be positive, got {noise_var}")));
        }
        if x1.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite entries"));
        }
        Ok(Self { x1, y, noise_var })
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn d(&self) -> usize {
        self.x1.nrows()
    }

    pub fn n(&self) -> usize {
        self.x1.ncols()
    }

    /// Same inputs and targets with a different noise level.
    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        Self::new(self.x1.clone(), self.y.clone(), noise_var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }
}

/// Layer widths `[d, d_2, ..., p]` and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    widths: Vec<usize>,
    activation: Activation,
}

impl NetworkShape {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("a network needs at least an input and a feature layer"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { widths, activation })
    }

    pub fn two_layer(d: usize, p: usize, activation: Activation) -> Result<Self> {
        Self::new(vec![d, p], activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Width of the last hidden layer, `p`.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// One interior layer: `x_next = act(weights^T x - bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weights.ncols() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weights.ncols()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn without_bias(weights: DMatrix<f64>) -> Self {
        let bias = DVector::zeros(weights.ncols());
        Self { weights, bias }
    }
}

/// A fixed realization of all interior parameters together with its prior mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCandidate {
    pub layers: Vec<Layer>,
    pub log_prior_mass: f64,
}

impl ThetaCandidate {
    pub fn new(layers: Vec<Layer>, log_prior_mass: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("candidate has no layers"));
        }
        if !(log_prior_mass <= 0.0 && log_prior_mass.is_finite()) {
            return Err(Error::invalid(format!(
                "prior mass must lie in (0, 1], got log mass {log_prior_mass}"
            )));
        }
        Ok(Self { layers, log_prior_mass })
    }

    pub fn check_shape(&self, shape: &NetworkShape) -> Result<()> {
        if self.layers.len() != shape.n_layers() {
            return Err(Error::invalid(format!(
                "candidate has {} layers, shape expects {}",
                self.layers.len(),
                shape.n_layers()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weights.shape();
            if rows != shape.widths()[l] || cols != shape.widths()[l + 1] || layer.bias.len() != cols {
                return Err(Error::invalid(format!(
                    "layer {l} is {rows}x{cols}, shape expects {}x{}",
                    shape.widths()[l],
                    shape.widths()[l + 1]
                )));
            }
        }
        Ok(())
    }
}

/// The discrete prior over interior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    candidates: Vec<ThetaCandidate>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<ThetaCandidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("candidate set must be non-empty"));
        }
        let total: f64 = candidates.iter().map(|c| c.log_prior_mass.exp()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("prior masses sum to {total}, not 1")));
        }
        Ok(Self { candidates })
    }

    /// Assigns every candidate mass `1/J`.
    pub fn uniform(mut candidates: Vec<ThetaCandidate>) -> Result<Self> {
        let log_mass = -(candidates.len() as f64).ln();
        for c in &mut candidates {
            c.log_prior_mass = log_mass;
        }
        Self::new(candidates)
    }

    pub fn candidates(&self) -> &[ThetaCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn log_prior_masses(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.log_prior_mass).collect()
    }

    pub fn into_inner(self) -> Vec<ThetaCandidate> {
        self.candidates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    pub x1_tilde: DVector<f64>,
}

impl TestPoint {
    pub fn new(x1_tilde: DVector<f64>) -> Result<Self> {
        if x1_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("test point contains non-finite entries"));
        }
        Ok(Self { x1_tilde })
    }

    pub fn dim(&self) -> usize {
        self.x1_tilde.len()
    }
}

/// Stacks test points as the columns of a `d x m` matrix.
pub fn test_matrix(points: &[TestPoint]) -> Result<DMatrix<f64>> {
    let d = points
        .first()
        .map(TestPoint::dim)
        .ok_or_else(|| Error::invalid("no test points"))?;
    if points.iter().any(|t| t.dim() != d) {
        return Err(Error::invalid("test points have differing dimensions"));
    }
    Ok(DMatrix::from_fn(d, points.len(), |i, j| points[j].x1_tilde[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetGenerator {
    /// Targets drawn iid standard normal.
    #[default]
    StandardGaussianY,
    /// Targets from a fixed random two-layer ReLU teacher plus observation noise.
    TeacherNetwork,
}

impl TargetGenerator {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetGenerator::StandardGaussianY => "standard_gaussian_y",
            TargetGenerator::TeacherNetwork => "teacher_network",
        }
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Divides by the population standard deviation. The mean is kept.
pub fn standardize_scale(y: &mut DVector<f64>) -> Result<()> {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::invalid("targets have zero variance and cannot be standardized"));
    }
    *y /= var.sqrt();
    Ok(())
}

/// Population variance `n^-1 sum (y - mean)^2`.
pub fn population_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

pub fn generate_dataset(d: usize, n: usize, noise_var: f64, generator: TargetGenerator, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::invalid("d and n must be at least 1"));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::invalid(format!("noise_var must be positive, got {noise_var}")));
    }
    let policy = RngPolicy::new(seed);
    let x1 = gaussian_matrix(&mut policy.stream(0, tags::DATA_X), d, n, 1.0);
    let mut y = match generator {
        TargetGenerator::StandardGaussianY => {
            let mut rng = policy.stream(0, tags::DATA_Y);
            DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
        }
        TargetGenerator::TeacherNetwork => {
            let hidden = d.max(2);
            let mut rng = policy.stream(0, tags::TEACHER);
            let w1 = gaussian_matrix(&mut rng, d, hidden, (2.0 / d as f64).sqrt());
            let a = gaussian_matrix(&mut rng, hidden, 1, (1.0 / hidden as f64).sqrt());
            let h = (w1.transpose() * &x1).map(|v| Activation::Relu.apply(v));
            let clean = h.transpose() * a;
            let mut noise = policy.stream(0, tags::TEACHER_NOISE);
            let sd = noise_var.sqrt();
            DVector::from_fn(n, |i, _| clean[(i, 0)] + sd * noise.sample::<f64, _>(StandardNormal))
        }
    };
    standardize_scale(&mut y)?;
    Dataset::new(x1, y, noise_var)
}

pub fn generate_test_points(d: usize, m: usize, seed: u64) -> Result<Vec<TestPoint>> {
    if d == 0 || m == 0 {
        return Err(Error::invalid("d and m must be at least 1"));
    }
    let mut rng = RngPolicy::new(seed).stream(0, tags::TEST_POINTS);
    (0..m)
        .map(|_| TestPoint::new(DVector::from_fn(d, |_, _| rng.sample(StandardNormal))))
        .collect()
}
