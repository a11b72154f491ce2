//! The J-component Gaussian mixture predictive and the statistics computed on it.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::blr::ComponentModel;
use crate::data::{test_matrix, CandidateSet, Dataset, NetworkShape, TestPoint};
use crate::error::{Error, Result};
use crate::features::forward_features;
use crate::source::CandidateSource;

pub const DEFAULT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePredictive {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub test_point_index: Option<usize>,
}

impl MixturePredictive {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != sds.len() {
            return Err(Error::invalid(
                "weights, means and sds must be non-empty and equally long",
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total = sorted_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}")));
        }
        if sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("components need finite means and positive sds"));
        }
        Ok(Self {
            weights,
            means,
            sds,
            test_point_index: None,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `component,weight,mean,sd`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["component", "weight", "mean", "sd"])?;
        for j in 0..self.len() {
            wtr.write_record(&[
                j.to_string(),
                self.weights[j].to_string(),
                self.means[j].to_string(),
                self.sds[j].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let (mut w, mut m, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::invalid("short mixture row"))?
                    .trim()
                    .parse()
                    .map_err(|e| Error::invalid(format!("bad number in mixture csv: {e}")))
            };
            w.push(field(1)?);
            m.push(field(2)?);
            s.push(field(3)?);
        }
        Self::new(w, m, s)
    }
}

/// Sum whose result does not depend on the order of `values`: the terms are
/// accumulated in ascending order.
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Posterior weights `softmax(log rho_j + log L_j)`, computed with a max shift.
pub fn mixture_weights(log_marginals: &[f64], log_prior_masses: &[f64]) -> Result<Vec<f64>> {
    if log_marginals.len() != log_prior_masses.len() || log_marginals.is_empty() {
        return Err(Error::invalid(
            "log marginals and prior masses must be equally long and non-empty",
        ));
    }
    let scores: Vec<f64> = log_marginals.iter().zip(log_prior_masses).map(|(l, r)| l + r).collect();
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::invalid("log scores must not be NaN or +inf"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("every candidate has zero posterior mass"));
    }
    let unnorm: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z = sorted_sum(&unnorm);
    let mut w: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
    let z2 = sorted_sum(&w);
    for v in &mut w {
        *v /= z2;
    }
    Ok(w)
}

/// Everything computed for one candidate set on one dataset.
#[derive(Debug, Clone)]
pub struct PredictiveRun {
    pub log_marginals: Vec<f64>,
    pub weights: Vec<f64>,
    /// `components[t][j] = (mean, var)` for test point `t`, candidate `j`.
    pub components: Vec<Vec<(f64, f64)>>,
}

impl PredictiveRun {
    pub fn mixture(&self, t: usize) -> Result<MixturePredictive> {
        let comps = &self.components[t];
        let mut mix = MixturePredictive::new(
            self.weights.clone(),
            comps.iter().map(|c| c.0).collect(),
            comps.iter().map(|c| c.1.sqrt()).collect(),
        )?;
        mix.test_point_index = Some(t);
        Ok(mix)
    }

    pub fn mixtures(&self) -> Result<Vec<MixturePredictive>> {
        (0..self.components.len()).map(|t| self.mixture(t)).collect()
    }
}

/// Evaluates every candidate (in parallel) at all test points at once.
/// Results are gathered in candidate order before any reduction.
pub fn evaluate_candidates<S: CandidateSource + ?Sized>(
    candidates: &S,
    data: &Dataset,
    tests: &[TestPoint],
    shape: &NetworkShape,
) -> Result<PredictiveRun> {
    if data.d() != shape.input_dim() {
        return Err(Error::invalid(format!(
            "dataset has d = {}, network expects {}",
            data.d(),
            shape.input_dim()
        )));
    }
    let xt = if tests.is_empty() {
        DMatrix::zeros(data.d(), 0)
    } else {
        test_matrix(tests)?
    };
    if xt.nrows() != data.d() {
        return Err(Error::invalid("test point dimension does not match the dataset"));
    }
    // (log marginal, (mean, variance) per test point)
    type Evaluated = (f64, Vec<(f64, f64)>);
    let per_candidate: Vec<Result<Evaluated>> = (0..candidates.len())
        .into_par_iter()
        .map(|j| {
            let inner = || -> Result<Evaluated> {
                let theta = candidates.candidate(j)?;
                let train = forward_features(&theta, data.x1(), shape)?;
                let model = ComponentModel::new(&train.xl, data.y(), data.noise_var())?;
                let preds = if xt.ncols() > 0 {
                    let test = forward_features(&theta, &xt, shape)?;
                    model.predict(&test.xl)?
                } else {
                    Vec::new()
                };
                Ok((model.log_marginal(), preds))
            };
            inner().map_err(|e| e.in_candidate(j))
        })
        .collect();
    let mut log_marginals = Vec::with_capacity(candidates.len());
    let mut components = vec![Vec::with_capacity(candidates.len()); xt.ncols()];
    for r in per_candidate {
        let (lm, preds) = r?;
        log_marginals.push(lm);
        for (t, c) in preds.into_iter().enumerate() {
            components[t].push(c);
        }
    }
    let weights = mixture_weights(&log_marginals, &candidates.log_prior_masses())?;
    Ok(PredictiveRun {
        log_marginals,
        weights,
        components,
    })
}

pub fn posterior_predictive(
    candidates: &CandidateSet,
    data: &Dataset,
    test: &TestPoint,
    shape: &NetworkShape,
) -> Result<MixturePredictive> {
    evaluate_candidates(candidates, data, std::slice::from_ref(test), shape)?.mixture(0)
}

#[inline]
fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

pub fn pdf_eval(mix: &MixturePredictive, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("grid contains non-finite values"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid must be sorted ascending"));
    }
    Ok(grid
        .iter()
        .map(|&g| {
            (0..mix.len())
                .map(|j| mix.weights[j] * normal_pdf(g, mix.means[j], mix.sds[j]))
                .sum()
        })
        .collect())
}

/// Number of components with weight strictly above `threshold`.
pub fn significant_component_count(mix: &MixturePredictive, threshold: f64) -> usize {
    mix.weights.iter().filter(|&&w| w > threshold).count()
}

/// `[min mean - k max sd, max mean + k max sd]`.
pub fn support(mix: &MixturePredictive, k: f64) -> (f64, f64) {
    let max_sd = mix.sds.iter().copied().fold(0.0, f64::max);
    let lo = mix.means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mix.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - k * max_sd, hi + k * max_sd)
}

pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Strict interior local maxima of the density on a uniform grid over the
/// mixture's 5-sd support.
pub fn local_mode_count(mix: &MixturePredictive, grid_points: usize) -> Result<usize> {
    if grid_points < 3 {
        return Err(Error::invalid("need at least 3 grid points"));
    }
    let (lo, hi) = support(mix, 5.0);
    let dens = pdf_eval(mix, &uniform_grid(lo, hi, grid_points))?;
    Ok(dens.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count())
}

/// Mean and variance by the law of total variance.
pub fn mixture_moments(mix: &MixturePredictive) -> (f64, f64) {
    let mean = sorted_sum(
        &(0..mix.len())
            .map(|j| mix.weights[j] * mix.means[j])
            .collect::<Vec<_>>(),
    );
    let var = sorted_sum(
        &(0..mix.len())
            .map(|j| mix.weights[j] * (mix.sds[j].powi(2) + (mix.means[j] - mean).powi(2)))
            .collect::<Vec<_>>(),
    );
    (mean, var)
}
