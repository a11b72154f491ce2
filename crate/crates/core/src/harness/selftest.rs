//! Quick oracle checks runnable from the command line.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ExperimentOutput, Table};
use crate::blr::log_marginal_from_gram;
use crate::blr::{log_marginal_likelihood, log_marginal_likelihood_spectral, ComponentModel};
use crate::classify::probit_sigmoid_expectation;
use crate::construct::{optimal_gram, optimal_log_marginal, relu_feature_variance, RELU_UNIT_VARIANCE_SCALE};
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::mixture::{mixture_weights, sorted_sum};
use crate::rng::{RngPolicy, StreamRng};

const INSTANCES: usize = 50;

fn gaussian(rng: &mut StreamRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

struct Instance {
    xl: DMatrix<f64>,
    xt: DVector<f64>,
    y: DVector<f64>,
    g: f64,
}

fn instance(policy: &RngPolicy, i: usize) -> Instance {
    let mut rng = policy.stream(i as u64, "selftest.instance");
    let n = rng.random_range(1..=8);
    let p = rng.random_range(1..=8);
    Instance {
        xl: gaussian(&mut rng, p, n),
        xt: gaussian(&mut rng, p, 1).column(0).into_owned(),
        y: gaussian(&mut rng, n, 1).column(0).into_owned(),
        g: 10f64.powf(rng.random_range(-2.0..0.0)),
    }
}

/// Explicit-inverse predictive mean and variance.
fn inverse_oracle(inst: &Instance) -> Option<(f64, f64)> {
    let p = inst.xl.nrows() as f64;
    let n = inst.xl.ncols();
    let kn = inst.xl.transpose() * &inst.xl / p + DMatrix::identity(n, n) * inst.g;
    let mean = (inst.xt.transpose() * &inst.xl * kn.try_inverse()? * &inst.y)[0] / p;
    let pp = inst.xl.nrows();
    let kp = &inst.xl * inst.xl.transpose() / p + DMatrix::identity(pp, pp) * inst.g;
    let var = inst.g + inst.g / p * (inst.xt.transpose() * kp.try_inverse()? * &inst.xt)[0];
    Some((mean, var))
}

/// Runs each check and reports `check, passed, max_error, tolerance`.
pub fn run_selftest(seed: u64) -> Result<ExperimentOutput> {
    let policy = RngPolicy::new(seed);
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    let mut err_pred: f64 = 0.0;
    let mut err_lml: f64 = 0.0;
    for i in 0..INSTANCES {
        let inst = instance(&policy, i);
        let xt = DMatrix::from_column_slice(inst.xt.len(), 1, inst.xt.as_slice());
        let (m0, v0) = inverse_oracle(&inst).unwrap_or((f64::NAN, f64::NAN));
        for model in [
            ComponentModel::dual(&inst.xl, &inst.y, inst.g)?,
            ComponentModel::primal(&inst.xl, &inst.y, inst.g)?,
        ] {
            let (m, v) = model.predict(&xt)?[0];
            err_pred = err_pred.max(rel(m, m0).min((m - m0).abs())).max(rel(v, v0));
        }
        let fm = FeatureMatrix::new(inst.xl.clone());
        let p = inst.xl.nrows();
        let dense = log_marginal_likelihood(&fm, &inst.y, inst.g, p)?;
        let spec = log_marginal_likelihood_spectral(&fm, &inst.y, inst.g, p)?;
        err_lml = err_lml.max(rel(spec, dense));
    }
    checks.push(("predictive_forms_vs_inverse", err_pred, 1e-10));
    checks.push(("marginal_dense_vs_spectral", err_lml, 1e-10));

    let mut err_opt: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = policy.stream(i as u64, "selftest.optimum");
        let n = rng.random_range(2..=10);
        let y = gaussian(&mut rng, n, 1).column(0).into_owned() * 2.0;
        let g = 0.05;
        let target = optimal_gram(&y, g)?;
        let at_gram = log_marginal_from_gram(&target.gram, &y, g)?;
        err_opt = err_opt.max(rel(at_gram, optimal_log_marginal(&y, g)?));
    }
    checks.push(("closed_form_optimum", err_opt, 1e-10));

    let lm = [-3.0, 1.5, 0.25, -40.0];
    let lp = [-(4f64).ln(); 4];
    let w = mixture_weights(&lm, &lp)?;
    let shifted: Vec<f64> = lm.iter().map(|v| v + 1234.5).collect();
    let w2 = mixture_weights(&shifted, &lp)?;
    let shift_err = w.iter().zip(&w2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(("weights_sum_to_one", (sorted_sum(&w) - 1.0).abs(), 1e-12));
    checks.push(("weights_shift_invariant", shift_err, 1e-14));
    checks.push((
        "probit_midpoint",
        (probit_sigmoid_expectation(0.0, 2.0) - 0.5).abs(),
        0.0,
    ));
    checks.push((
        "relu_unit_variance_constant",
        (relu_feature_variance(RELU_UNIT_VARIANCE_SCALE) - 1.0).abs(),
        1e-15,
    ));

    let mut table = Table::new("selftest", &["check", "passed", "max_error", "tolerance"]);
    let mut failures = Vec::new();
    for (name, err, tol) in checks {
        let ok = err <= tol;
        if !ok {
            failures.push(format!("{name}: error {err:e} exceeds {tol:e}"));
        }
        table.push(vec![name.into(), usize::from(ok).into(), err.into(), tol.into()]);
    }
    Ok(ExperimentOutput {
        experiment: "selftest",
        tables: vec![table],
        failures,
    })
}
