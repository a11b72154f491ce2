mod common;

use bnn_mixture::classify::{
    binary_class_prob, binary_run, gauss_hermite_sigmoid_expectation, mean_field_prob, multiclass_prob,
    multiclass_probs, multiclass_run, probit_sigmoid_expectation, sigmoid, LogitPosterior, MulticlassData,
    SigmoidExpectation,
};
use bnn_mixture::construct::{sample_gaussian_candidates, GaussianPriorSpec};
use bnn_mixture::data::{Activation, CandidateSet, Dataset, NetworkShape, TestPoint};
use bnn_mixture::features::forward_features;
use common::*;
use nalgebra::{dvector, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

struct Toy {
    data: Dataset,
    labels: Vec<usize>,
    test: TestPoint,
    shape: NetworkShape,
    set: CandidateSet,
}

fn toy(seed: u64, n: usize, p: usize, j: usize, g: f64) -> Toy {
    let mut r = rng(seed);
    let d = 2;
    let x1 = gauss(&mut r, d, n);
    let dir = gauss_vec(&mut r, d);
    let labels: Vec<usize> = (0..n).map(|i| usize::from(x1.column(i).dot(&dir) > 0.0)).collect();
    let y = DVector::from_iterator(n, labels.iter().map(|l| *l as f64));
    let shape = NetworkShape::two_layer(d, p, Activation::Relu).unwrap();
    Toy {
        data: Dataset::new(x1, y, g).unwrap(),
        labels,
        test: TestPoint::new(gauss_vec(&mut r, d)).unwrap(),
        set: sample_gaussian_candidates(&shape, j, GaussianPriorSpec::default(), seed).unwrap(),
        shape,
    }
}

#[test]
fn zero_logit_mean_is_exactly_half() {
    assert_eq!(probit_sigmoid_expectation(0.0, 0.37), 0.5);
    // all-zero features give mu_j = 0 for every candidate
    let t = toy(1, 6, 3, 4, 0.1);
    let zero = CandidateSet::uniform(
        t.set
            .candidates()
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.layers[0].weights.fill(0.0);
                c
            })
            .collect(),
    )
    .unwrap();
    assert_eq!(binary_class_prob(&zero, &t.data, &t.test, &t.shape).unwrap(), 0.5);
}

#[test]
fn saturation() {
    assert!((probit_sigmoid_expectation(10.0, 1e-4) - 1.0).abs() < 1e-6);
}

#[test]
fn binary_matches_probit_integral_monte_carlo() {
    let t = toy(2, 12, 5, 1, 0.2);
    let g = t.data.noise_var();
    let theta = &t.set.candidates()[0];
    let xl = forward_features(theta, t.data.x1(), &t.shape).unwrap().xl;
    let xt = forward_features(
        theta,
        &DMatrix::from_column_slice(2, 1, t.test.x1_tilde.as_slice()),
        &t.shape,
    )
    .unwrap()
    .xl
    .column(0)
    .into_owned();
    // exact conjugate posterior of w for the +-1 encoded labels, by explicit inverse
    let p = 5;
    let ys = t.data.y().map(|v| 2.0 * v - 1.0);
    let cov = (DMatrix::identity(p, p) * p as f64 + &xl * xl.transpose() / g)
        .try_inverse()
        .unwrap();
    let mean = &cov * &xl * &ys / g;
    let chol = cov.clone().cholesky().unwrap().l();
    let mut r = rng(77);
    let k = (std::f64::consts::PI / 8.0).sqrt();
    let draws: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let z = gauss_vec(&mut r, p);
            let w = &mean + &chol * z;
            let f = w.dot(&xt) + g.sqrt() * r.sample::<f64, _>(StandardNormal);
            phi(k * f)
        })
        .collect();
    let (mc, se) = mean_and_se(&draws);
    let got = binary_class_prob(&t.set, &t.data, &t.test, &t.shape).unwrap();
    assert!((got - mc).abs() < 3.0 * se, "{got} vs MC {mc} (se {se})");
}

#[test]
fn binary_is_monotone_in_component_means() {
    let run = bnn_mixture::classify::BinaryRun {
        weights: vec![0.3, 0.7],
        components: vec![vec![(-0.5, 0.2), (0.1, 0.4)]],
    };
    let base = run.prob(0, SigmoidExpectation::Probit);
    let mut up = run.clone();
    up.components[0][1].0 += 0.5;
    assert!(up.prob(0, SigmoidExpectation::Probit) > base);
    assert!(base > 0.0 && base < 1.0);
}

#[test]
fn binary_rejects_non_binary_labels() {
    let t = toy(3, 5, 3, 2, 0.1);
    let bad = Dataset::new(t.data.x1().clone(), t.data.y().map(|v| v * 2.0), 0.1).unwrap();
    assert!(binary_class_prob(&t.set, &bad, &t.test, &t.shape).is_err());
}

#[test]
fn two_class_symmetric_zero_means() {
    let l = LogitPosterior::independent(dvector![0.0, 0.0], &[0.5, 0.5]).unwrap();
    for k in 0..2 {
        assert_eq!(mean_field_prob(&l, k, SigmoidExpectation::Probit).unwrap(), 0.5);
    }
}

#[test]
fn three_class_saturation() {
    let l = LogitPosterior::independent(dvector![20.0, 0.0, 0.0], &[1e-8; 3]).unwrap();
    let p: Vec<f64> = (0..3)
        .map(|k| mean_field_prob(&l, k, SigmoidExpectation::Probit).unwrap())
        .collect();
    assert!((p[0] - 1.0).abs() < 1e-4 && p[1] < 1e-4 && p[2] < 1e-4);
}

#[test]
fn zero_variance_uses_sigmoid_limit() {
    let l = LogitPosterior::independent(dvector![1.2, -0.3], &[0.0, 0.0]).unwrap();
    let p = mean_field_prob(&l, 0, SigmoidExpectation::Probit).unwrap();
    assert!((p - sigmoid(1.5)).abs() < 1e-15);
}

#[test]
fn quadrature_matches_monte_carlo_sigmoid_integral() {
    let (m, v): (f64, f64) = (0.7, 2.5);
    let mut r = rng(5);
    let draws: Vec<f64> = (0..200_000)
        .map(|_| sigmoid(m + v.sqrt() * r.sample::<f64, _>(StandardNormal)))
        .collect();
    let (mc, se) = mean_and_se(&draws);
    let gh = gauss_hermite_sigmoid_expectation(m, v);
    assert!((gh - mc).abs() < 3.0 * se, "{gh} vs {mc}");
}

#[test]
fn two_class_mean_field_agrees_with_binary_on_toys() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let t = toy(100 + seed, 30, 8, 1, 0.1);
        let b = binary_class_prob(&t.set, &t.data, &t.test, &t.shape).unwrap();
        let mc = MulticlassData::from_labels(t.data.x1().clone(), &t.labels, 2, 0.1).unwrap();
        let m = multiclass_prob(&t.set, &mc, &t.test, &t.shape, 1).unwrap();
        worst = worst.max((b - m).abs());
    }
    assert!(worst <= 0.02, "worst gap {worst}");
}

#[test]
fn two_class_approximations_near_sampling_truth() {
    let t = toy(7, 30, 8, 1, 0.1);
    let mc = MulticlassData::from_labels(t.data.x1().clone(), &t.labels, 2, 0.1).unwrap();
    let run = multiclass_run(&t.set, &mc, std::slice::from_ref(&t.test), &t.shape).unwrap();
    let l = &run.logits[0][0];
    let (m, v) = l.difference(1, 0);
    let mut r = rng(8);
    let draws: Vec<f64> = (0..1_000_000)
        .map(|_| sigmoid(m + v.sqrt() * r.sample::<f64, _>(StandardNormal)))
        .collect();
    let (truth, _) = mean_and_se(&draws);
    let mf = run.prob(0, 1, SigmoidExpectation::Probit).unwrap();
    let b = binary_class_prob(&t.set, &t.data, &t.test, &t.shape).unwrap();
    assert!(
        (mf - truth).abs() < 0.02 && (b - truth).abs() < 0.02,
        "{mf} {b} {truth}"
    );
}

fn three_class(seed: u64) -> (MulticlassData, Vec<usize>, TestPoint, NetworkShape, CandidateSet) {
    let mut r = rng(seed);
    let n = 24;
    let x1 = gauss(&mut r, 2, n);
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let a = x1[(0, i)].atan2(x1[(1, i)]);
            ((a + std::f64::consts::PI) / (2.0 * std::f64::consts::PI / 3.0)) as usize % 3
        })
        .collect();
    let data = MulticlassData::from_labels(x1, &labels, 3, 0.1).unwrap();
    let shape = NetworkShape::two_layer(2, 10, Activation::Relu).unwrap();
    let set = sample_gaussian_candidates(&shape, 30, GaussianPriorSpec::default(), seed).unwrap();
    (data, labels, TestPoint::new(gauss_vec(&mut r, 2)).unwrap(), shape, set)
}

#[test]
fn multiclass_sums_near_one() {
    for seed in 0..5 {
        let (data, _, test, shape, set) = three_class(seed);
        let p = multiclass_probs(&set, &data, &test, &shape, false).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() <= 0.05, "sum {s}");
        let q = multiclass_probs(&set, &data, &test, &shape, true).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn class_permutation_permutes_outputs_exactly() {
    let (data, labels, test, shape, set) = three_class(11);
    let perm = [2, 0, 1];
    let permuted: Vec<usize> = labels.iter().map(|l| perm[*l]).collect();
    let pdata = MulticlassData::from_labels(data.x1().clone(), &permuted, 3, 0.1).unwrap();
    let a = multiclass_probs(&set, &data, &test, &shape, false).unwrap();
    let b = multiclass_probs(&set, &pdata, &test, &shape, false).unwrap();
    for k in 0..3 {
        assert_eq!(a[k], b[perm[k]]);
    }
}

#[test]
fn binary_run_weights_are_a_distribution() {
    let t = toy(12, 10, 4, 25, 0.1);
    let run = binary_run(&t.set, &t.data, std::slice::from_ref(&t.test), &t.shape).unwrap();
    assert!((run.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
