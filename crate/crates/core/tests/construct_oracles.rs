mod common;

use bnn_mixture::blr::{log_marginal_from_gram, log_marginal_likelihood, log_marginal_likelihood_spectral};
use bnn_mixture::construct::{
    build_equivalence_class, factor_gram_nonneg, optimal_gram, optimal_log_marginal, projected_optimal_gram,
    relu_optimal_gram, rotate_features, sample_colspace_theta, sample_gaussian_candidates, sample_preimage,
    EquivalenceClassSpec, GaussianPriorSpec, RELU_UNIT_VARIANCE_SCALE,
};
use bnn_mixture::data::{generate_dataset, Activation, NetworkShape, TargetGenerator};
use bnn_mixture::features::{forward_features, FeatureMatrix};
use bnn_mixture::source::CandidateSource;
use bnn_mixture::Error;
use common::*;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

#[test]
fn gaussian_candidates_single_and_variance() {
    let shape = NetworkShape::two_layer(10, 1, Activation::Relu).unwrap();
    let one = sample_gaussian_candidates(&shape, 1, GaussianPriorSpec::default(), 0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.candidates()[0].log_prior_mass, 0.0);

    let set = sample_gaussian_candidates(&shape, 10_000, GaussianPriorSpec::default(), 1).unwrap();
    let entries: Vec<f64> = set
        .candidates()
        .iter()
        .flat_map(|c| c.layers[0].weights.iter().copied())
        .collect();
    let m = entries.len() as f64;
    let var = entries.iter().map(|x| x * x).sum::<f64>() / m;
    let target = RELU_UNIT_VARIANCE_SCALE / 10.0;
    assert!((var / target - 1.0).abs() < 0.05, "{var} vs {target}");
    assert!(set
        .candidates()
        .iter()
        .all(|c| c.layers[0].bias.iter().all(|b| *b == 0.0)));
}

#[test]
fn deep_candidates_use_fan_in_variance() {
    let shape = NetworkShape::new(vec![4, 50, 3], Activation::Relu).unwrap();
    let set = sample_gaussian_candidates(&shape, 400, GaussianPriorSpec::default(), 2).unwrap();
    for (l, fan_in) in [(0, 4.0), (1, 50.0)] {
        let e: Vec<f64> = set
            .candidates()
            .iter()
            .flat_map(|c| c.layers[l].weights.iter().copied())
            .collect();
        let var = e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64;
        assert!((var * fan_in / RELU_UNIT_VARIANCE_SCALE - 1.0).abs() < 0.05);
    }
}

#[test]
fn optimal_gram_and_its_value() {
    let t = optimal_gram(&dvector![2.0, 0.0], 1.0).unwrap();
    assert_eq!(t.gram, dmatrix![3.0, 0.0; 0.0, 0.0]);
    let y = dvector![0.4, -1.1, 2.0, 0.3, -0.2];
    let g = 0.05;
    let t = optimal_gram(&y, g).unwrap();
    let v = log_marginal_from_gram(&t.gram, &y, g).unwrap();
    assert!(rel_err(v, optimal_log_marginal(&y, g).unwrap()) < 1e-10);
    assert!(matches!(optimal_gram(&dvector![0.1], 0.5), Err(Error::Infeasible(_))));
}

#[test]
fn relu_gram_examples() {
    let t = relu_optimal_gram(&dvector![1.0, -1.0], 0.01).unwrap();
    assert!((t.gram - dmatrix![0.995, 0.0; 0.0, 0.995]).amax() < 1e-15);

    let mut r = rng(3);
    for _ in 0..20 {
        let y = gauss_vec(&mut r, 6);
        let relu_outer = DMatrix::from_fn(6, 6, |i, j| (y[i] * y[j]).max(0.0));
        let pos = y.map(|v| v.max(0.0));
        let neg = y.map(|v| (-v).max(0.0));
        let split = &pos * pos.transpose() + &neg * neg.transpose();
        assert_eq!(relu_outer, split);
        let t = relu_optimal_gram(&y, 0.01).unwrap();
        let min_eig = t.gram.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-12);
    }

    let y = dvector![0.5, 1.0, 2.0];
    let a = relu_optimal_gram(&y, 0.1).unwrap();
    let b = optimal_gram(&y, 0.1).unwrap();
    assert!((a.gram - b.gram).amax() < 1e-15);
}

#[test]
fn projected_gram_examples() {
    let g: f64 = 0.01;
    let t = projected_optimal_gram(&dmatrix![1.0, 0.0], &dvector![1.0, 1.0], g).unwrap();
    let expect = dmatrix![1.0, 0.0; 0.0, 0.0] * (1.0 - g / 2.0);
    assert!((t.gram - expect).amax() < 1e-14);

    let data = generate_dataset(6, 4, g, TargetGenerator::StandardGaussianY, 1).unwrap();
    let a = projected_optimal_gram(data.x1(), data.y(), g).unwrap();
    let b = relu_optimal_gram(data.y(), g).unwrap();
    assert!((a.gram - b.gram).amax() < 1e-12);

    for seed in 0..10 {
        let data = generate_dataset(3, 7, g, TargetGenerator::StandardGaussianY, seed).unwrap();
        let proj = projected_optimal_gram(data.x1(), data.y(), g).unwrap();
        let full = relu_optimal_gram(data.y(), g).unwrap();
        let lp = log_marginal_from_gram(&proj.gram, data.y(), g).unwrap();
        let lf = log_marginal_from_gram(&full.gram, data.y(), g).unwrap();
        assert!(lp <= lf + 1e-9, "seed {seed}: {lp} > {lf}");
    }
}

#[test]
fn factor_examples() {
    let g = 0.01;
    let t = relu_optimal_gram(&dvector![1.0, -1.0], g).unwrap();
    let f = factor_gram_nonneg(&t, 3).unwrap();
    // rows carry sqrt(p) so that p^-1 X^T X hits the target
    let s = (3.0 * 0.995f64).sqrt();
    assert!((f.xl.clone() - dmatrix![s, 0.0; 0.0, s; 0.0, 0.0]).amax() < 1e-15);

    let mut r = rng(7);
    for n in 1..=8 {
        let y = gauss_vec(&mut r, n) * 3.0;
        let t = relu_optimal_gram(&y, g).unwrap();
        let f = factor_gram_nonneg(&t, 5).unwrap();
        assert!(f.xl.iter().all(|v| *v >= 0.0));
        let gram = (f.xl.transpose() * &f.xl) / 5.0;
        assert!((gram - &t.gram).amax() < 1e-12);
    }

    let mixed = relu_optimal_gram(&dvector![1.0, -2.0], g).unwrap();
    assert!(matches!(factor_gram_nonneg(&mixed, 1), Err(Error::Infeasible(_))));
}

fn factored(y: &DVector<f64>, p: usize) -> FeatureMatrix {
    factor_gram_nonneg(&relu_optimal_gram(y, 0.01).unwrap(), p).unwrap()
}

#[test]
fn rotations_preserve_gram_and_marginal() {
    let mut r = rng(8);
    let y = gauss_vec(&mut r, 6) * 2.0;
    let base = factored(&y, 7);
    let base_gram = base.gram();
    let base_l = log_marginal_likelihood(&base, &y, 0.01, 7).unwrap();
    let rots = rotate_features(&base, 20, 5).unwrap();
    assert_eq!(rots.len(), 20);
    let mut distinct = false;
    for rot in &rots {
        assert!(rot.xl.iter().all(|v| *v >= 0.0));
        assert!((rot.gram() - &base_gram).amax() < 1e-12);
        let l = log_marginal_likelihood(rot, &y, 0.01, 7).unwrap();
        assert!(rel_err(l, base_l) < 1e-8);
        distinct |= rot.xl != base.xl;
    }
    assert!(distinct);
    assert!(matches!(
        rotate_features(&FeatureMatrix::new(DMatrix::identity(2, 2)), 1, 0),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn preimages_invert_relu() {
    let xl = FeatureMatrix::new(dmatrix![1.0, 0.0, 2.0; 0.0, 0.0, 0.5]);
    let a = sample_preimage(&xl, 5, 1.0, 1).unwrap();
    let b = sample_preimage(&xl, 5, 1.0, 2).unwrap();
    for (za, zb) in a.iter().zip(&b) {
        assert_eq!(za.map(|v| v.max(0.0)), xl.xl);
        for k in 0..xl.xl.len() {
            if xl.xl[k] > 0.0 {
                assert_eq!(za[k], zb[k]);
            } else {
                assert!(za[k] <= 0.0 && za[k] != zb[k]);
            }
        }
    }
    let pos = FeatureMatrix::new(dmatrix![1.0, 2.0]);
    assert!(sample_preimage(&pos, 3, 1.0, 0).unwrap().iter().all(|z| *z == pos.xl));
}

#[test]
fn colspace_solutions() {
    let mut r = rng(9);
    let x1 = gauss(&mut r, 8, 5);
    let z = gauss(&mut r, 4, 5);
    let shape = NetworkShape::two_layer(8, 4, Activation::Relu).unwrap();

    let min = sample_colspace_theta(&x1, &z, 1, 0.0, 0).unwrap();
    let th = &min[0].layers[0].weights;
    assert!((th.transpose() * &x1 - &z).amax() < 1e-10);
    // minimum norm: Theta lies in col(X_1)
    let pinv = x1.clone().pseudo_inverse(1e-12).unwrap();
    let proj = &x1 * pinv;
    assert!((&proj * th - th).amax() < 1e-10);

    let samples = sample_colspace_theta(&x1, &z, 2, 1.0, 4).unwrap();
    assert_ne!(samples[0], samples[1]);
    let y = gauss_vec(&mut r, 5);
    let mut ls = Vec::new();
    for s in &samples {
        let feats = forward_features(s, &x1, &shape).unwrap();
        assert!((&feats.xl - z.map(|v| v.max(0.0))).amax() < 1e-8);
        ls.push(log_marginal_likelihood(&feats, &y, 0.05, 4).unwrap());
    }
    assert!(rel_err(ls[0], ls[1]) < 1e-8);

    let wide = gauss(&mut r, 3, 5);
    match sample_colspace_theta(&wide, &z, 1, 1.0, 0) {
        Err(Error::Infeasible(msg)) => assert!(msg.contains("residual")),
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn single_member_class_sits_at_the_conjectured_gram() {
    let g = 0.01;
    let data = generate_dataset(12, 8, g, TargetGenerator::StandardGaussianY, 2).unwrap();
    let shape = NetworkShape::two_layer(12, 6, Activation::Relu).unwrap();
    let set = build_equivalence_class(&data, &shape, EquivalenceClassSpec::new(1, 1, 1), 0).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.candidates()[0].log_prior_mass, 0.0);
    let feats = forward_features(&set.candidates()[0], data.x1(), &shape).unwrap();
    let got = log_marginal_likelihood(&feats, data.y(), g, 6).unwrap();
    let target = factored(data.y(), 6);
    let want = log_marginal_likelihood_spectral(&target, data.y(), g, 6).unwrap();
    assert!(rel_err(got, want) < 1e-8);
}

#[test]
fn class_members_share_gram_and_marginal() {
    let g = 0.01;
    let data = generate_dataset(20, 10, g, TargetGenerator::StandardGaussianY, 3).unwrap();
    let shape = NetworkShape::two_layer(20, 15, Activation::Relu).unwrap();
    let spec = EquivalenceClassSpec::new(3, 3, 3);
    let set = build_equivalence_class(&data, &shape, spec, 1).unwrap();
    assert_eq!(set.len(), 27);
    let masses = set.log_prior_masses();
    assert!(masses.iter().all(|m| (m + 27f64.ln()).abs() < 1e-15));
    let grams: Vec<DMatrix<f64>> = set
        .candidates()
        .iter()
        .map(|c| forward_features(c, data.x1(), &shape).unwrap().gram())
        .collect();
    for gm in &grams {
        assert!((gm - &grams[0]).amax() < 1e-10);
    }
    let ls: Vec<f64> = set
        .candidates()
        .iter()
        .map(|c| log_marginal_likelihood(&forward_features(c, data.x1(), &shape).unwrap(), data.y(), g, 15).unwrap())
        .collect();
    assert!(ls.iter().all(|l| rel_err(*l, ls[0]) < 1e-6));
}

#[test]
fn class_preconditions() {
    let g = 0.01;
    let data = generate_dataset(4, 6, g, TargetGenerator::StandardGaussianY, 0).unwrap();
    let shape = NetworkShape::two_layer(4, 6, Activation::Relu).unwrap();
    assert!(matches!(
        build_equivalence_class(&data, &shape, EquivalenceClassSpec::new(1, 1, 1), 0),
        Err(Error::Infeasible(_))
    ));
    let data = generate_dataset(6, 4, g, TargetGenerator::StandardGaussianY, 0).unwrap();
    let narrow = NetworkShape::two_layer(6, 2, Activation::Relu).unwrap();
    assert!(build_equivalence_class(&data, &narrow, EquivalenceClassSpec::new(1, 1, 1), 0).is_err());
    let ident = NetworkShape::two_layer(6, 5, Activation::Identity).unwrap();
    assert!(build_equivalence_class(&data, &ident, EquivalenceClassSpec::new(1, 1, 1), 0).is_err());
}

#[test]
fn lazy_class_matches_materialized_set() {
    let data = generate_dataset(10, 6, 0.01, TargetGenerator::StandardGaussianY, 4).unwrap();
    let shape = NetworkShape::two_layer(10, 8, Activation::Relu).unwrap();
    let spec = EquivalenceClassSpec::new(2, 2, 2);
    let lazy = bnn_mixture::construct::EquivalenceClass::new(&data, &shape, spec, 6).unwrap();
    let set = build_equivalence_class(&data, &shape, spec, 6).unwrap();
    for j in [0, 3, 7] {
        assert_eq!(*lazy.candidate(j).unwrap(), set.candidates()[j]);
    }
    assert_eq!(lazy.indices(5), (1, 0, 1));
}
