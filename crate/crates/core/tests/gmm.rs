use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ukmp::{build_reference, fit_gmm, gmr_condition, EmOptions, GaussianComponent, GmmModel};

fn cloud(seed: u64, n: usize, centers: &[[f64; 2]], std: f64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).unwrap();
    (0..n)
        .map(|i| {
            let c = centers[i % centers.len()];
            DVector::from_vec(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)])
        })
        .collect()
}

fn opts(seed: u64) -> EmOptions {
    EmOptions {
        seed,
        ..Default::default()
    }
}

#[test]
fn single_component_is_the_sample_moments() {
    let data = cloud(3, 400, &[[0.5, -1.0]], 0.3);
    let fit = fit_gmm(&data, 1, 1, &opts(0)).unwrap();
    let n = data.len() as f64;
    let mean = data.iter().fold(DVector::zeros(2), |a, x| a + x) / n;
    let cov = data
        .iter()
        .fold(DMatrix::zeros(2, 2), |a, x| a + (x - &mean) * (x - &mean).transpose())
        / n;
    let c = &fit.model.components()[0];
    assert!((c.weight - 1.0).abs() < 1e-12);
    assert!((&c.mean - &mean).amax() < 1e-12);
    assert!((&c.covariance - &cov).amax() < 1e-10);
}

#[test]
fn separates_two_clusters() {
    let data = cloud(11, 600, &[[-2.0, 1.0], [3.0, -1.5]], 0.2);
    let fit = fit_gmm(&data, 1, 2, &opts(5)).unwrap();
    assert!(fit.converged);
    let mut means: Vec<_> = fit.model.components().iter().map(|c| c.mean.clone()).collect();
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert!((&means[0] - DVector::from_vec(vec![-2.0, 1.0])).amax() < 0.05);
    assert!((&means[1] - DVector::from_vec(vec![3.0, -1.5])).amax() < 0.05);
    for c in fit.model.components() {
        assert!((c.weight - 0.5).abs() < 1e-9);
    }
}

#[test]
fn same_seed_same_fit() {
    let data = cloud(2, 300, &[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], 0.3);
    let a = fit_gmm(&data, 1, 3, &opts(9)).unwrap();
    let b = fit_gmm(&data, 1, 3, &opts(9)).unwrap();
    assert_eq!(a.model.components(), b.model.components());
    assert_eq!(a.log_likelihood, b.log_likelihood);
}

#[test]
fn rejects_bad_arguments() {
    let data = cloud(1, 10, &[[0.0, 0.0]], 1.0);
    assert!(fit_gmm(&data, 1, 0, &opts(0)).is_err());
    assert!(fit_gmm(&data, 1, 11, &opts(0)).is_err());
    assert!(fit_gmm(&data, 2, 2, &opts(0)).is_err());
    assert!(fit_gmm(&data, 0, 2, &opts(0)).is_err());
}

fn two_component_model() -> GmmModel {
    GmmModel::new(
        1,
        vec![
            GaussianComponent {
                weight: 0.3,
                mean: DVector::from_vec(vec![-1.0, 2.0]),
                covariance: DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]),
            },
            GaussianComponent {
                weight: 0.7,
                mean: DVector::from_vec(vec![1.5, -1.0]),
                covariance: DMatrix::from_row_slice(2, 2, &[0.8, -0.3, -0.3, 0.6]),
            },
        ],
    )
    .unwrap()
}

/// Scalar GMR written out by hand.
fn gmr_by_hand(x: f64) -> (f64, f64) {
    let comps = [(0.3, -1.0, 2.0, 0.5, 0.2, 0.4), (0.7, 1.5, -1.0, 0.8, -0.3, 0.6)];
    let mut h = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (w, mi, mo, sii, soi, soo) in comps {
        let d = x - mi;
        h.push(w * (-0.5 * d * d / sii).exp() / (2.0 * std::f64::consts::PI * sii).sqrt());
        m.push(mo + soi / sii * d);
        v.push(soo - soi * soi / sii);
    }
    let total: f64 = h.iter().sum();
    let h: Vec<f64> = h.iter().map(|a| a / total).collect();
    let mean: f64 = h.iter().zip(&m).map(|(a, b)| a * b).sum();
    let var: f64 = (0..2).map(|k| h[k] * (v[k] + m[k] * m[k])).sum::<f64>() - mean * mean;
    (mean, var)
}

#[test]
fn gmr_matches_hand_computation() {
    let model = two_component_model();
    for i in 0..=40 {
        let x = -3.0 + 0.15 * i as f64;
        let (m, c) = gmr_condition(&model, &DVector::from_element(1, x)).unwrap();
        let (em, ev) = gmr_by_hand(x);
        assert!((m[0] - em).abs() < 1e-12, "mean at {x}: {} vs {em}", m[0]);
        assert!((c[(0, 0)] - ev).abs() < 1e-12, "var at {x}: {} vs {ev}", c[(0, 0)]);
    }
}

#[test]
fn one_component_gmr_is_the_gaussian_conditional() {
    let mean = DVector::from_vec(vec![0.3, -0.2, 1.0, 0.5]);
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.2, -0.1, 0.3, 0.0, 0.8, 0.4, -0.2, 0.1, 0.0, 0.9, 0.5, -0.3, 0.2, 0.0, 0.7,
    ]);
    let cov = &a * a.transpose();
    let model = GmmModel::new(2, vec![GaussianComponent { weight: 1.0, mean: mean.clone(), covariance: cov.clone() }]).unwrap();
    let x = DVector::from_vec(vec![1.1, -0.4]);
    let s_ii = cov.view((0, 0), (2, 2)).into_owned();
    let s_oi = cov.view((2, 0), (2, 2)).into_owned();
    let s_oo = cov.view((2, 2), (2, 2)).into_owned();
    let s_ii_inv = s_ii.try_inverse().unwrap();
    let expect_mean = mean.rows(2, 2) + &s_oi * &s_ii_inv * (&x - mean.rows(0, 2));
    let expect_cov = &s_oo - &s_oi * &s_ii_inv * s_oi.transpose();
    let (m, c) = gmr_condition(&model, &x).unwrap();
    assert!((m - expect_mean).amax() < 1e-12);
    assert!((c - expect_cov).amax() < 1e-12);
}

#[test]
fn gmr_far_in_the_tails_stays_finite() {
    let model = two_component_model();
    for x in [-1e3, 1e3] {
        let (m, c) = gmr_condition(&model, &DVector::from_element(1, x)).unwrap();
        assert!(m[0].is_finite() && c[(0, 0)] > 0.0);
    }
}

#[test]
fn reference_keeps_input_order() {
    let model = two_component_model();
    let inputs: Vec<_> = [0.4, -2.0, 1.0].iter().map(|&x| DVector::from_element(1, x)).collect();
    let r = build_reference(&model, &inputs).unwrap();
    assert_eq!(r.inputs(), inputs.as_slice());
    let (m, _) = gmr_condition(&model, &inputs[1]).unwrap();
    assert_eq!(r.means()[1], m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_log_likelihood_never_decreases(seed in 0u64..1000, k in 1usize..5, spread in 0.05f64..1.0) {
        let data = cloud(seed, 240, &[[0.0, 0.0], [1.0, 2.0], [-1.5, 0.5], [2.0, -1.0]], spread);
        let fit = fit_gmm(&data, 1, k, &opts(seed)).unwrap();
        for w in fit.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
        for c in fit.model.components() {
            prop_assert!(c.covariance.clone().cholesky().is_some());
        }
    }

    #[test]
    fn gmr_covariance_is_symmetric_psd(seed in 0u64..1000, x in -3.0f64..3.0) {
        let data: Vec<DVector<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 0.4).unwrap();
            (0..300)
                .map(|i| {
                    let t = -2.0 + 4.0 * i as f64 / 299.0;
                    DVector::from_vec(vec![t, t.sin() + n.sample(&mut rng), t.cos() * n.sample(&mut rng)])
                })
                .collect()
        };
        let fit = fit_gmm(&data, 1, 3, &opts(seed)).unwrap();
        let (_, c) = gmr_condition(&fit.model, &DVector::from_element(1, x)).unwrap();
        prop_assert!((&c - c.transpose()).amax() <= 1e-9 * c.amax());
        let lmin = c.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(lmin >= -1e-9 * c.amax());
    }
}
