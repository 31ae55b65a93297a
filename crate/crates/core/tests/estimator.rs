mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use subspace_gmm::estimator::{
    augmented_eigen, chi2_rank_statistic, estimate_rank, estimate_sigma, gmm_from_pilot, gmm_objective, pca,
    subspace_metrics, thresholded_pinv, thresholded_pinv_diagonal, two_step_gmm, weighted_eigen, GmmOptions,
    WeightMatrix, WeightShape,
};
use subspace_gmm::models::{Dataset, FactorModel};
use subspace_gmm::moments::{materialize, MomentFunctionSet, Storage};
use subspace_gmm::rng::{self, stage};
use subspace_gmm::{stats, MomentMatrix};

use common::{gaussian, random_orthonormal, random_psd};

fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

/// `g(U)ᵀ W̄ g(U)` with `g(U) = vec((I − UUᵀ)V)` and `W̄ = W ⊗ I_p`, built explicitly.
fn objective_kronecker(v: &DMatrix<f64>, w: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    let (p, m) = v.shape();
    let resid = (DMatrix::identity(p, p) - u * u.transpose()) * v;
    let g = DMatrix::from_column_slice(p * m, 1, resid.as_slice());
    let w_bar = w.kronecker(&DMatrix::<f64>::identity(p, p));
    (g.transpose() * w_bar * g)[(0, 0)]
}

#[test]
fn objective_matches_kronecker_form() {
    for i in 0..200u64 {
        let mut g = rng::substream(1, &[i]);
        let (p, m) = (2 + i as usize % 5, 1 + i as usize % 6);
        let r = 1 + i as usize % p;
        let v = gaussian(p, m, &mut g);
        let w = random_psd(m, m, &mut g);
        let u = random_orthonormal(p, r, &mut g);
        let trace_form = gmm_objective(&v, &WeightMatrix::full(w.clone()).unwrap(), &u).unwrap();
        let direct = objective_kronecker(&v, &w, &u);
        assert!((trace_form - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{trace_form} vs {direct}");
    }
}

#[test]
fn objective_vanishes_for_full_projection() {
    let mut g = rng::substream(2, &[]);
    let v = gaussian(4, 3, &mut g);
    let w = WeightMatrix::full(random_psd(3, 3, &mut g)).unwrap();
    let q = gmm_objective(&v, &w, &DMatrix::identity(4, 4)).unwrap();
    assert!(q.abs() < 1e-12);
}

#[test]
fn sigma_hand_computation() {
    let data = Dataset::new(vec![0.0, 1.0, 0.0, -1.0], 2, 2, None).unwrap();
    let set = MomentFunctionSet::factor(2, 0.0).unwrap().select(&[0]).unwrap();
    let v = materialize(&data, &set, Storage::Cached).unwrap();
    let s = estimate_sigma(&v, &dm(2, 1, &[1.0, 0.0])).unwrap();
    assert_eq!(s.sigma, dm(1, 1, &[1.0]));
}

#[test]
fn sigma_vanishes_inside_pilot_span() {
    // samples on the x₁ axis, f = x and the axis-1 second moment
    let data = Dataset::new(vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0], 3, 2, None).unwrap();
    let set = MomentFunctionSet::factor(2, 0.0).unwrap().select(&[0, 1]).unwrap();
    for storage in [Storage::Cached, Storage::Streaming] {
        let v = materialize(&data, &set, storage).unwrap();
        let s = estimate_sigma(&v, &dm(2, 1, &[1.0, 0.0])).unwrap();
        assert_eq!(s.sigma, DMatrix::zeros(2, 2));
    }
}

#[test]
fn sigma_is_symmetric_with_nonnegative_diagonal() {
    let mut g = rng::substream(3, &[]);
    let stack: Vec<f64> = (0..300 * 5 * 4).map(|_| common::normal(&mut g)).collect();
    let v = MomentMatrix::from_evaluations(300, 5, 4, stack).unwrap();
    let s = estimate_sigma(&v, &random_orthonormal(5, 2, &mut g)).unwrap().sigma;
    assert_eq!(s, s.transpose());
    assert!(s.diagonal().iter().all(|&d| d >= 0.0));
}

#[test]
fn thresholding_examples() {
    let mut g = rng::substream(4, &[]);
    let s = random_psd(4, 6, &mut g);
    let w = thresholded_pinv(&s, 0.0).unwrap().weight;
    assert!((w.matrix() * &s - DMatrix::identity(4, 4)).amax() < 1e-8);

    let t = thresholded_pinv(&dm(2, 2, &[2.0, 0.0, 0.0, 1e-9]), 0.01).unwrap();
    assert_eq!(t.retained, 1);
    assert!((t.weight.matrix() - dm(2, 2, &[0.5, 0.0, 0.0, 0.0])).amax() < 1e-15);

    let t = thresholded_pinv(&dm(2, 2, &[1e-3, 0.0, 0.0, 1e-4]), 0.01).unwrap();
    assert!(t.is_degenerate() && t.weight.is_zero());

    let d = thresholded_pinv_diagonal(&dm(2, 2, &[4.0, 1.5, 1.5, 2.0]), 0.01).unwrap();
    assert_eq!(d.weight.matrix(), &dm(2, 2, &[0.25, 0.0, 0.0, 0.5]));
}

#[test]
fn deterministic_moments_fall_back_to_identity() {
    // f_ℓ ≡ b_ℓ, constant: Σ̂ = 0, every eigenvalue is thresholded away
    let b = dm(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
    let n = 10;
    let stack: Vec<f64> = (0..n).flat_map(|_| b.as_slice().to_vec()).collect();
    let v = MomentMatrix::from_evaluations(n, 4, 2, stack).unwrap();
    let res = two_step_gmm(&v, &GmmOptions::fixed(2)).unwrap();
    assert!(res.sigma.sigma.amax() < 1e-24);
    assert_eq!(res.weight.matrix(), &DMatrix::identity(2, 2));
    assert!(res.estimate.warnings.iter().any(|w| w.contains("falling back")));
    let truth = subspace_gmm::linalg::left_singular_basis(&b);
    assert!(subspace_metrics(&res.estimate.u, &truth).unwrap().distance < 1e-12);
}

fn factor_setup(r: usize, mu: f64) -> FactorModel {
    let mu_z: Vec<f64> = (0..r).map(|k| if k % 2 == 0 { mu } else { -mu }).collect();
    FactorModel::draw(10, r, &mu_z, 2.0, &mut rng::substream(77, &[stage::PARAMETERS])).unwrap()
}

fn factor_moments(model: &FactorModel, n: usize, rep: u64) -> (Dataset, MomentMatrix) {
    let data = model.sample(n, &mut rng::substream(77, &[n as u64, rep, stage::DATA])).unwrap();
    let v = materialize(&data, &MomentFunctionSet::factor(10, 2.0).unwrap(), Storage::Cached).unwrap();
    (data, v)
}

#[test]
fn quadrupling_n_halves_the_median_error() {
    let model = factor_setup(2, 2.0);
    let truth = model.truth().unwrap().basis;
    let median_error = |n: usize| {
        let errs: Vec<f64> = (0..100)
            .map(|rep| {
                let (_, v) = factor_moments(&model, n, rep);
                let est = two_step_gmm(&v, &GmmOptions::fixed(2)).unwrap().estimate;
                subspace_metrics(&est.u, &truth).unwrap().distance
            })
            .collect();
        stats::median(&errs)
    };
    let ratio = median_error(1600) / median_error(400);
    assert!((0.4..=0.62).contains(&ratio), "ratio {ratio}");
}

#[test]
fn threshold_rank_is_consistent_for_the_factor_model() {
    let model = factor_setup(2, 2.0);
    let n = 500;
    let hits = (0..100)
        .filter(|&rep| {
            let (_, v) = factor_moments(&model, n, rep);
            let w = two_step_gmm(&v, &GmmOptions::fixed(2)).unwrap().weight;
            let est = estimate_rank(v.v(), &w, n, Some(1.0 / (n as f64).sqrt()), 0.95).unwrap();
            est.r_tau == 2
        })
        .count();
    assert!(hits >= 95, "r̂_τ = 2 in {hits} of 100");
}

#[test]
fn rank_table_marks_undefined_degrees_of_freedom() {
    let mut g = rng::substream(5, &[]);
    let v = gaussian(5, 2, &mut g);
    let est = estimate_rank(&v, &WeightMatrix::identity(2), 100, Some(0.01), 0.95).unwrap();
    assert_eq!(est.rows.len(), 6);
    for row in &est.rows {
        assert_eq!(row.stat_k.is_some(), row.k < 2, "k = {}", row.k);
        assert_eq!(row.lambda_k.is_some(), row.k > 0);
    }
    assert!(est.r_tau <= 2 && est.r_eta <= 2);
    let csv = est.to_csv();
    assert!(csv.starts_with("k,lambda_k,stat_k,eta_k\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn rank_statistic_examples() {
    let mut g = rng::substream(6, &[]);
    // exactly rank 2
    let v = random_orthonormal(5, 2, &mut g) * gaussian(2, 4, &mut g);
    let w = WeightMatrix::full(random_psd(4, 4, &mut g)).unwrap();
    let scale = chi2_rank_statistic(&v, &w, 100, 0).unwrap();
    assert!(chi2_rank_statistic(&v, &w, 100, 2).unwrap().abs() < 1e-12 * scale);
    assert!(chi2_rank_statistic(&v, &w, 100, 5).is_err());

    // invariance under V → QV
    let v = gaussian(5, 4, &mut g);
    let q = random_orthonormal(5, 5, &mut g);
    for k in 0..4 {
        let a = chi2_rank_statistic(&v, &w, 1000, k).unwrap();
        let b = chi2_rank_statistic(&(&q * &v), &w, 1000, k).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn augmentation_examples() {
    let mut g = rng::substream(7, &[]);
    let v = gaussian(6, 4, &mut g);
    let w = WeightMatrix::full(random_psd(4, 4, &mut g)).unwrap();
    let m = random_psd(6, 2, &mut g);
    let base = weighted_eigen(&v, &w, 2).unwrap();
    let k0 = augmented_eigen(0.0, &m, &v, &w, 2).unwrap();
    assert_eq!(base.u, k0.u);

    // aligned: V and M both inside span(U*)
    let u_star = random_orthonormal(6, 2, &mut g);
    let v = &u_star * gaussian(2, 4, &mut g);
    let m = &u_star * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0])) * u_star.transpose();
    for kappa in [0.1, 1.0, 50.0] {
        let est = augmented_eigen(kappa, &m, &v, &w, 2).unwrap();
        assert!(subspace_metrics(&est.u, &u_star).unwrap().distance < 1e-10);
    }

    let mut asym = m.clone();
    asym[(0, 1)] += 1.0;
    assert!(augmented_eigen(1.0, &asym, &v, &w, 2).is_err());
    assert!(augmented_eigen(-1.0, &m, &v, &w, 2).is_err());
}

#[test]
fn metric_examples() {
    let mut g = rng::substream(8, &[]);
    let u = random_orthonormal(7, 3, &mut g);
    let same = subspace_metrics(&u, &u).unwrap();
    assert!(same.distance < 1e-12 && same.sin_theta.iter().all(|&s| s < 1e-7));

    // rotation equivariance
    let v = random_orthonormal(7, 3, &mut g);
    let q = random_orthonormal(7, 7, &mut g);
    let a = subspace_metrics(&u, &v).unwrap();
    let b = subspace_metrics(&(&q * &u), &(&q * &v)).unwrap();
    assert!((a.distance - b.distance).abs() < 1e-10);
    assert!((a.psi_trace - b.psi_trace).abs() < 1e-10);
    assert!(subspace_metrics(&u, &random_orthonormal(7, 2, &mut g)).is_err());
}

#[test]
fn iterated_gmm_keeps_the_rank() {
    let model = factor_setup(2, 2.0);
    let (_, v) = factor_moments(&model, 400, 0);
    let opts = GmmOptions { iterations: 3, ..GmmOptions::fixed(2) };
    let res = two_step_gmm(&v, &opts).unwrap();
    assert_eq!(res.estimate.r, 2);
    let pilot = weighted_eigen(v.v(), &WeightMatrix::identity(v.m()), 2).unwrap().u;
    let again = gmm_from_pilot(&v, &pilot, &opts).unwrap();
    assert_eq!(res.estimate.u, again.estimate.u);
}

#[test]
fn diagonal_shape_uses_a_diagonal_weight() {
    let model = factor_setup(2, 2.0);
    let (data, v) = factor_moments(&model, 300, 1);
    let res = two_step_gmm(&v, &GmmOptions::fixed(2).with_shape(WeightShape::Diagonal)).unwrap();
    let w = res.weight.matrix();
    assert_eq!(w, &DMatrix::from_diagonal(&w.diagonal()));
    assert_eq!(pca(&data, 2).unwrap().u.ncols(), 2);
}

#[test]
fn chi2_quantile_matches_statrs() {
    for dof in [1.0, 2.0, 3.5, 18.0, 72.0, 200.0] {
        let oracle = ChiSquared::new(dof).unwrap();
        for prob in [0.01, 0.05, 0.5, 0.95, 0.99] {
            let q = stats::chi2_quantile(prob, dof).unwrap();
            let expect = oracle.inverse_cdf(prob);
            assert!((q - expect).abs() <= 1e-8 * expect, "dof {dof}, p {prob}: {q} vs {expect}");
            assert!((stats::chi2_cdf(expect, dof) - oracle.cdf(expect)).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn estimate_invariants(seed in 0u64..u64::MAX, p in 2usize..9, m in 1usize..8, r_frac in 0.0f64..1.0) {
        let mut g = rng::substream(seed, &[]);
        let r = 1 + ((p - 1) as f64 * r_frac) as usize;
        let v = gaussian(p, m, &mut g);
        let w = WeightMatrix::full(random_psd(m, m + 1, &mut g)).unwrap();
        let est = weighted_eigen(&v, &w, r).unwrap();
        prop_assert!((est.u.transpose() * &est.u - DMatrix::identity(r, r)).amax() < 1e-10);
        prop_assert!(est.eigenvalues.as_slice().windows(2).all(|x| x[0] >= x[1]));
        for col in est.u.column_iter() {
            let first = col.iter().find(|x| **x != 0.0).copied().unwrap_or(1.0);
            prop_assert!(first > 0.0);
        }
        let perp = DMatrix::identity(p, p) - &est.u * est.u.transpose();
        prop_assert!((&perp * &perp - &perp).amax() < 1e-12);
    }

    #[test]
    fn weight_scaling_scales_eigenvalues(seed in 0u64..u64::MAX, c in 1e-3f64..1e3) {
        let mut g = rng::substream(seed, &[]);
        let v = gaussian(5, 4, &mut g);
        let w = WeightMatrix::full(random_psd(4, 4, &mut g)).unwrap();
        let a = weighted_eigen(&v, &w, 2).unwrap();
        let b = weighted_eigen(&v, &w.scaled(c).unwrap(), 2).unwrap();
        let tol = 1e-10 * a.eigenvalues[0].abs().max(1.0) * c;
        prop_assert!((a.eigenvalues * c - b.eigenvalues).amax() <= tol);
    }
}
