use nalgebra::{DMatrix, DVector};
use subspace_gmm::models::{
    gen_factor, gen_index_model, gen_mixed_linear, gen_mixed_logistic, load_csv, sample_covariance, write_csv,
    Dataset, FactorModel, IndexVariant, MixtureLink, MixtureModel,
};
use subspace_gmm::rng::{self, stage};

fn column_mean(data: &Dataset) -> DVector<f64> {
    data.x_matrix().row_mean().transpose()
}

fn off_span(v: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    (v - basis * (basis.transpose() * v)).norm()
}

#[test]
fn factor_moments_match_population() {
    let (p, r, n) = (6, 2, 200_000);
    let mu = [1.5, -1.0];
    let model = FactorModel::draw(p, r, &mu, 1.5, &mut rng::substream(3, &[stage::PARAMETERS])).unwrap();
    let data = model.sample(n, &mut rng::substream(3, &[stage::DATA])).unwrap();
    let b = &model.loadings;

    let mean_pop = b * DVector::from_column_slice(&mu);
    let mean_err = (column_mean(&data) - &mean_pop).amax();
    // each coordinate has variance ≤ ‖B_j‖² + σ²; 5 SE is generous
    let scale = (b.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max) + 2.25).sqrt();
    assert!(mean_err < 5.0 * scale / (n as f64).sqrt(), "mean error {mean_err}");

    let cov_pop = b * b.transpose() + DMatrix::identity(p, p) * 2.25;
    let rel = (sample_covariance(&data) - &cov_pop).norm() / cov_pop.norm();
    assert!(rel < 0.02, "covariance relative error {rel}");
}

#[test]
fn factor_truth_spans_loadings() {
    let (_, truth) = gen_factor(10, 8, 3, &[1.0, 0.0, -1.0], 1.0, 17).unwrap();
    let u = &truth.basis;
    assert!((u.transpose() * u - DMatrix::identity(3, 3)).amax() < 1e-12);
    let model = FactorModel::draw(8, 3, &[1.0, 0.0, -1.0], 1.0, &mut rng::substream(17, &[stage::PARAMETERS])).unwrap();
    for k in 0..3 {
        let col = model.loadings.column(k).into_owned();
        assert!(off_span(&col, u) < 1e-10 * col.norm());
    }
}

#[test]
fn mixed_linear_first_moment_in_span() {
    let (data, truth) = gen_mixed_linear(200_000, 8, 2, 3.0, 1.0, 5).unwrap();
    let x = data.x_matrix();
    let y = DVector::from_column_slice(data.response().unwrap());
    let yx = x.transpose() * &y / data.n() as f64;
    // E[y x] = mean of β_k; residual off the span is O(n^{-1/2})
    let off = off_span(&yx, &truth.basis);
    assert!(off < 0.05 * yx.norm().max(1.0), "off-span norm {off}");
}

#[test]
fn mixed_logistic_second_moment_in_span() {
    let (data, truth) = gen_mixed_logistic(200_000, 6, 2, 3.0, 11).unwrap();
    let x = data.x_matrix();
    let y = data.response().unwrap();
    let n = data.n() as f64;
    // E[y (x xᵀ − I)] has its column space inside span{β_k}, so the block
    // P⊥ (·) P⊥ is pure sampling noise; compare it with its own variance.
    let perp = DMatrix::identity(6, 6) - &truth.basis * truth.basis.transpose();
    let mut sum = DMatrix::zeros(6, 6);
    let mut sum_sq = DMatrix::zeros(6, 6);
    for (i, yi) in y.iter().enumerate() {
        let z = &perp * x.row(i).transpose();
        let term = (&z * z.transpose() - &perp) * *yi;
        sum_sq += term.component_mul(&term);
        sum += term;
    }
    let mean = &sum / n;
    let var = (sum_sq / n - mean.component_mul(&mean)) / n;
    let ratio = mean.norm_squared() / var.sum();
    // ratio has expectation 1 under the span property
    assert!(ratio < 3.0, "off-span energy is {ratio} times its sampling variance");
}

#[test]
fn mixture_collinear_redraw_keeps_full_rank() {
    for seed in 0..20 {
        let model = MixtureModel::draw(4, 4, 2.0, MixtureLink::Linear { sigma: 1.0 }, seed).unwrap();
        let s = model.betas.clone().svd(false, false).singular_values;
        assert!(s[3] > 1e-8 * s[0]);
        for col in model.betas.column_iter() {
            assert!((col.norm() - 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn index_model_moments() {
    // Model B has a linear x₂ term: E[y x] = −e₂ exactly.
    let (data, truth) = gen_index_model(200_000, 6, IndexVariant::B, 2).unwrap();
    let yx = data.x_matrix().transpose() * DVector::from_column_slice(data.response().unwrap()) / data.n() as f64;
    assert!((yx[1] + 1.0).abs() < 0.02, "E[y x₂] ≈ {}", yx[1]);
    assert!(off_span(&yx, &truth.basis) < 0.03);
}

#[test]
fn csv_round_trip_is_exact() {
    let (data, _) = gen_mixed_linear(50, 4, 2, 2.0, 0.5, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&data, &path).unwrap();
    let back = load_csv(&path, Some("y")).unwrap();
    assert_eq!(back.covariates(), data.covariates());
    assert_eq!(back.response(), data.response());
}

#[test]
fn csv_accepts_crlf() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crlf.csv");
    std::fs::write(&path, "a,b,y\r\n1.5,2,3\r\n-1,0.25,4\r\n").unwrap();
    let data = load_csv(&path, Some("y")).unwrap();
    assert_eq!((data.n(), data.p()), (2, 2));
    assert_eq!(data.row(1), &[-1.0, 0.25]);
    assert_eq!(data.response().unwrap(), &[3.0, 4.0]);
}

#[test]
fn centering_removes_means() {
    let (data, _) = gen_factor(500, 5, 2, &[3.0, 3.0], 1.0, 4).unwrap();
    let centered = data.centered(false).unwrap();
    assert!(column_mean(&centered).amax() < 1e-12);
}
