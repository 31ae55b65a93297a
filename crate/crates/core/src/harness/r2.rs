//! Goodness of fit of `y` on projected covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{sample_covariance, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degree {
    Linear,
    /// Linear terms plus squares and pairwise products.
    Quadratic,
}

impl std::str::FromStr for Degree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "linear" => Ok(Degree::Linear),
            "2" | "quadratic" => Ok(Degree::Quadratic),
            _ => Err(Error::param(format!("degree must be 1 or 2, got {s:?}"))),
        }
    }
}

/// Coefficient of determination of an OLS fit (with intercept) of `y` on
/// the projections `Xᵀd_1, …, Xᵀd_k`, optionally with second-order terms.
pub fn evaluate_projection_r2(data: &Dataset, directions: &DMatrix<f64>, degree: Degree) -> Result<f64> {
    let y = data.response().ok_or(Error::MissingResponse)?;
    if directions.nrows() != data.p() {
        return Err(Error::dim(format!("directions have {} rows, dataset has p={}", directions.nrows(), data.p())));
    }
    let k = directions.ncols();
    if k == 0 {
        return Err(Error::dim("need at least one direction"));
    }
    let z = data.x_matrix() * directions;
    let n = data.n();
    let mut terms: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    terms.extend(z.column_iter().map(|c| c.into_owned()));
    if degree == Degree::Quadratic {
        for a in 0..k {
            for b in a..k {
                terms.push(z.column(a).component_mul(&z.column(b)));
            }
        }
    }
    if n <= terms.len() {
        return Err(Error::dim(format!("{n} samples cannot fit {} regression terms", terms.len())));
    }
    let design = DMatrix::from_columns(&terms);
    let yv = DVector::from_column_slice(y);
    let beta = linalg::least_squares(&design, &yv, "projection regression")?;
    let resid = &yv - &design * beta;
    let mean = yv.mean();
    let tss: f64 = yv.iter().map(|v| (v - mean).powi(2)).sum();
    if !(tss > 0.0) {
        return Err(Error::DegenerateMoment("response has zero variance".into()));
    }
    Ok(1.0 - resid.norm_squared() / tss)
}

/// Centers the covariates and maps them by `Σ̂^{-1/2}` so the sample
/// covariance becomes the identity. The response is left unchanged.
pub fn whiten(data: &Dataset) -> Result<Dataset> {
    let root = linalg::inverse_sqrt_spd(&sample_covariance(data), "sample covariance")?;
    data.centered(false)?.transform_covariates(&root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_fit() {
        let x = vec![1.0, 0.5, -1.0, 2.0, 0.3, 0.1, 2.0, -1.0, 0.0, 1.0];
        let data = Dataset::new(x.clone(), 5, 2, Some(x.chunks(2).map(|r| 3.0 * r[0] - 1.0).collect())).unwrap();
        let d = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert!((evaluate_projection_r2(&data, &d, Degree::Linear).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let (data, _) = crate::models::gen_factor(200, 4, 1, &[1.0], 1.0, 5).unwrap();
        let w = whiten(&data).unwrap();
        assert!((sample_covariance(&w) - DMatrix::identity(4, 4)).amax() < 1e-10);
    }
}
