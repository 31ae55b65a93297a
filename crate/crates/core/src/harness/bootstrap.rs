//! Nonparametric bootstrap of an estimated subspace.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, GmmOptions, SubspaceEstimate, WeightMatrix};
use crate::models::{Dataset, GroundTruth};
use crate::moments::{materialize, MomentFunctionSet, Storage};
use crate::rng::{self, stage};
use crate::stats;

/// Procedure rerun on every resample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BootMethod {
    Gmm { options: GmmOptions },
    /// `W = I`.
    Identity { r: usize },
}

impl BootMethod {
    pub fn fit(&self, data: &Dataset, set: &MomentFunctionSet) -> Result<SubspaceEstimate> {
        let v = materialize(data, set, Storage::Auto)?;
        match self {
            BootMethod::Gmm { options } => Ok(estimator::two_step_gmm(&v, options)?.estimate),
            BootMethod::Identity { r } => estimator::weighted_eigen(v.v(), &WeightMatrix::identity(v.m()), *r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub seed: u64,
    /// Use the identity permutation instead of drawing rows (for checks).
    pub identity_resample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub resample: usize,
    /// Distance to the full-data estimate.
    pub distance_to_full: f64,
    pub distance_to_truth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub full: SubspaceEstimate,
    pub rows: Vec<BootstrapRow>,
}

impl BootstrapResult {
    /// Sample standard deviation of the distances to the full-data estimate.
    pub fn standard_error(&self) -> f64 {
        let d: Vec<f64> = self.rows.iter().map(|r| r.distance_to_full).collect();
        stats::sample_std(&d)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("resample,distance_to_full,distance_to_truth\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.resample,
                crate::models::format_real(r.distance_to_full),
                r.distance_to_truth.map(crate::models::format_real).unwrap_or_default()
            ));
        }
        out
    }
}

/// Row indices of resample `b`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = rng::substream(seed, &[stage::RESAMPLE, b as u64]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Reruns `method` on `B` resamples of the rows of `data`.
pub fn bootstrap(data: &Dataset, set: &MomentFunctionSet, method: &BootMethod, opts: &BootstrapOptions, truth: Option<&GroundTruth>) -> Result<BootstrapResult> {
    if opts.resamples == 0 {
        return Err(Error::param("bootstrap needs at least one resample"));
    }
    let full = method.fit(data, set)?;
    let distance = |u: &DMatrix<f64>, v: &DMatrix<f64>| -> Result<f64> { Ok(estimator::subspace_metrics(u, v)?.distance) };
    let rows = (0..opts.resamples)
        .into_par_iter()
        .map(|b| {
            let rows = if opts.identity_resample {
                (0..data.n()).collect()
            } else {
                resample_indices(data.n(), opts.seed, b)
            };
            let est = method.fit(&data.select_rows(&rows)?, set)?;
            Ok(BootstrapRow {
                resample: b,
                distance_to_full: distance(&est.u, &full.u)?,
                distance_to_truth: truth.map(|t| distance(&est.u, &t.basis)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapResult { full, rows })
}
