//! Monte Carlo experiment runner.
//!
//! Each `(grid point, replicate)` pair draws one dataset from its own random
//! substream; every method sees that same dataset. Model parameters (factor
//! loadings, mixture coefficients) are drawn once per experiment seed and
//! model shape, so they are shared across grid points and replicates.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, GmmOptions, RankRule, RankSpec, SubspaceEstimate, WeightMatrix, WeightShape};
use crate::harness::config::{ExperimentConfig, GridPoint, Method, MethodSpec, ModelConfig};
use crate::models::{Dataset, FactorModel, GroundTruth, IndexModel, MixtureLink, MixtureModel};
use crate::moments::{materialize_shared, CosineOrder, MixtureKind, MomentFunctionSet, MomentMatrix, Storage};
use crate::rng::{self, stage};
use crate::stats;

pub const RESULT_VERSION: u32 = 1;

/// Per-(grid point, method, replicate) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub grid_index: usize,
    pub grid_value: f64,
    pub n: usize,
    pub method: String,
    pub replicate: usize,
    /// `‖P̂ − P*‖_F`
    pub frobenius: f64,
    pub frobenius_sq: f64,
    /// `‖P̂ − P*‖₂`
    pub spectral: f64,
    pub spectral_sq: f64,
    pub r_hat_tau: Option<usize>,
    pub r_hat_eta: Option<usize>,
    pub runtime_ms: Option<f64>,
}

/// Per-(grid point, method) aggregate. Standard errors are `sd/√replicates`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub grid_index: usize,
    pub grid_value: f64,
    pub n: usize,
    pub r: usize,
    pub method: String,
    pub replicates: usize,
    pub frobenius_mean: f64,
    pub frobenius_se: f64,
    pub frobenius_median: f64,
    pub frobenius_sq_mean: f64,
    pub frobenius_sq_se: f64,
    pub spectral_mean: f64,
    pub spectral_se: f64,
    pub spectral_sq_mean: f64,
    pub spectral_sq_se: f64,
    /// Fraction of replicates with `r̂_τ = r`.
    pub r_tau_hit: Option<f64>,
    /// Fraction of replicates with `r̂_η = r`.
    pub r_eta_hit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn summary_for(&self, grid_index: usize, method: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.grid_index == grid_index && s.method == method)
    }

    pub fn rows_for<'a>(&'a self, grid_index: usize, method: &'a str) -> impl Iterator<Item = &'a ReplicateRow> + 'a {
        self.rows.iter().filter(move |r| r.grid_index == grid_index && r.method == method)
    }
}

/// `√(se_a² + se_b²)`.
pub fn pooled_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Named column groups of one materialized moment matrix.
pub struct MomentBundle {
    pub matrix: MomentMatrix,
    groups: Vec<(&'static str, std::ops::Range<usize>)>,
}

impl MomentBundle {
    pub fn columns(&self, tags: &[&str]) -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for tag in tags {
            let (_, range) = self
                .groups
                .iter()
                .find(|(t, _)| t == tag)
                .ok_or_else(|| Error::Config(format!("unknown moment group {tag:?}")))?;
            cols.extend(range.clone());
        }
        Ok(cols)
    }

    pub fn select(&self, tags: &[&str]) -> Result<MomentMatrix> {
        self.matrix.select_columns(&self.columns(tags)?)
    }

    pub fn has(&self, tag: &str) -> bool {
        self.groups.iter().any(|(t, _)| *t == tag)
    }
}

/// Moment groups used by the built-in designs.
pub fn moment_groups(model: &ModelConfig) -> Result<Vec<(&'static str, MomentFunctionSet)>> {
    let p = model.p();
    Ok(match *model {
        ModelConfig::Factor { sigma, .. } => {
            let all = MomentFunctionSet::factor(p, sigma)?;
            vec![("a", all.select(&[0])?), ("b", all.select(&(1..=p).collect::<Vec<_>>())?)]
        }
        ModelConfig::MixedLinear { .. } | ModelConfig::MixedLogistic { .. } => vec![
            ("a", MomentFunctionSet::mixture(p, MixtureKind::YFirst, None)?),
            ("b", MomentFunctionSet::mixture(p, MixtureKind::Y2Second, None)?),
            ("c", MomentFunctionSet::cosine_quantile(p, CosineOrder::First, 4, 0.8)?),
            ("d", MomentFunctionSet::sign_robust(p)?),
        ],
        ModelConfig::Index { .. } => vec![
            ("a", MomentFunctionSet::mixture(p, MixtureKind::YFirst, None)?),
            ("c", MomentFunctionSet::cosine_quantile(p, CosineOrder::First, 4, 0.8)?),
            ("y-phd", MomentFunctionSet::phd(p, false)?),
            ("r-phd", MomentFunctionSet::phd(p, true)?),
        ],
    })
}

pub fn build_bundle(data: Arc<Dataset>, model: &ModelConfig) -> Result<MomentBundle> {
    let groups = moment_groups(model)?;
    let mut ranges = Vec::with_capacity(groups.len());
    let mut at = 0;
    for (tag, set) in &groups {
        ranges.push((*tag, at..at + set.m()));
        at += set.m();
    }
    let sets: Vec<MomentFunctionSet> = groups.into_iter().map(|(_, s)| s).collect();
    let all = MomentFunctionSet::concat(&sets)?;
    Ok(MomentBundle {
        matrix: materialize_shared(data, &all, Storage::Auto)?,
        groups: ranges,
    })
}

/// Generator with parameters fixed for the experiment.
enum Generator {
    Factor(FactorModel),
    Mixture(MixtureModel),
    Index(IndexModel),
}

impl Generator {
    fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match *model {
            ModelConfig::Factor { p, r, mu, sigma } => {
                let mu_z: Vec<f64> = (0..r).map(|k| if k % 2 == 0 { mu } else { -mu }).collect();
                let mut rng = rng::substream(seed, &[stage::PARAMETERS, p as u64, r as u64]);
                Generator::Factor(FactorModel::draw(p, r, &mu_z, sigma, &mut rng)?)
            }
            ModelConfig::MixedLinear { p, k, radius, sigma } => Generator::Mixture(MixtureModel::draw(
                p,
                k,
                radius,
                MixtureLink::Linear { sigma },
                rng::child_seed(seed, &[p as u64, k as u64]),
            )?),
            ModelConfig::MixedLogistic { p, k, radius } => Generator::Mixture(MixtureModel::draw(
                p,
                k,
                radius,
                MixtureLink::Logistic,
                rng::child_seed(seed, &[p as u64, k as u64]),
            )?),
            ModelConfig::Index { p, variant } => Generator::Index(IndexModel::new(p, variant)?),
        })
    }

    fn truth(&self) -> Result<GroundTruth> {
        match self {
            Generator::Factor(m) => m.truth(),
            Generator::Mixture(m) => m.truth(),
            Generator::Index(m) => Ok(m.truth()),
        }
    }

    fn sample(&self, n: usize, rng: &mut rng::Rng) -> Result<Dataset> {
        match self {
            Generator::Factor(m) => m.sample(n, rng),
            Generator::Mixture(m) => m.sample(n, rng),
            Generator::Index(m) => m.sample(n, rng),
        }
    }
}

/// Result of fitting one method to one dataset.
pub struct Fit {
    pub estimate: SubspaceEstimate,
    pub r_hat: Option<(usize, usize)>,
}

/// Settings shared by every method fit.
#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    pub r: usize,
    pub delta: f64,
    pub tau: Option<f64>,
    pub eta_quantile: f64,
    pub rank_estimates: bool,
}

fn identity_fit(v: &MomentMatrix, r: usize) -> Result<SubspaceEstimate> {
    estimator::weighted_eigen(v.v(), &WeightMatrix::identity(v.m()), r)
}

fn gmm_fit(v: &MomentMatrix, shape: WeightShape, s: &FitSettings) -> Result<Fit> {
    let opts = GmmOptions::fixed(s.r).with_shape(shape).with_delta(s.delta);
    let estimate = estimator::two_step_gmm(v, &opts)?.estimate;
    let r_hat = if s.rank_estimates {
        let auto = GmmOptions {
            rank: RankSpec::Auto {
                rule: RankRule::Tau,
                tau: s.tau,
                eta_quantile: s.eta_quantile,
            },
            ..opts
        };
        estimator::two_step_gmm(v, &auto)?.rank.map(|e| (e.r_tau, e.r_eta))
    } else {
        None
    };
    Ok(Fit { estimate, r_hat })
}

fn phd_fit(bundle: &MomentBundle, tag: &str, residualize: bool, s: &FitSettings) -> Result<SubspaceEstimate> {
    let v = if bundle.has(tag) {
        bundle.select(&[tag])?
    } else {
        let data = bundle
            .matrix
            .dataset()
            .ok_or_else(|| Error::Config("moment bundle has no dataset".into()))?;
        materialize_shared(Arc::clone(data), &MomentFunctionSet::phd(data.p(), residualize)?, Storage::Auto)?
    };
    identity_fit(&v, s.r)
}

/// Fits one configured method.
pub fn fit_method(method: &Method, data: &Dataset, bundle: &MomentBundle, model: &ModelConfig, s: &FitSettings) -> Result<Fit> {
    let plain = |estimate| Ok(Fit { estimate, r_hat: None });
    match method {
        Method::Standard => match model {
            ModelConfig::Factor { .. } => plain(estimator::pca(data, s.r)?),
            _ => plain(identity_fit(&bundle.select(&["b"])?, s.r)?),
        },
        Method::Robustified => plain(identity_fit(&bundle.select(&["d"])?, s.r)?),
        Method::GmmFull => gmm_fit(&bundle.matrix, WeightShape::Full, s),
        Method::GmmDiagonal => gmm_fit(&bundle.matrix, WeightShape::Diagonal, s),
        Method::GmmSubset(tags) => {
            let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
            gmm_fit(&bundle.select(&tags)?, WeightShape::Full, s)
        }
        Method::Identity => plain(identity_fit(&bundle.matrix, s.r)?),
        Method::PhdY => plain(phd_fit(bundle, "y-phd", false, s)?),
        Method::PhdResidual => plain(phd_fit(bundle, "r-phd", true, s)?),
        Method::Augmented(kappa) => {
            let opts = GmmOptions::fixed(s.r).with_delta(s.delta);
            let weight = estimator::two_step_gmm(&bundle.matrix, &opts)?.weight;
            let x = data.x_matrix();
            let m = x.transpose() * &x / data.n() as f64;
            plain(estimator::augmented_eigen(*kappa, &m, bundle.matrix.v(), &weight, s.r)?)
        }
    }
}

/// One dataset from `model` with its true subspace. Parameters come from
/// the same substreams an experiment with this seed would use.
pub fn simulate(model: &ModelConfig, n: usize, seed: u64) -> Result<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let gen = Generator::new(model, seed)?;
    let data = gen.sample(n, &mut rng::substream(seed, &[stage::DATA]))?;
    Ok((data, gen.truth()?))
}

fn replicate_rows(cfg: &ExperimentConfig, gi: usize, point: &GridPoint, gen: &Generator, truth: &DMatrix<f64>, model: &ModelConfig, n: usize, rep: usize) -> Result<Vec<ReplicateRow>> {
    let mut rng = rng::substream(cfg.seed, &[gi as u64, rep as u64, stage::DATA]);
    let mut data = gen.sample(n, &mut rng)?;
    if cfg.center {
        data = data.centered(true)?;
    }
    let data = Arc::new(data);
    let bundle = build_bundle(Arc::clone(&data), model)?;
    let settings = FitSettings {
        r: model.r(),
        delta: cfg.delta,
        tau: cfg.tau,
        eta_quantile: cfg.eta_quantile,
        rank_estimates: cfg.rank_estimates,
    };
    cfg.methods
        .iter()
        .map(|spec: &MethodSpec| {
            let start = Instant::now();
            let fit = fit_method(&spec.method, &data, &bundle, model, &settings).map_err(|e| {
                Error::Config(format!("grid point {gi}, replicate {rep}, method {}: {e}", spec.label))
            })?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let m = estimator::subspace_metrics(&fit.estimate.u, truth)?;
            Ok(ReplicateRow {
                grid_index: gi,
                grid_value: point.value,
                n,
                method: spec.label.clone(),
                replicate: rep,
                frobenius: m.distance,
                frobenius_sq: m.distance * m.distance,
                spectral: m.spectral,
                spectral_sq: m.spectral * m.spectral,
                r_hat_tau: fit.r_hat.map(|r| r.0),
                r_hat_eta: fit.r_hat.map(|r| r.1),
                runtime_ms: cfg.record_runtime.then_some(elapsed),
            })
        })
        .collect()
}

/// Runs every grid point, replicate and method. Output order is
/// (grid point, method, replicate) regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let grid = cfg.grid();
    let mut points = Vec::with_capacity(grid.len());
    for point in &grid {
        let (model, n) = cfg.resolve(point);
        let gen = Generator::new(&model, cfg.seed)?;
        let truth = gen.truth()?.basis;
        points.push((model, n, gen, truth));
    }
    let reps = cfg.replicates;
    let jobs: Vec<Vec<ReplicateRow>> = (0..grid.len() * reps)
        .into_par_iter()
        .map(|job| {
            let (gi, rep) = (job / reps, job % reps);
            let (model, n, gen, truth) = &points[gi];
            replicate_rows(cfg, gi, &grid[gi], gen, truth, model, *n, rep)
        })
        .collect::<Result<Vec<_>>>()?;

    let methods = cfg.methods.len();
    let mut rows = Vec::with_capacity(jobs.len() * methods);
    for gi in 0..grid.len() {
        for mi in 0..methods {
            for rep in 0..reps {
                rows.push(jobs[gi * reps + rep][mi].clone());
            }
        }
    }
    let summary = summarize(&rows, &points.iter().map(|p| p.0.r()).collect::<Vec<_>>());
    Ok(ExperimentResult {
        version: RESULT_VERSION,
        config: cfg.clone(),
        rows,
        summary,
    })
}

/// Aggregates rows that are grouped by (grid point, method). `r_true[g]` is
/// the true dimension at grid point `g`.
pub fn summarize(rows: &[ReplicateRow], r_true: &[usize]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let key = (rows[start].grid_index, rows[start].method.as_str());
        let end = start + rows[start..].iter().take_while(|r| (r.grid_index, r.method.as_str()) == key).count();
        let group = &rows[start..end];
        let col = |f: fn(&ReplicateRow) -> f64| group.iter().map(f).collect::<Vec<f64>>();
        let (fro, fro2, spec, spec2) = (col(|r| r.frobenius), col(|r| r.frobenius_sq), col(|r| r.spectral), col(|r| r.spectral_sq));
        let r = r_true.get(key.0).copied().unwrap_or(0);
        let hit = |f: fn(&ReplicateRow) -> Option<usize>| {
            let vals: Vec<usize> = group.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().filter(|&&v| v == r).count() as f64 / vals.len() as f64)
        };
        out.push(SummaryRow {
            grid_index: key.0,
            grid_value: group[0].grid_value,
            n: group[0].n,
            r,
            method: key.1.to_string(),
            replicates: group.len(),
            frobenius_mean: stats::mean(&fro),
            frobenius_se: stats::standard_error(&fro),
            frobenius_median: stats::median(&fro),
            frobenius_sq_mean: stats::mean(&fro2),
            frobenius_sq_se: stats::standard_error(&fro2),
            spectral_mean: stats::mean(&spec),
            spectral_se: stats::standard_error(&spec),
            spectral_sq_mean: stats::mean(&spec2),
            spectral_sq_se: stats::standard_error(&spec2),
            r_tau_hit: hit(|r| r.r_hat_tau),
            r_eta_hit: hit(|r| r.r_hat_eta),
        });
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentName;

    #[test]
    fn tiny_example1_runs_in_order() {
        let mut cfg = ExperimentConfig::preset(ExperimentName::Example1, 3).unwrap();
        cfg.replicates = 2;
        cfg.sweep.truncate(2);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 2 * 3 * 2);
        assert_eq!(res.summary.len(), 2 * 3);
        assert_eq!(res.rows[0].method, "standard");
        assert_eq!(res.rows[2].method, "gmm-full");
        assert!(res.rows.iter().all(|r| r.frobenius >= 0.0 && r.runtime_ms.is_none()));
    }

    #[test]
    fn bundle_groups_have_expected_sizes() {
        let model = ModelConfig::MixedLinear { p: 10, k: 2, radius: 4.0, sigma: 1.0 };
        let groups = moment_groups(&model).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|(_, s)| s.m()).collect();
        assert_eq!(sizes, vec![1, 10, 4, 10]);
    }
}
