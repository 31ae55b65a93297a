//! Datasets, seeded generators for the factor / mixture / index model
//! families, and CSV ingestion.
//!
//! Generators split their randomness into two substreams of the caller's
//! seed: one for model parameters (loadings, coefficients) and one for the
//! samples. The harness keeps a model fixed across the replicates of an
//! experiment by drawing parameters once and calling `sample` per replicate.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, stage, Rng};

/// `n` samples of covariates `x_i ∈ ℝ^p` and an optional scalar response.
///
/// Covariates are stored row-major so per-sample evaluation reads a
/// contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Option<Vec<f64>>,
    n: usize,
    p: usize,
}

impl Dataset {
    /// Builds a dataset from row-major covariates.
    pub fn new(x: Vec<f64>, n: usize, p: usize, y: Option<Vec<f64>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if p == 0 {
            return Err(Error::dim("covariate dimension must be at least 1"));
        }
        if x.len() != n * p {
            return Err(Error::dim(format!(
                "expected {} covariate entries for n={n}, p={p}, got {}",
                n * p,
                x.len()
            )));
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("covariate at row {}, column {}", idx / p, idx % p),
            });
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::dim(format!(
                    "response has length {} but there are {n} samples",
                    y.len()
                )));
            }
            if let Some(idx) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("response at row {idx}"),
                });
            }
        }
        Ok(Self { x, y, n, p })
    }

    /// Builds a dataset from an `n × p` matrix.
    pub fn from_matrix(x: &DMatrix<f64>, y: Option<Vec<f64>>) -> Result<Self> {
        let (n, p) = x.shape();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            rows.extend(x.row(i).iter());
        }
        Self::new(rows, n, p, y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn response(&self) -> Option<&[f64]> {
        self.y.as_deref()
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.y.as_ref().map(|y| y[i])
    }

    pub fn has_response(&self) -> bool {
        self.y.is_some()
    }

    /// Row-major covariate buffer.
    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    /// Covariates as an `n × p` matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.x)
    }

    /// A dataset made of the given rows, in order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        let y = self.y.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect());
        Self::new(x, rows.len(), self.p, y)
    }

    /// Same covariates with a replaced response.
    pub fn with_response(&self, y: Option<Vec<f64>>) -> Result<Self> {
        Self::new(self.x.clone(), self.n, self.p, y)
    }

    /// Applies `x ↦ T x` to every sample (`T` is `p' × p`).
    pub fn transform_covariates(&self, t: &DMatrix<f64>) -> Result<Self> {
        if t.ncols() != self.p {
            return Err(Error::dim(format!(
                "transform has {} columns, dataset has p={}",
                t.ncols(),
                self.p
            )));
        }
        let xt = self.x_matrix() * t.transpose();
        Self::from_matrix(&xt, self.y.clone())
    }

    /// Subtracts column means from `x` (and from `y` when `response` is set).
    pub fn centered(&self, response: bool) -> Result<Self> {
        let n = self.n as f64;
        let mut means = vec![0.0; self.p];
        for i in 0..self.n {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let x = self
            .x
            .chunks(self.p)
            .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m))
            .collect();
        let y = match (&self.y, response) {
            (Some(y), true) => {
                let my = y.iter().sum::<f64>() / n;
                Some(y.iter().map(|v| v - my).collect())
            }
            (y, _) => y.clone(),
        };
        Self::new(x, self.n, self.p, y)
    }
}

/// Orthonormal basis of the true subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub basis: DMatrix<f64>,
    pub r: usize,
}

impl GroundTruth {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_orthonormal(&basis, 1e-10, "ground-truth basis")?;
        let r = basis.ncols();
        Ok(Self { basis, r })
    }

    /// Canonical orthonormal basis of `span(B)`.
    pub fn from_spanning(b: &DMatrix<f64>) -> Result<Self> {
        Self::new(linalg::left_singular_basis(b))
    }

    pub fn p(&self) -> usize {
        self.basis.nrows()
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `x = B z + ε` with `z ~ N(μ_z, I_r)` and `ε ~ N(0, σ² I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub loadings: DMatrix<f64>,
    pub mu_z: Vec<f64>,
    pub sigma: f64,
}

impl FactorModel {
    /// Draws `B` with i.i.d. standard-normal entries.
    pub fn draw(p: usize, r: usize, mu_z: &[f64], sigma: f64, rng: &mut Rng) -> Result<Self> {
        if r == 0 || r >= p {
            return Err(Error::dim(format!("factor model needs 1 ≤ r < p, got r={r}, p={p}")));
        }
        if mu_z.len() != r {
            return Err(Error::dim(format!("mu_z has length {}, expected r={r}", mu_z.len())));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::param(format!("noise scale must be ≥ 0, got {sigma}")));
        }
        let loadings = DMatrix::from_fn(p, r, |_, _| normal(rng));
        Ok(Self {
            loadings,
            mu_z: mu_z.to_vec(),
            sigma,
        })
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn r(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        GroundTruth::from_spanning(&self.loadings)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let (p, r) = (self.p(), self.r());
        let mut x = Vec::with_capacity(n * p);
        let mut z = vec![0.0; r];
        for _ in 0..n {
            for (zk, mu) in z.iter_mut().zip(&self.mu_z) {
                *zk = mu + normal(rng);
            }
            for j in 0..p {
                let signal: f64 = (0..r).map(|k| self.loadings[(j, k)] * z[k]).sum();
                x.push(signal + self.sigma * normal(rng));
            }
        }
        Dataset::new(x, n, p, None)
    }
}

/// Seeded factor-model dataset and its true subspace.
pub fn gen_factor(
    n: usize,
    p: usize,
    r: usize,
    mu_z: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let model = FactorModel::draw(p, r, mu_z, sigma, &mut rng::substream(seed, &[stage::PARAMETERS]))?;
    let data = model.sample(n, &mut rng::substream(seed, &[stage::DATA]))?;
    Ok((data, model.truth()?))
}

/// Link between the mixture component's index `xᵀβ_k + β_k0` and `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixtureLink {
    /// `y = xᵀβ_k + β_k0 + σ ε`.
    Linear { sigma: f64 },
    /// `P(y = 1) = 1 / (1 + exp(−(xᵀβ_k + β_k0)))`.
    Logistic,
}

/// Mixture of `K` generalized linear models with uniform component weights
/// and `x ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    /// `p × K`, one coefficient vector per column.
    pub betas: DMatrix<f64>,
    pub intercepts: Vec<f64>,
    pub link: MixtureLink,
}

/// Smallest-to-largest singular value ratio below which a draw of
/// `[β_1 … β_K]` counts as rank deficient and is redrawn.
const COLLINEAR_RATIO: f64 = 1e-8;

impl MixtureModel {
    /// Draws `β_k` uniformly on the sphere of radius `beta_radius` and
    /// `β_k0 ~ N(0, 1)`. A rank-deficient draw is discarded and redrawn from
    /// the next parameter substream of `seed`.
    pub fn draw(p: usize, k: usize, beta_radius: f64, link: MixtureLink, seed: u64) -> Result<Self> {
        if k == 0 || k > p {
            return Err(Error::dim(format!("mixture needs 1 ≤ K ≤ p, got K={k}, p={p}")));
        }
        if !(beta_radius > 0.0) || !beta_radius.is_finite() {
            return Err(Error::param(format!("beta radius must be positive, got {beta_radius}")));
        }
        if let MixtureLink::Linear { sigma } = link {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::param(format!("noise scale must be ≥ 0, got {sigma}")));
            }
        }
        for attempt in 0u64.. {
            let mut rng = rng::substream(seed, &[stage::PARAMETERS, attempt]);
            let mut betas = DMatrix::zeros(p, k);
            for mut col in betas.column_iter_mut() {
                loop {
                    col.iter_mut().for_each(|v| *v = normal(&mut rng));
                    let norm = col.norm();
                    if norm > 0.0 {
                        col *= beta_radius / norm;
                        break;
                    }
                }
            }
            let intercepts = (0..k).map(|_| normal(&mut rng)).collect();
            let s = linalg::singular_values_desc(&betas);
            if s[k - 1] >= COLLINEAR_RATIO * s[0] {
                return Ok(Self {
                    betas,
                    intercepts,
                    link,
                });
            }
            log::warn!("mixture coefficient draw {attempt} is rank deficient; redrawing");
        }
        unreachable!()
    }

    pub fn p(&self) -> usize {
        self.betas.nrows()
    }

    pub fn k(&self) -> usize {
        self.betas.ncols()
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        GroundTruth::from_spanning(&self.betas)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let (p, k) = (self.p(), self.k());
        let mut x = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let start = x.len();
            for _ in 0..p {
                x.push(normal(rng));
            }
            let comp = rng.random_range(0..k);
            let row = &x[start..];
            let index: f64 = row
                .iter()
                .zip(self.betas.column(comp).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + self.intercepts[comp];
            let yi = match self.link {
                MixtureLink::Linear { sigma } => index + sigma * normal(rng),
                MixtureLink::Logistic => {
                    let prob = logistic(index);
                    if rng.random::<f64>() < prob {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            y.push(yi);
        }
        Dataset::new(x, n, p, Some(y))
    }
}

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Seeded mixed-linear-regression dataset.
pub fn gen_mixed_linear(
    n: usize,
    p: usize,
    k: usize,
    beta_radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let model = MixtureModel::draw(p, k, beta_radius, MixtureLink::Linear { sigma }, seed)?;
    let data = model.sample(n, &mut rng::substream(seed, &[stage::DATA]))?;
    Ok((data, model.truth()?))
}

/// Seeded mixed-logistic-regression dataset.
pub fn gen_mixed_logistic(
    n: usize,
    p: usize,
    k: usize,
    beta_radius: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let model = MixtureModel::draw(p, k, beta_radius, MixtureLink::Logistic, seed)?;
    let data = model.sample(n, &mut rng::substream(seed, &[stage::DATA]))?;
    Ok((data, model.truth()?))
}

/// The three two-index link functions, with `β_1 = e_1`, `β_2 = e_2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexVariant {
    /// `cos(2 x₁) − sin(x₂)`
    A,
    /// `cos(2 x₁) − x₂`
    B,
    /// `cos(2 x₁) − cos(x₂)`
    C,
}

impl IndexVariant {
    pub fn mean_function(self, t1: f64, t2: f64) -> f64 {
        match self {
            IndexVariant::A => (2.0 * t1).cos() - t2.sin(),
            IndexVariant::B => (2.0 * t1).cos() - t2,
            IndexVariant::C => (2.0 * t1).cos() - t2.cos(),
        }
    }
}

impl std::str::FromStr for IndexVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(IndexVariant::A),
            "B" => Ok(IndexVariant::B),
            "C" => Ok(IndexVariant::C),
            other => Err(Error::param(format!("unknown index-model variant {other:?}"))),
        }
    }
}

/// `y = g(x₁, x₂) + noise_scale · ε` with `x ~ N(0, I_p)`, `ε ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexModel {
    pub p: usize,
    pub variant: IndexVariant,
    pub noise_scale: f64,
}

impl IndexModel {
    pub fn new(p: usize, variant: IndexVariant) -> Result<Self> {
        if p < 2 {
            return Err(Error::dim(format!("index model needs p ≥ 2, got {p}")));
        }
        Ok(Self {
            p,
            variant,
            noise_scale: 0.5,
        })
    }

    pub fn truth(&self) -> GroundTruth {
        let mut basis = DMatrix::zeros(self.p, 2);
        basis[(0, 0)] = 1.0;
        basis[(1, 1)] = 1.0;
        GroundTruth { basis, r: 2 }
    }

    pub fn response(&self, x: &[f64], eps: f64) -> f64 {
        self.variant.mean_function(x[0], x[1]) + self.noise_scale * eps
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut x = Vec::with_capacity(n * self.p);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let start = x.len();
            for _ in 0..self.p {
                x.push(normal(rng));
            }
            let eps = normal(rng);
            y.push(self.response(&x[start..], eps));
        }
        Dataset::new(x, n, self.p, Some(y))
    }
}

/// Seeded multiple-index-model dataset.
pub fn gen_index_model(
    n: usize,
    p: usize,
    variant: IndexVariant,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    let model = IndexModel::new(p, variant)?;
    let data = model.sample(n, &mut rng::substream(seed, &[stage::DATA]))?;
    Ok((data, model.truth()))
}

/// Reads a headered, comma-separated numeric file. Every column except
/// `response_column` becomes a covariate.
pub fn load_csv(path: impl AsRef<Path>, response_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let response_idx = match response_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: name.to_string(),
            message: format!("response column {name:?} not found in header"),
        })?),
        None => None,
    };
    let p = headers.len() - usize::from(response_idx.is_some());
    let mut x = Vec::new();
    let mut y = response_idx.map(|_| Vec::new());
    let mut n = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|pos| pos.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                column: "-".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: headers[j].clone(),
                    message: if cell.is_empty() {
                        "blank cell".to_string()
                    } else {
                        format!("non-numeric cell {cell:?}")
                    },
                }
            })?;
            if Some(j) == response_idx {
                y.as_mut().expect("response buffer").push(value);
            } else {
                x.push(value);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(x, n, p, y)
}

/// Formats a real with 17 significant digits, enough for an exact round trip.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `x1,…,xp[,y]` with LF line endings.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    let mut header: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    if data.has_response() {
        header.push("y".into());
    }
    writer.write_record(&header)?;
    for i in 0..data.n() {
        let mut record: Vec<String> = data.row(i).iter().map(|&v| format_real(v)).collect();
        if let Some(y) = data.y(i) {
            record.push(format_real(y));
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Sample covariance of the covariates (divisor `n`).
pub fn sample_covariance(data: &Dataset) -> DMatrix<f64> {
    let x = data.x_matrix();
    let n = data.n() as f64;
    let mean = DVector::from_iterator(data.p(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    centered.transpose() * &centered / n
}
