//! Weighted eigendecomposition estimators.
//!
//! For a moment matrix `V` (`p × m`) and weighting `W` (`m × m`), the GMM
//! objective
//!
//! ```text
//! Q(U) = Σ_{k,ℓ} w_kℓ v_kᵀ (I − UUᵀ) v_ℓ = tr(W VᵀV) − tr(Uᵀ V W Vᵀ U)
//! ```
//!
//! is minimized over orthonormal `p × r` matrices by the top-`r` eigenvectors
//! of `V W Vᵀ`. The two-step procedure estimates `Σ̂` from a pilot with
//! `W = I` and reweights by its thresholded pseudoinverse.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::MomentMatrix;
use crate::stats;

/// Relative eigen-gap below which an estimate is flagged.
const GAP_WARNING: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    Identity,
    Diagonal,
    Full,
    BlockDiagonal { blocks: Vec<usize> },
}

/// Symmetric positive-semidefinite weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    kind: WeightKind,
}

impl WeightMatrix {
    pub fn identity(m: usize) -> Self {
        Self {
            w: DMatrix::identity(m, m),
            kind: WeightKind::Identity,
        }
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::param(format!("diagonal weight {v} is not a finite non-negative number")));
        }
        Ok(Self {
            w: DMatrix::from_diagonal(&DVector::from_column_slice(values)),
            kind: WeightKind::Diagonal,
        })
    }

    /// Checks symmetry (1e-12 relative) and PSD (`λ_min ≥ −1e-10·λ_max`), then
    /// stores the exactly symmetrized matrix.
    pub fn full(w: DMatrix<f64>) -> Result<Self> {
        Self::checked(w, WeightKind::Full)
    }

    /// Block-diagonal weight from square blocks, in order.
    pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = blocks.iter().map(|b| b.nrows()).collect();
        let m = sizes.iter().sum();
        let mut w = DMatrix::zeros(m, m);
        let mut at = 0;
        for b in blocks {
            if !b.is_square() {
                return Err(Error::dim("weight blocks must be square"));
            }
            w.view_mut((at, at), b.shape()).copy_from(b);
            at += b.nrows();
        }
        Self::checked(w, WeightKind::BlockDiagonal { blocks: sizes })
    }

    fn checked(w: DMatrix<f64>, kind: WeightKind) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::dim(format!("weight matrix is {}×{}", w.nrows(), w.ncols())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "weight matrix".into() });
        }
        let scale = w.amax().max(f64::MIN_POSITIVE);
        if linalg::asymmetry(&w) > 1e-12 * scale {
            return Err(Error::param("weight matrix is not symmetric"));
        }
        let w = linalg::symmetrize(&w);
        let (values, _) = linalg::symmetric_eigen_desc(&w);
        if let (Some(&hi), Some(&lo)) = (values.as_slice().first(), values.as_slice().last()) {
            if lo < -1e-10 * hi.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::param(format!("weight matrix is not positive semidefinite (λ_min = {lo:.3e})")));
            }
        }
        Ok(Self { w, kind })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    /// `c·W` for `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::param(format!("weight scale {c} must be finite and ≥ 0")));
        }
        Ok(Self {
            w: &self.w * c,
            kind: self.kind.clone(),
        })
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0)
    }
}

/// Covariance-like matrix `Σ̂_jℓ = mean(f_jᵀ (I − U₀U₀ᵀ) f_ℓ)`.
#[derive(Debug, Clone)]
pub struct SigmaHat {
    pub sigma: DMatrix<f64>,
    pub n: usize,
    pub u0: DMatrix<f64>,
}

/// Orthonormal basis estimate with the full spectrum it was taken from.
#[derive(Debug, Clone)]
pub struct SubspaceEstimate {
    pub u: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub r: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EstimateDoc {
    p: usize,
    r: usize,
    eigenvalues: Vec<f64>,
    #[serde(rename = "U")]
    u: Vec<f64>,
    warnings: Vec<String>,
}

impl SubspaceEstimate {
    pub fn p(&self) -> usize {
        self.u.nrows()
    }

    /// JSON `{p, r, eigenvalues, U (column-major), warnings}`.
    pub fn to_json(&self) -> Result<String> {
        let doc = EstimateDoc {
            p: self.p(),
            r: self.r,
            eigenvalues: self.eigenvalues.iter().copied().collect(),
            u: self.u.as_slice().to_vec(),
            warnings: self.warnings.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EstimateDoc = serde_json::from_str(text)?;
        if doc.u.len() != doc.p * doc.r || doc.eigenvalues.len() != doc.p {
            return Err(Error::dim("estimate document has inconsistent sizes"));
        }
        Ok(Self {
            u: DMatrix::from_column_slice(doc.p, doc.r, &doc.u),
            eigenvalues: DVector::from_vec(doc.eigenvalues),
            r: doc.r,
            warnings: doc.warnings,
        })
    }
}

/// Top-`r` eigenvectors of an explicit symmetric `p × p` matrix.
pub fn symmetric_top(a: &DMatrix<f64>, r: usize) -> Result<SubspaceEstimate> {
    let p = a.nrows();
    if r == 0 || r > p {
        return Err(Error::dim(format!("need 1 ≤ r ≤ p, got r={r}, p={p}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "weighted moment matrix".into() });
    }
    let (values, vectors) = linalg::symmetric_eigen_desc(a);
    let mut u = vectors.columns(0, r).into_owned();
    linalg::canonicalize_first_nonzero(&mut u);
    let mut warnings = Vec::new();
    if r < p {
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gap = values[r - 1] - values[r];
        if gap <= GAP_WARNING * scale {
            warnings.push(format!(
                "eigen-gap at r={r} is numerically zero (λ_r = {:.6e}, λ_(r+1) = {:.6e}); the subspace is not identified",
                values[r - 1], values[r]
            ));
        }
    }
    Ok(SubspaceEstimate {
        u,
        eigenvalues: values,
        r,
        warnings,
    })
}

fn check_weight(v: &DMatrix<f64>, w: &WeightMatrix) -> Result<()> {
    if w.m() != v.ncols() {
        return Err(Error::dim(format!("weight is {0}×{0} but V has m={1} columns", w.m(), v.ncols())));
    }
    Ok(())
}

/// `V W Vᵀ`, symmetrized.
pub fn weighted_gram(v: &DMatrix<f64>, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    check_weight(v, w)?;
    Ok(linalg::symmetrize(&(v * w.matrix() * v.transpose())))
}

/// Top-`r` eigenvectors of `V W Vᵀ`.
pub fn weighted_eigen(v: &DMatrix<f64>, w: &WeightMatrix, r: usize) -> Result<SubspaceEstimate> {
    symmetric_top(&weighted_gram(v, w)?, r)
}

/// Top-`r` eigenvectors of `κM + V W Vᵀ`.
pub fn augmented_eigen(kappa: f64, m: &DMatrix<f64>, v: &DMatrix<f64>, w: &WeightMatrix, r: usize) -> Result<SubspaceEstimate> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::param(format!("augmentation weight κ = {kappa} must be finite and ≥ 0")));
    }
    if m.shape() != (v.nrows(), v.nrows()) {
        return Err(Error::dim(format!("M must be {0}×{0}", v.nrows())));
    }
    if linalg::asymmetry(m) > 1e-10 * m.amax().max(1.0) {
        return Err(Error::param("augmentation matrix M is not symmetric"));
    }
    let a = weighted_gram(v, w)? + m * kappa;
    symmetric_top(&linalg::symmetrize(&a), r)
}

/// `Q(U) = tr(W VᵀV) − tr(Uᵀ V W Vᵀ U)`.
pub fn gmm_objective(v: &DMatrix<f64>, w: &WeightMatrix, u: &DMatrix<f64>) -> Result<f64> {
    check_weight(v, w)?;
    if u.nrows() != v.nrows() {
        return Err(Error::dim(format!("U has {} rows but V has p={}", u.nrows(), v.nrows())));
    }
    linalg::ensure_orthonormal(u, 1e-8, "U")?;
    let total = (w.matrix() * v.transpose() * v).trace();
    let vu = u.transpose() * v;
    let explained = (&vu * w.matrix() * vu.transpose()).trace();
    Ok(total - explained)
}

/// `Σ̂` from per-sample evaluations and pilot `U₀`.
///
/// Each sample contributes `R_iᵀR_i` with `R_i = F_i − U₀(U₀ᵀF_i)`; entries
/// are accumulated for `j ≤ ℓ` and mirrored.
pub fn estimate_sigma(v: &MomentMatrix, u0: &DMatrix<f64>) -> Result<SigmaHat> {
    let (p, m) = (v.p(), v.m());
    if u0.nrows() != p {
        return Err(Error::dim(format!("pilot has {} rows, expected p={p}", u0.nrows())));
    }
    if u0.ncols() > 0 {
        linalg::ensure_orthonormal(u0, 1e-8, "pilot U0")?;
    }
    let r = u0.ncols();
    let basis = u0.as_slice();
    let sum = v.reduce(m * m, |f, acc, res| {
        res.clear();
        res.extend_from_slice(f);
        for l in 0..m {
            let col = &mut res[l * p..(l + 1) * p];
            for k in 0..r {
                let b = &basis[k * p..(k + 1) * p];
                let c: f64 = b.iter().zip(&f[l * p..(l + 1) * p]).map(|(x, y)| x * y).sum();
                col.iter_mut().zip(b).for_each(|(o, bv)| *o -= c * bv);
            }
        }
        for j in 0..m {
            let rj = &res[j * p..(j + 1) * p];
            for l in j..m {
                let rl = &res[l * p..(l + 1) * p];
                acc[j * m + l] += rj.iter().zip(rl).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    let n = v.n() as f64;
    let sigma = DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        sum[a * m + b] / n
    });
    Ok(SigmaHat {
        sigma,
        n: v.n(),
        u0: u0.clone(),
    })
}

/// Thresholded pseudoinverse `Ū diag(ψ(λ̄)) Ūᵀ` with `ψ(x) = 1{x > δ}/x`.
#[derive(Debug, Clone)]
pub struct Thresholded {
    pub weight: WeightMatrix,
    /// Number of eigenvalues above `δ`. Zero means `W = 0`.
    pub retained: usize,
}

impl Thresholded {
    pub fn is_degenerate(&self) -> bool {
        self.retained == 0
    }
}

pub fn thresholded_pinv(sigma: &DMatrix<f64>, delta: f64) -> Result<Thresholded> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::param(format!("threshold δ = {delta} must be finite and ≥ 0")));
    }
    if !sigma.is_square() {
        return Err(Error::dim("Σ̂ must be square"));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "Σ̂".into() });
    }
    let m = sigma.nrows();
    let (values, vectors) = linalg::symmetric_eigen_desc(sigma);
    let mut w = DMatrix::zeros(m, m);
    let mut retained = 0;
    for (k, &lambda) in values.iter().enumerate() {
        if lambda > delta {
            let col = vectors.column(k);
            w += (col * col.transpose()) / lambda;
            retained += 1;
        }
    }
    Ok(Thresholded {
        weight: WeightMatrix {
            w: linalg::symmetrize(&w),
            kind: WeightKind::Full,
        },
        retained,
    })
}

/// Diagonal variant: off-diagonal entries of `Σ̂` are dropped first.
pub fn thresholded_pinv_diagonal(sigma: &DMatrix<f64>, delta: f64) -> Result<Thresholded> {
    let diag: Vec<f64> = sigma.diagonal().iter().copied().collect();
    let full = thresholded_pinv(&DMatrix::from_diagonal(&DVector::from_vec(diag)), delta)?;
    let values: Vec<f64> = full.weight.w.diagonal().iter().copied().collect();
    Ok(Thresholded {
        weight: WeightMatrix::diagonal(&values)?,
        retained: full.retained,
    })
}

/// One row of the rank table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub k: usize,
    /// `λ_k` (1-based); absent for `k = 0`.
    pub lambda_k: Option<f64>,
    /// `n(p−k) Σ_{j>k} λ_j`; absent when `(p−k)(m−k) ≤ 0`.
    pub stat_k: Option<f64>,
    /// χ² quantile with `(p−k)(m−k)` degrees of freedom.
    pub eta_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEstimate {
    pub r_tau: usize,
    pub r_eta: usize,
    pub tau: f64,
    pub eta_quantile: f64,
    pub rows: Vec<RankRow>,
    pub warnings: Vec<String>,
}

impl RankEstimate {
    /// CSV table with header `k,lambda_k,stat_k,eta_k`; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(crate::models::format_real).unwrap_or_default();
        let mut out = String::from("k,lambda_k,stat_k,eta_k\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", row.k, cell(row.lambda_k), cell(row.stat_k), cell(row.eta_k));
        }
        out
    }
}

/// Default threshold `n^{-1/2}` for an efficiently weighted spectrum, whose
/// eigenvalues are free of the data's units.
pub fn default_tau(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

/// `n^{-1/2} · tr(V W Vᵀ)/p`, for spectra that carry the data's units
/// (identity weighting).
pub fn scaled_tau(eigenvalues: &DVector<f64>, n: usize) -> f64 {
    let p = eigenvalues.len().max(1) as f64;
    eigenvalues.sum() / p / (n as f64).sqrt()
}

/// `n(p−k) Σ_{j>k} λ_j(V W Vᵀ)`.
pub fn chi2_rank_statistic(v: &DMatrix<f64>, w: &WeightMatrix, n: usize, k: usize) -> Result<f64> {
    let p = v.nrows();
    if k >= p {
        return Err(Error::dim(format!("rank statistic needs k < p, got k={k}, p={p}")));
    }
    let (values, _) = linalg::symmetric_eigen_desc(&weighted_gram(v, w)?);
    Ok(tail_statistic(values.as_slice(), n, k))
}

fn tail_statistic(values: &[f64], n: usize, k: usize) -> f64 {
    let p = values.len();
    n as f64 * (p - k) as f64 * values[k..].iter().sum::<f64>()
}

/// `r̂_τ = #{k : λ_k > τ}` and `r̂_η = min{k : stat_k ≤ η_k}`.
///
/// `tau = None` uses [`scaled_tau`] for an identity weight and
/// [`default_tau`] otherwise. When no `k` satisfies the χ² rule,
/// `r̂_η` falls back to `min(p, m)` with a warning.
pub fn estimate_rank(v: &DMatrix<f64>, w: &WeightMatrix, n: usize, tau: Option<f64>, eta_quantile: f64) -> Result<RankEstimate> {
    if !(eta_quantile > 0.0 && eta_quantile < 1.0) {
        return Err(Error::param(format!("eta quantile {eta_quantile} not in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (p, m) = (v.nrows(), v.ncols());
    let (values, _) = linalg::symmetric_eigen_desc(&weighted_gram(v, w)?);
    let tau = tau.unwrap_or_else(|| match w.kind() {
        WeightKind::Identity => scaled_tau(&values, n),
        _ => default_tau(n),
    });
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("threshold τ = {tau} must be finite and ≥ 0")));
    }
    let cap = p.min(m);
    let r_tau = values.iter().filter(|&&l| l > tau).count().min(cap);
    let mut rows = Vec::with_capacity(p + 1);
    let mut r_eta = None;
    for k in 0..=p {
        let dof = (p - k) as i64 * (m as i64 - k as i64);
        let (stat, eta) = if dof > 0 {
            let eta = stats::chi2_quantile(eta_quantile, dof as f64)?;
            (Some(tail_statistic(values.as_slice(), n, k)), Some(eta))
        } else {
            (None, None)
        };
        if let (None, Some(s), Some(e)) = (r_eta, stat, eta) {
            if s <= e {
                r_eta = Some(k);
            }
        }
        rows.push(RankRow {
            k,
            lambda_k: (k > 0).then(|| values[k - 1]),
            stat_k: stat,
            eta_k: eta,
        });
    }
    let mut warnings = Vec::new();
    let r_eta = r_eta.unwrap_or_else(|| {
        warnings.push(format!("χ² rule accepted no k < min(p, m); using r̂_η = {cap}"));
        cap
    });
    Ok(RankEstimate {
        r_tau,
        r_eta,
        tau,
        eta_quantile,
        rows,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShape {
    Full,
    Diagonal,
}

/// Which rank rule drives `r = auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    Tau,
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankSpec {
    Fixed { r: usize },
    Auto {
        rule: RankRule,
        tau: Option<f64>,
        eta_quantile: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub rank: RankSpec,
    pub delta: f64,
    pub shape: WeightShape,
    pub iterations: usize,
}

impl GmmOptions {
    pub fn fixed(r: usize) -> Self {
        Self {
            rank: RankSpec::Fixed { r },
            delta: 0.01,
            shape: WeightShape::Full,
            iterations: 1,
        }
    }

    pub fn auto(rule: RankRule) -> Self {
        Self {
            rank: RankSpec::Auto {
                rule,
                tau: None,
                eta_quantile: 0.95,
            },
            ..Self::fixed(1)
        }
    }

    pub fn with_shape(mut self, shape: WeightShape) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GmmResult {
    pub estimate: SubspaceEstimate,
    pub sigma: SigmaHat,
    pub weight: WeightMatrix,
    /// Present when the rank was estimated.
    pub rank: Option<RankEstimate>,
}

/// Reweighting step: `Σ̂` from `u0`, then `W = pinv_δ(Σ̂)` (or `I` if that is zero).
fn reweight(v: &MomentMatrix, u0: &DMatrix<f64>, opts: &GmmOptions, warnings: &mut Vec<String>) -> Result<(SigmaHat, WeightMatrix)> {
    let sigma = estimate_sigma(v, u0)?;
    let t = match opts.shape {
        WeightShape::Full => thresholded_pinv(&sigma.sigma, opts.delta)?,
        WeightShape::Diagonal => thresholded_pinv_diagonal(&sigma.sigma, opts.delta)?,
    };
    let weight = if t.is_degenerate() {
        let msg = format!(
            "every eigenvalue of Σ̂ is ≤ δ = {}; falling back to W = I",
            opts.delta
        );
        log::warn!("{msg}");
        warnings.push(msg);
        WeightMatrix::identity(v.m())
    } else {
        t.weight
    };
    Ok((sigma, weight))
}

fn clamp_rank(r: usize, cap: usize, warnings: &mut Vec<String>) -> usize {
    if r == 0 {
        warnings.push("estimated rank is 0; using r = 1".into());
        1
    } else {
        r.min(cap)
    }
}

/// Steps 2–4 of the two-step procedure with a caller-supplied pilot `U₀`
/// (`r = U₀.ncols()`). `opts.rank` is ignored.
pub fn gmm_from_pilot(v: &MomentMatrix, u0: &DMatrix<f64>, opts: &GmmOptions) -> Result<GmmResult> {
    if opts.iterations == 0 {
        return Err(Error::param("iterations must be ≥ 1"));
    }
    let r = u0.ncols();
    let mut warnings = Vec::new();
    let (mut sigma, mut weight) = reweight(v, u0, opts, &mut warnings)?;
    let mut estimate = weighted_eigen(v.v(), &weight, r)?;
    for _ in 1..opts.iterations {
        let (s, w) = reweight(v, &estimate.u, opts, &mut warnings)?;
        sigma = s;
        weight = w;
        estimate = weighted_eigen(v.v(), &weight, r)?;
    }
    warnings.append(&mut estimate.warnings);
    estimate.warnings = warnings;
    Ok(GmmResult {
        estimate,
        sigma,
        weight,
        rank: None,
    })
}

/// Two-step (or iterated) GMM subspace estimate.
///
/// With `r = auto` the pilot dimension is `r̂_τ` of `V Vᵀ`; the rank rule is
/// then re-applied to `V W Vᵀ` with `W` from the current pilot, and the pilot
/// is refit at the new dimension until it stops changing (at most three
/// rounds).
pub fn two_step_gmm(v: &MomentMatrix, opts: &GmmOptions) -> Result<GmmResult> {
    if opts.iterations == 0 {
        return Err(Error::param("iterations must be ≥ 1"));
    }
    let (p, m) = (v.p(), v.m());
    let mut warnings = Vec::new();
    let identity = WeightMatrix::identity(m);
    let cap = p.min(m).max(1);

    let (r, rank, mut sigma, mut weight) = match opts.rank {
        RankSpec::Fixed { r } => {
            if r == 0 || r > p {
                return Err(Error::dim(format!("need 1 ≤ r ≤ p, got r={r}, p={p}")));
            }
            let pilot = weighted_eigen(v.v(), &identity, r)?;
            let (s, w) = reweight(v, &pilot.u, opts, &mut warnings)?;
            (r, None, s, w)
        }
        RankSpec::Auto { rule, tau, eta_quantile } => {
            let pick = |e: &RankEstimate| match rule {
                RankRule::Tau => e.r_tau,
                RankRule::Eta => e.r_eta,
            };
            let first = estimate_rank(v.v(), &identity, v.n(), None, eta_quantile)?;
            let mut r = clamp_rank(first.r_tau, cap, &mut warnings);
            let mut round = 0;
            loop {
                let mut w_round = Vec::new();
                let pilot = weighted_eigen(v.v(), &identity, r)?;
                let (s, w) = reweight(v, &pilot.u, opts, &mut w_round)?;
                let est = estimate_rank(v.v(), &w, v.n(), tau, eta_quantile)?;
                let next = clamp_rank(pick(&est), cap, &mut w_round);
                round += 1;
                if next == r || round == 3 {
                    if next != r {
                        w_round.push(format!("rank selection did not settle (last two: {r}, {next}); using {next}"));
                    }
                    warnings.extend(w_round);
                    warnings.extend(est.warnings.iter().cloned());
                    if next != r {
                        let pilot = weighted_eigen(v.v(), &identity, next)?;
                        let (s, w) = reweight(v, &pilot.u, opts, &mut warnings)?;
                        break (next, Some(est), s, w);
                    }
                    break (r, Some(est), s, w);
                }
                r = next;
            }
        }
    };

    let mut estimate = weighted_eigen(v.v(), &weight, r)?;
    for _ in 1..opts.iterations {
        let (s, w) = reweight(v, &estimate.u, opts, &mut warnings)?;
        sigma = s;
        weight = w;
        estimate = weighted_eigen(v.v(), &weight, r)?;
    }
    if let Some(est) = &rank {
        let gap = est.r_tau != est.r_eta;
        if gap {
            warnings.push(format!("rank rules disagree: r̂_τ = {}, r̂_η = {}", est.r_tau, est.r_eta));
        }
    }
    warnings.append(&mut estimate.warnings);
    estimate.warnings = warnings;
    Ok(GmmResult {
        estimate,
        sigma,
        weight,
        rank,
    })
}

/// Distances between an estimated and a reference subspace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubspaceMetrics {
    /// `‖ÛÛᵀ − U*U*ᵀ‖_F`
    pub distance: f64,
    /// Canonical-angle sines, descending.
    pub sin_theta: Vec<f64>,
    /// `tr(I − U*ᵀÛÛᵀU*)`
    pub psi_trace: f64,
    /// `‖ÛÛᵀ − U*U*ᵀ‖₂`, the largest sine.
    pub spectral: f64,
}

pub fn subspace_metrics(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<SubspaceMetrics> {
    if estimate.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "estimate is {:?} but truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let cross = estimate.transpose() * truth;
    let mut sin_theta: Vec<f64> = linalg::singular_values_desc(&cross)
        .into_iter()
        .map(|s| (1.0 - s.clamp(0.0, 1.0).powi(2)).sqrt())
        .collect();
    sin_theta.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let distance = (linalg::projector(estimate) - linalg::projector(truth)).norm();
    let psi = DMatrix::<f64>::identity(truth.ncols(), truth.ncols()) - cross.transpose() * &cross;
    Ok(SubspaceMetrics {
        distance,
        spectral: sin_theta.first().copied().unwrap_or(0.0),
        sin_theta,
        psi_trace: psi.trace(),
    })
}

/// Top-`r` principal components of the centered sample covariance.
pub fn pca(data: &crate::models::Dataset, r: usize) -> Result<SubspaceEstimate> {
    symmetric_top(&crate::models::sample_covariance(data), r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn rank_one_eigen() {
        let est = weighted_eigen(&dm(2, 1, &[1.0, 0.0]), &WeightMatrix::identity(1), 1).unwrap();
        assert_eq!(est.u.as_slice(), &[1.0, 0.0]);
        assert_eq!(est.eigenvalues.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn diagonal_weight_eigen() {
        let w = WeightMatrix::diagonal(&[3.0, 2.0, 1.0]).unwrap();
        let est = weighted_eigen(&DMatrix::identity(3, 3), &w, 2).unwrap();
        assert_eq!(est.eigenvalues.as_slice(), &[3.0, 2.0, 1.0]);
        assert!(est.u.row(2).amax() < 1e-15);
    }

    #[test]
    fn r_out_of_range() {
        assert!(weighted_eigen(&DMatrix::identity(2, 2), &WeightMatrix::identity(2), 3).is_err());
        assert!(weighted_eigen(&DMatrix::identity(2, 2), &WeightMatrix::identity(2), 0).is_err());
    }

    #[test]
    fn zero_gap_is_flagged() {
        let est = weighted_eigen(&DMatrix::identity(3, 3), &WeightMatrix::identity(3), 1).unwrap();
        assert_eq!(est.warnings.len(), 1);
    }

    #[test]
    fn hand_thresholding() {
        let t = thresholded_pinv(&dm(2, 2, &[2.0, 0.0, 0.0, 1e-9]), 0.01).unwrap();
        assert_eq!(t.retained, 1);
        assert!((t.weight.matrix() - dm(2, 2, &[0.5, 0.0, 0.0, 0.0])).amax() < 1e-15);
        let zero = thresholded_pinv(&dm(1, 1, &[1e-3]), 0.01).unwrap();
        assert!(zero.is_degenerate() && zero.weight.is_zero());
    }

    #[test]
    fn rank_from_clean_gap() {
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![5f64.sqrt(), 3f64.sqrt(), 1e-3, 10f64.powf(-3.5)]));
        let est = estimate_rank(&v, &WeightMatrix::identity(4), 100, Some(0.01), 0.95).unwrap();
        assert_eq!(est.r_tau, 2);
        assert_eq!(est.rows.len(), 5);
        assert!(est.rows[4].stat_k.is_none());
        assert!(est.to_csv().starts_with("k,lambda_k,stat_k,eta_k\n0,,"));
    }

    #[test]
    fn orthogonal_lines() {
        let m = subspace_metrics(&dm(2, 1, &[0.0, 1.0]), &dm(2, 1, &[1.0, 0.0])).unwrap();
        assert!((m.distance - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.sin_theta, vec![1.0]);
        assert!((m.psi_trace - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_validation() {
        assert!(WeightMatrix::full(dm(2, 2, &[1.0, 2.0, 0.0, 1.0])).is_err());
        assert!(WeightMatrix::full(dm(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(WeightMatrix::diagonal(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn objective_rejects_non_orthonormal() {
        let v = DMatrix::identity(2, 2);
        assert!(matches!(
            gmm_objective(&v, &WeightMatrix::identity(2), &dm(2, 1, &[1.0, 1.0])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn estimate_json_round_trip() {
        let est = weighted_eigen(&dm(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.5, 0.1]), &WeightMatrix::identity(2), 2).unwrap();
        let back = SubspaceEstimate::from_json(&est.to_json().unwrap()).unwrap();
        assert_eq!(back.u, est.u);
        assert_eq!(back.eigenvalues, est.eigenvalues);
    }
}
