//! Moment-function framework.
//!
//! A [`MomentFunctionSet`] is an ordered list of descriptors, each a rule
//! `f_ℓ(x, y) ∈ ℝ^p`. Built-in rules have the form
//!
//! ```text
//! first order:   h(y) · x
//! second order:  h(y) · (x (xᵀa) − c·a)
//! ```
//!
//! where `h` is a response transform, `a` a direction (a standard basis
//! vector by default) and `c` a constant offset. Transforms that depend on
//! the whole dataset (quantile-scaled cosines, sign-robustified responses,
//! least-squares residuals) are *bound* to a dataset first; binding records
//! the derived state in the descriptor so evaluation afterwards is a pure
//! function of one sample.
//!
//! [`materialize`] averages the descriptors into the `p × m` matrix `V`. The
//! resulting [`MomentMatrix`] can re-stream per-sample evaluations
//! `F_i = [f_1(x_i, y_i) … f_m(x_i, y_i)]`, either from a cache or by
//! re-evaluating the descriptors.
//!
//! All sums over samples use fixed-size chunks combined by a pairwise tree, so
//! results do not depend on the number of worker threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::Dataset;
use crate::stats;

/// Current version of the JSON moment-set document.
pub const MOMENT_SET_VERSION: u32 = 1;

/// Samples per reduction chunk.
const CHUNK: usize = 512;

/// Default cache budget in stored `f64` entries (`n·p·m`).
pub const DEFAULT_CACHE_LIMIT: usize = 1 << 24;

/// Scale of a cosine transform `cos(y / t + γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CosineScale {
    Fixed { t: f64 },
    /// `t = 2τ/π` with `τ` the `prob`-quantile (type 7) of `|y_i|`, so that
    /// `y/t = yπ/(2τ)`.
    AbsQuantile { prob: f64 },
}

/// Least-squares fit `y ≈ b₀ + xᵀb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearFit {
    /// Ordinary least squares of `y` on `x` with intercept.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let y = data.response().ok_or(Error::MissingResponse)?;
        let (n, p) = (data.n(), data.p());
        let design = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { data.row(i)[j - 1] });
        let beta = linalg::least_squares(&design, &DVector::from_column_slice(y), "least-squares residualization")?;
        Ok(Self {
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Scalar weight `h(y)` applied to a descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    /// `h ≡ 1` (no response needed).
    Unit,
    Y,
    YSquared,
    Cosine { scale: CosineScale, phase: f64 },
    /// `sign(y)`.
    Sign,
    /// `sign(y) · sign(xᵀṽ₁)` with `ṽ₁ = mean(sign(y) x)`.
    SignRobust {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pilot: Option<Vec<f64>>,
    },
    /// Residual of a least-squares fit of `y` on `x` with intercept.
    Residual {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fit: Option<LinearFit>,
    },
}

impl Response {
    fn needs_response(&self) -> bool {
        !matches!(self, Response::Unit)
    }

    fn is_bound(&self) -> bool {
        match self {
            Response::Cosine { scale, .. } => matches!(scale, CosineScale::Fixed { .. }),
            Response::SignRobust { pilot } => pilot.is_some(),
            Response::Residual { fit } => fit.is_some(),
            _ => true,
        }
    }

    fn weight(&self, x: &[f64], y: Option<f64>) -> f64 {
        let y = || y.expect("response presence is checked at bind time");
        match self {
            Response::Unit => 1.0,
            Response::Y => y(),
            Response::YSquared => y() * y(),
            Response::Cosine { scale, phase } => match scale {
                CosineScale::Fixed { t } => (y() / t + phase).cos(),
                CosineScale::AbsQuantile { .. } => unreachable!("unbound cosine scale"),
            },
            Response::Sign => sign(y()),
            Response::SignRobust { pilot } => {
                let pilot = pilot.as_ref().expect("bound");
                let proj: f64 = x.iter().zip(pilot).map(|(a, b)| a * b).sum();
                sign(y()) * sign(proj)
            }
            Response::Residual { fit } => y() - fit.as_ref().expect("bound").predict(x),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Direction `a` of a second-order descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Direction {
    /// Standard basis vector `e_j` (zero-based).
    Axis { index: usize },
    Vector { values: Vec<f64> },
}

impl Direction {
    fn dot(&self, x: &[f64]) -> f64 {
        match self {
            Direction::Axis { index } => x[*index],
            Direction::Vector { values } => x.iter().zip(values).map(|(a, b)| a * b).sum(),
        }
    }

    fn add_scaled(&self, scale: f64, out: &mut [f64]) {
        match self {
            Direction::Axis { index } => out[*index] += scale,
            Direction::Vector { values } => {
                out.iter_mut().zip(values).for_each(|(o, v)| *o += scale * v)
            }
        }
    }

    fn check(&self, p: usize) -> Result<()> {
        match self {
            Direction::Axis { index } if *index >= p => {
                Err(Error::dim(format!("axis {index} out of range for p={p}")))
            }
            Direction::Vector { values } if values.len() != p => Err(Error::dim(format!(
                "direction has length {}, expected p={p}",
                values.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// First- or second-order shape of a descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `x`
    First,
    /// `x (xᵀa) − offset·a`
    Second { direction: Direction, offset: f64 },
}

/// A user-supplied per-sample rule.
///
/// Implementations must be pure: the output may depend only on `(x, y)` of
/// the sample being evaluated. Streaming mode relies on this to re-evaluate
/// samples on demand.
pub trait CustomMoment: Send + Sync {
    /// Writes `f(x, y)` into `out` (length `p`, zero-initialized).
    fn evaluate(&self, x: &[f64], y: Option<f64>, out: &mut [f64]);

    fn name(&self) -> &str {
        "custom"
    }

    fn needs_response(&self) -> bool {
        false
    }
}

/// Shared handle to a [`CustomMoment`]. Not serializable.
#[derive(Clone)]
pub struct Custom(pub Arc<dyn CustomMoment>);

impl fmt::Debug for Custom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({})", self.0.name())
    }
}

impl PartialEq for Custom {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl Serialize for Custom {
    fn serialize<S: serde::Serializer>(&self, _: S) -> std::result::Result<S::Ok, S::Error> {
        Err(serde::ser::Error::custom(format!(
            "custom moment {:?} cannot be serialized",
            self.0.name()
        )))
    }
}

impl<'de> Deserialize<'de> for Custom {
    fn deserialize<D: serde::Deserializer<'de>>(_: D) -> std::result::Result<Self, D::Error> {
        Err(serde::de::Error::custom("custom moments cannot be deserialized"))
    }
}

/// One moment function `f_ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum MomentDescriptor {
    Basic { response: Response, shape: Shape },
    /// `Σ_k α_k f_k`.
    Linear { terms: Vec<(f64, MomentDescriptor)> },
    Custom { rule: Custom },
}

impl MomentDescriptor {
    pub fn basic(response: Response, shape: Shape) -> Self {
        MomentDescriptor::Basic { response, shape }
    }

    pub fn custom(rule: Arc<dyn CustomMoment>) -> Self {
        MomentDescriptor::Custom { rule: Custom(rule) }
    }

    fn needs_response(&self) -> bool {
        match self {
            MomentDescriptor::Basic { response, .. } => response.needs_response(),
            MomentDescriptor::Linear { terms } => terms.iter().any(|(_, d)| d.needs_response()),
            MomentDescriptor::Custom { rule } => rule.0.needs_response(),
        }
    }

    fn is_bound(&self) -> bool {
        match self {
            MomentDescriptor::Basic { response, .. } => response.is_bound(),
            MomentDescriptor::Linear { terms } => terms.iter().all(|(_, d)| d.is_bound()),
            MomentDescriptor::Custom { .. } => true,
        }
    }

    fn check(&self, p: usize) -> Result<()> {
        match self {
            MomentDescriptor::Basic { shape: Shape::Second { direction, .. }, .. } => direction.check(p),
            MomentDescriptor::Linear { terms } => terms.iter().try_for_each(|(_, d)| d.check(p)),
            _ => Ok(()),
        }
    }

    /// Accumulates `scale · f(x, y)` into `out`.
    fn accumulate(&self, scale: f64, x: &[f64], y: Option<f64>, out: &mut [f64], scratch: &mut Vec<f64>) {
        match self {
            MomentDescriptor::Basic { response, shape } => {
                let h = scale * response.weight(x, y);
                match shape {
                    Shape::First => out.iter_mut().zip(x).for_each(|(o, v)| *o += h * v),
                    Shape::Second { direction, offset } => {
                        let coef = h * direction.dot(x);
                        out.iter_mut().zip(x).for_each(|(o, v)| *o += coef * v);
                        direction.add_scaled(-h * offset, out);
                    }
                }
            }
            MomentDescriptor::Linear { terms } => {
                for (alpha, d) in terms {
                    d.accumulate(scale * alpha, x, y, out, scratch);
                }
            }
            MomentDescriptor::Custom { rule } => {
                scratch.clear();
                scratch.resize(out.len(), 0.0);
                rule.0.evaluate(x, y, scratch);
                out.iter_mut().zip(scratch.iter()).for_each(|(o, v)| *o += scale * v);
            }
        }
    }
}

/// Ordered list of moment descriptors with a common output dimension `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFunctionSet {
    pub version: u32,
    pub p: usize,
    pub descriptors: Vec<MomentDescriptor>,
}

fn axes(p: usize) -> impl Iterator<Item = Direction> {
    (0..p).map(|index| Direction::Axis { index })
}

fn second_order_columns(p: usize, response: Response, basis: Option<&DMatrix<f64>>) -> Result<Vec<MomentDescriptor>> {
    let directions: Vec<Direction> = match basis {
        None => axes(p).collect(),
        Some(b) => {
            if b.shape() != (p, p) {
                return Err(Error::dim(format!("basis must be {p}×{p}, got {:?}", b.shape())));
            }
            let cond = linalg::condition_number(b);
            if !(cond <= 1e12) {
                return Err(Error::Singular(format!("direction basis has condition number {cond:.3e}")));
            }
            b.column_iter()
                .map(|c| Direction::Vector { values: c.iter().copied().collect() })
                .collect()
        }
    };
    Ok(directions
        .into_iter()
        .map(|direction| MomentDescriptor::basic(response.clone(), Shape::Second { direction, offset: 1.0 }))
        .collect())
}

/// Which response-weighted mixture moments to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureKind {
    /// `mean(y x)`
    YFirst,
    /// `mean(y² (x xᵀ e_j − e_j))`, `j ∈ [p]`
    Y2Second,
    /// `mean(y (x xᵀ e_j − e_j))`, `j ∈ [p]`
    YSecond,
}

/// Order of a cosine-transformed moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineOrder {
    First,
    Second,
}

impl MomentFunctionSet {
    pub fn new(p: usize, descriptors: Vec<MomentDescriptor>) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::dim("a moment set needs at least one descriptor"));
        }
        descriptors.iter().try_for_each(|d| d.check(p))?;
        Ok(Self {
            version: MOMENT_SET_VERSION,
            p,
            descriptors,
        })
    }

    pub fn m(&self) -> usize {
        self.descriptors.len()
    }

    /// Mean of `x` and the columns of `mean(x xᵀ) − σ² I`.
    pub fn factor(p: usize, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::param(format!("noise scale must be ≥ 0, got {sigma}")));
        }
        let mut d = vec![MomentDescriptor::basic(Response::Unit, Shape::First)];
        d.extend(axes(p).map(|direction| {
            MomentDescriptor::basic(Response::Unit, Shape::Second { direction, offset: sigma * sigma })
        }));
        Self::new(p, d)
    }

    /// Response-weighted first or second moments. `basis` replaces the
    /// standard basis vectors of the second-order columns.
    pub fn mixture(p: usize, kind: MixtureKind, basis: Option<&DMatrix<f64>>) -> Result<Self> {
        let d = match kind {
            MixtureKind::YFirst => vec![MomentDescriptor::basic(Response::Y, Shape::First)],
            MixtureKind::Y2Second => second_order_columns(p, Response::YSquared, basis)?,
            MixtureKind::YSecond => second_order_columns(p, Response::Y, basis)?,
        };
        Self::new(p, d)
    }

    /// `h_ℓ(y) x` or `h_ℓ(y)(x xᵀ e_j − e_j)` with `h_ℓ(y) = cos(y / t_ℓ + γ_ℓ)`.
    pub fn cosine(p: usize, order: CosineOrder, scales: &[(f64, f64)]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::param("cosine moments need at least one (t, γ) pair"));
        }
        if let Some((t, _)) = scales.iter().find(|(t, _)| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::param(format!("cosine scale t must be positive, got {t}")));
        }
        let responses = scales.iter().map(|&(t, phase)| Response::Cosine {
            scale: CosineScale::Fixed { t },
            phase,
        });
        Self::cosine_from(p, order, responses.collect())
    }

    /// `count` first- or second-order cosine moments with
    /// `h_j(y) = cos(yπ/(2τ) + (j−1)π/4)`, `τ` the `prob`-quantile of `|y|`.
    pub fn cosine_quantile(p: usize, order: CosineOrder, count: usize, prob: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::param("cosine moments need count ≥ 1"));
        }
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(Error::param(format!("quantile probability {prob} not in (0, 1]")));
        }
        let responses = (0..count)
            .map(|j| Response::Cosine {
                scale: CosineScale::AbsQuantile { prob },
                phase: j as f64 * std::f64::consts::FRAC_PI_4,
            })
            .collect();
        Self::cosine_from(p, order, responses)
    }

    fn cosine_from(p: usize, order: CosineOrder, responses: Vec<Response>) -> Result<Self> {
        let mut d = Vec::new();
        for response in responses {
            match order {
                CosineOrder::First => d.push(MomentDescriptor::basic(response, Shape::First)),
                CosineOrder::Second => d.extend(second_order_columns(p, response, None)?),
            }
        }
        Self::new(p, d)
    }

    /// `mean(ỹ (x xᵀ e_j − e_j))` with `ỹ = sign(y) sign(xᵀṽ₁)`.
    pub fn sign_robust(p: usize) -> Result<Self> {
        Self::new(p, second_order_columns(p, Response::SignRobust { pilot: None }, None)?)
    }

    /// Principal-Hessian-direction moments, optionally on least-squares residuals.
    pub fn phd(p: usize, residualize: bool) -> Result<Self> {
        let response = if residualize {
            Response::Residual { fit: None }
        } else {
            Response::Y
        };
        Self::new(p, second_order_columns(p, response, None)?)
    }

    /// Concatenates descriptor lists in order.
    pub fn concat(sets: &[MomentFunctionSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::dim("concat of an empty list"))?;
        if let Some(bad) = sets.iter().find(|s| s.p != first.p) {
            return Err(Error::dim(format!(
                "cannot concatenate moment sets with p={} and p={}",
                first.p, bad.p
            )));
        }
        Self::new(first.p, sets.iter().flat_map(|s| s.descriptors.iter().cloned()).collect())
    }

    /// The sub-list at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = indices
            .iter()
            .map(|&i| {
                self.descriptors
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::dim(format!("descriptor index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.p, d)
    }

    pub fn needs_response(&self) -> bool {
        self.descriptors.iter().any(|d| d.needs_response())
    }

    pub fn is_bound(&self) -> bool {
        self.descriptors.iter().all(|d| d.is_bound())
    }

    /// Resolves dataset-dependent state (cosine scales, sign pilots, residual
    /// fits) against `data`. Already-bound descriptors are left unchanged.
    pub fn bind(&self, data: &Dataset) -> Result<Self> {
        if data.p() != self.p {
            return Err(Error::dim(format!(
                "moment set has p={} but dataset has p={}",
                self.p,
                data.p()
            )));
        }
        if self.needs_response() && !data.has_response() {
            return Err(Error::MissingResponse);
        }
        let mut cache = BindCache::default();
        let descriptors = self
            .descriptors
            .iter()
            .map(|d| bind_descriptor(d, data, &mut cache))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: self.version,
            p: self.p,
            descriptors,
        })
    }

    /// `F_i` for one sample, column-major `p × m` into `out`.
    pub fn evaluate_into(&self, x: &[f64], y: Option<f64>, out: &mut [f64], scratch: &mut Vec<f64>) {
        let p = self.p;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (l, d) in self.descriptors.iter().enumerate() {
            d.accumulate(1.0, x, y, &mut out[l * p..(l + 1) * p], scratch);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        if set.version != MOMENT_SET_VERSION {
            return Err(Error::Config(format!(
                "unsupported moment-set version {} (expected {MOMENT_SET_VERSION})",
                set.version
            )));
        }
        Self::new(set.p, set.descriptors)
    }
}

#[derive(Default)]
struct BindCache {
    abs_y: Option<Vec<f64>>,
    sign_pilot: Option<Vec<f64>>,
    fit: Option<LinearFit>,
}

fn bind_descriptor(d: &MomentDescriptor, data: &Dataset, cache: &mut BindCache) -> Result<MomentDescriptor> {
    Ok(match d {
        MomentDescriptor::Basic { response, shape } => MomentDescriptor::Basic {
            response: bind_response(response, data, cache)?,
            shape: shape.clone(),
        },
        MomentDescriptor::Linear { terms } => MomentDescriptor::Linear {
            terms: terms
                .iter()
                .map(|(a, d)| Ok((*a, bind_descriptor(d, data, cache)?)))
                .collect::<Result<Vec<_>>>()?,
        },
        MomentDescriptor::Custom { .. } => d.clone(),
    })
}

fn bind_response(response: &Response, data: &Dataset, cache: &mut BindCache) -> Result<Response> {
    Ok(match response {
        Response::Cosine { scale: CosineScale::AbsQuantile { prob }, phase } => {
            let abs_y = cache.abs_y.get_or_insert_with(|| {
                data.response().expect("checked").iter().map(|v| v.abs()).collect()
            });
            let tau = stats::quantile_type7(abs_y, *prob)?;
            if !(tau > 0.0) {
                return Err(Error::DegenerateMoment(format!(
                    "the {prob}-quantile of |y| is {tau}; cosine scale would be non-positive"
                )));
            }
            Response::Cosine {
                scale: CosineScale::Fixed { t: 2.0 * tau / std::f64::consts::PI },
                phase: *phase,
            }
        }
        Response::SignRobust { pilot: None } => {
            if cache.sign_pilot.is_none() {
                cache.sign_pilot = Some(sign_pilot(data)?);
            }
            Response::SignRobust { pilot: cache.sign_pilot.clone() }
        }
        Response::Residual { fit: None } => {
            if cache.fit.is_none() {
                cache.fit = Some(LinearFit::fit(data)?);
            }
            Response::Residual { fit: cache.fit.clone() }
        }
        other => other.clone(),
    })
}

/// `ṽ₁ = mean(sign(y) x)`.
pub fn sign_pilot(data: &Dataset) -> Result<Vec<f64>> {
    let y = data.response().ok_or(Error::MissingResponse)?;
    let mut v = vec![0.0; data.p()];
    for (i, &yi) in y.iter().enumerate() {
        let s = sign(yi);
        v.iter_mut().zip(data.row(i)).for_each(|(a, x)| *a += s * x);
    }
    let n = data.n() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    if v.iter().all(|&a| a == 0.0) {
        return Err(Error::DegenerateMoment(
            "sign pilot mean(sign(y)·x) is the zero vector".into(),
        ));
    }
    Ok(v)
}

/// Where per-sample evaluations come from when re-streamed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    /// Keep the full `n × p × m` evaluation stack in memory.
    Cached,
    /// Keep only `V`; re-evaluate descriptors on demand.
    Streaming,
    /// Cached when `n·p·m ≤ 2²⁴`, streaming otherwise.
    Auto,
}

/// Sample-averaged moment matrix `V` with access to per-sample `F_i`.
#[derive(Clone)]
pub struct MomentMatrix {
    v: DMatrix<f64>,
    n: usize,
    source: Option<(Arc<Dataset>, MomentFunctionSet)>,
    cache: Option<Arc<Vec<f64>>>,
}

impl fmt::Debug for MomentMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentMatrix")
            .field("p", &self.p())
            .field("m", &self.m())
            .field("n", &self.n)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

/// Sums fixed-size chunk partials with a pairwise tree.
pub(crate) fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Deterministic parallel reduction of per-sample contributions of length `len`.
pub(crate) fn reduce_samples<F>(n: usize, len: usize, per_chunk: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            per_chunk(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    tree_sum(parts)
}

/// Averages the descriptors of `set` over `data`.
pub fn materialize(data: &Dataset, set: &MomentFunctionSet, storage: Storage) -> Result<MomentMatrix> {
    materialize_shared(Arc::new(data.clone()), set, storage)
}

/// As [`materialize`], sharing an existing dataset handle.
pub fn materialize_shared(data: Arc<Dataset>, set: &MomentFunctionSet, storage: Storage) -> Result<MomentMatrix> {
    let set = set.bind(&data)?;
    let (n, p, m) = (data.n(), set.p, set.m());
    let cached = match storage {
        Storage::Cached => true,
        Storage::Streaming => false,
        Storage::Auto => n.saturating_mul(p).saturating_mul(m) <= DEFAULT_CACHE_LIMIT,
    };
    let block = p * m;
    let check = |i: usize, f: &[f64]| -> Result<()> {
        match f.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(Error::NonFiniteMoment { sample: i, descriptor: idx / p }),
            None => Ok(()),
        }
    };
    let (sum, cache) = if cached {
        let mut stack = vec![0.0; n * block];
        stack
            .par_chunks_mut(block)
            .enumerate()
            .try_for_each_init(Vec::new, |scratch, (i, f)| {
                set.evaluate_into(data.row(i), data.y(i), f, scratch);
                check(i, f)
            })?;
        let sum = reduce_samples(n, block, |range, acc| {
            for i in range {
                acc.iter_mut().zip(&stack[i * block..(i + 1) * block]).for_each(|(a, v)| *a += v);
            }
        });
        (sum, Some(Arc::new(stack)))
    } else {
        // validate first so the error names the first offending sample
        let first_bad = (0..n).into_par_iter().find_first(|&i| {
            let mut f = vec![0.0; block];
            set.evaluate_into(data.row(i), data.y(i), &mut f, &mut Vec::new());
            f.iter().any(|v| !v.is_finite())
        });
        if let Some(i) = first_bad {
            let mut f = vec![0.0; block];
            set.evaluate_into(data.row(i), data.y(i), &mut f, &mut Vec::new());
            check(i, &f)?;
        }
        let sum = reduce_samples(n, block, |range, acc| {
            let mut f = vec![0.0; block];
            let mut scratch = Vec::new();
            for i in range {
                set.evaluate_into(data.row(i), data.y(i), &mut f, &mut scratch);
                acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v);
            }
        });
        (sum, None)
    };
    let v = DMatrix::from_column_slice(p, m, &sum) / n as f64;
    Ok(MomentMatrix { v, n, source: Some((data, set)), cache })
}

impl MomentMatrix {
    /// Moment matrix from precomputed per-sample evaluations, stored as `n`
    /// consecutive column-major `p × m` blocks.
    pub fn from_evaluations(n: usize, p: usize, m: usize, stack: Vec<f64>) -> Result<MomentMatrix> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if p == 0 || m == 0 || stack.len() != n * p * m {
            return Err(Error::dim(format!(
                "evaluation stack has {} entries, expected n·p·m = {n}·{p}·{m}",
                stack.len()
            )));
        }
        let block = p * m;
        if let Some(idx) = stack.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteMoment { sample: idx / block, descriptor: (idx % block) / p });
        }
        let sum = reduce_samples(n, block, |range, acc| {
            for i in range {
                acc.iter_mut().zip(&stack[i * block..(i + 1) * block]).for_each(|(a, v)| *a += v);
            }
        });
        let v = DMatrix::from_column_slice(p, m, &sum) / n as f64;
        Ok(MomentMatrix { v, n, source: None, cache: Some(Arc::new(stack)) })
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    pub fn m(&self) -> usize {
        self.v.ncols()
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    /// The bound moment set used to build `V`, if built from descriptors.
    pub fn moment_set(&self) -> Option<&MomentFunctionSet> {
        self.source.as_ref().map(|(_, s)| s)
    }

    pub fn dataset(&self) -> Option<&Arc<Dataset>> {
        self.source.as_ref().map(|(d, _)| d)
    }

    /// Writes `F_i` (column-major `p × m`) into `out`.
    pub fn sample_into(&self, i: usize, out: &mut [f64], scratch: &mut Vec<f64>) {
        let block = self.p() * self.m();
        match &self.cache {
            Some(stack) => out.copy_from_slice(&stack[i * block..(i + 1) * block]),
            None => {
                let (data, set) = self.source.as_ref().expect("uncached moment matrices keep their source");
                set.evaluate_into(data.row(i), data.y(i), out, scratch)
            }
        }
    }

    /// `F_i` as a `p × m` matrix.
    pub fn sample(&self, i: usize) -> DMatrix<f64> {
        let mut f = vec![0.0; self.p() * self.m()];
        self.sample_into(i, &mut f, &mut Vec::new());
        DMatrix::from_column_slice(self.p(), self.m(), &f)
    }

    /// Deterministic reduction over samples; `per_sample` receives `F_i`
    /// (column-major), an accumulator of length `len` and a scratch buffer.
    pub fn reduce<F>(&self, len: usize, per_sample: F) -> Vec<f64>
    where
        F: Fn(&[f64], &mut [f64], &mut Vec<f64>) + Sync,
    {
        let block = self.p() * self.m();
        reduce_samples(self.n, len, |range, acc| {
            let mut f = vec![0.0; block];
            let mut scratch = Vec::new();
            let mut work = Vec::new();
            for i in range {
                self.sample_into(i, &mut f, &mut scratch);
                per_sample(&f, acc, &mut work);
            }
        })
    }

    /// Moment matrix restricted to the columns at `indices`.
    pub fn select_columns(&self, indices: &[usize]) -> Result<MomentMatrix> {
        let (p, m) = (self.p(), self.m());
        if let Some(&bad) = indices.iter().find(|&&l| l >= m) {
            return Err(Error::dim(format!("column {bad} out of range for m={m}")));
        }
        if indices.is_empty() {
            return Err(Error::dim("empty column selection"));
        }
        let source = match &self.source {
            Some((data, set)) => Some((Arc::clone(data), set.select(indices)?)),
            None => None,
        };
        let v = DMatrix::from_fn(p, indices.len(), |r, c| self.v[(r, indices[c])]);
        let cache = self.cache.as_ref().map(|stack| {
            let mut sub = Vec::with_capacity(self.n * p * indices.len());
            for i in 0..self.n {
                let f = &stack[i * p * m..(i + 1) * p * m];
                for &l in indices {
                    sub.extend_from_slice(&f[l * p..(l + 1) * p]);
                }
            }
            Arc::new(sub)
        });
        Ok(MomentMatrix { v, n: self.n, source, cache })
    }
}
