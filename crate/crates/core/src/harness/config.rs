//! Experiment configuration documents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::IndexVariant;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    Example1,
    Example1Rate,
    Example2,
    Example3,
    Dimest,
    Custom,
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Data-generating model. Grid points may override `n`, `mu`, `r` and `variant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Factor means are `(μ, −μ, μ, …)`.
    Factor { p: usize, r: usize, mu: f64, sigma: f64 },
    MixedLinear { p: usize, k: usize, radius: f64, sigma: f64 },
    MixedLogistic { p: usize, k: usize, radius: f64 },
    Index { p: usize, variant: IndexVariant },
}

impl ModelConfig {
    pub fn p(&self) -> usize {
        match *self {
            ModelConfig::Factor { p, .. }
            | ModelConfig::MixedLinear { p, .. }
            | ModelConfig::MixedLogistic { p, .. }
            | ModelConfig::Index { p, .. } => p,
        }
    }

    /// Dimension of the true subspace.
    pub fn r(&self) -> usize {
        match *self {
            ModelConfig::Factor { r, .. } => r,
            ModelConfig::MixedLinear { k, .. } | ModelConfig::MixedLogistic { k, .. } => k,
            ModelConfig::Index { .. } => 2,
        }
    }

    /// Moment-group tags available for this model.
    pub fn groups(&self) -> &'static [&'static str] {
        match self {
            ModelConfig::Factor { .. } => &["a", "b"],
            ModelConfig::MixedLinear { .. } | ModelConfig::MixedLogistic { .. } => &["a", "b", "c", "d"],
            ModelConfig::Index { .. } => &["a", "c", "y-phd", "r-phd"],
        }
    }
}

/// How a method turns moments into a subspace.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Factor: PCA of the sample covariance. Mixtures: second moments `(b)`
    /// with `W = I`.
    Standard,
    /// Sign-robustified second moments `(d)` with `W = I`.
    Robustified,
    GmmFull,
    GmmDiagonal,
    /// Two-step GMM (full weight) on the listed moment groups.
    GmmSubset(Vec<String>),
    /// All moment groups with `W = I`.
    Identity,
    /// Principal Hessian directions from `y`.
    PhdY,
    /// Principal Hessian directions from least-squares residuals.
    PhdResidual,
    /// Top eigenvectors of `κ XᵀX/n + V W Vᵀ` with the two-step `W`.
    Augmented(f64),
}

impl Method {
    /// Parses a method tag. `gmm-full-2` and `gmm-full-3` are shorthands for
    /// `gmm-subset(a,b,d)` and `gmm-subset(a,b)`.
    pub fn parse(tag: &str) -> Result<Self> {
        let t = tag.trim();
        let inner = |prefix: &str| {
            t.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('('))
                .and_then(|rest| rest.strip_suffix(')'))
        };
        Ok(match t {
            "standard" => Method::Standard,
            "robustified" => Method::Robustified,
            "gmm-full" => Method::GmmFull,
            "gmm-diagonal" => Method::GmmDiagonal,
            "gmm-full-2" => Method::GmmSubset(vec!["a".into(), "b".into(), "d".into()]),
            "gmm-full-3" => Method::GmmSubset(vec!["a".into(), "b".into()]),
            "identity" => Method::Identity,
            "phd-y" => Method::PhdY,
            "phd-residual" => Method::PhdResidual,
            _ => {
                if let Some(list) = inner("gmm-subset") {
                    let tags: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    if tags.is_empty() {
                        return Err(Error::Config(format!("method {t:?} lists no moment groups")));
                    }
                    Method::GmmSubset(tags)
                } else if let Some(k) = inner("augmented") {
                    let kappa: f64 = k.trim().parse().map_err(|_| Error::Config(format!("bad κ in method {t:?}")))?;
                    if !(kappa >= 0.0) || !kappa.is_finite() {
                        return Err(Error::Config(format!("κ must be finite and ≥ 0 in {t:?}")));
                    }
                    Method::Augmented(kappa)
                } else {
                    return Err(Error::Config(format!("unknown method tag {t:?}")));
                }
            }
        })
    }
}

/// A method with the label it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub label: String,
    pub method: Method,
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Self {
            label: s.trim().to_string(),
            method: Method::parse(s)?,
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One point of the parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GridPoint {
    /// Reported x-value of the point.
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<IndexVariant>,
}

fn default_replicates() -> usize {
    100
}

fn default_delta() -> f64 {
    0.01
}

fn default_eta() -> f64 {
    0.95
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: ExperimentName,
    pub model: ModelConfig,
    pub n: usize,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_eta")]
    pub eta_quantile: f64,
    /// Threshold for `r̂_τ`; `None` uses `n^{-1/2}·tr(VWVᵀ)/p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Center `x` and `y` before building moments.
    #[serde(default)]
    pub center: bool,
    /// Record `r̂_τ` and `r̂_η` for GMM methods.
    #[serde(default)]
    pub rank_estimates: bool,
    /// Record wall-clock time per fit (breaks bitwise reproducibility of outputs).
    #[serde(default)]
    pub record_runtime: bool,
    /// Empty means a single point at the base parameters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<GridPoint>,
}

fn methods(tags: &[&str]) -> Vec<MethodSpec> {
    tags.iter().map(|t| t.parse().expect("preset method tags are valid")).collect()
}

impl ExperimentConfig {
    /// Built-in designs. `Custom` has no preset.
    pub fn preset(name: ExperimentName, seed: u64) -> Result<Self> {
        let factor = ModelConfig::Factor { p: 10, r: 2, mu: 2.0, sigma: 2.0 };
        let base = |model: ModelConfig, n: usize, tags: &[&str]| Self {
            version: CONFIG_VERSION,
            name,
            model,
            n,
            methods: methods(tags),
            replicates: 100,
            seed,
            delta: 0.01,
            eta_quantile: 0.95,
            tau: None,
            center: false,
            rank_estimates: false,
            record_runtime: false,
            sweep: Vec::new(),
        };
        Ok(match name {
            ExperimentName::Example1 => Self {
                sweep: (0..=8)
                    .map(|i| GridPoint { value: i as f64 * 0.5, mu: Some(i as f64 * 0.5), ..Default::default() })
                    .collect(),
                ..base(factor, 500, &["standard", "gmm-full", "gmm-diagonal"])
            },
            ExperimentName::Example1Rate => Self {
                sweep: (0..6)
                    .map(|i| {
                        let n = 100usize << i;
                        GridPoint { value: n as f64, n: Some(n), ..Default::default() }
                    })
                    .collect(),
                ..base(factor, 500, &["standard", "gmm-full", "gmm-diagonal"])
            },
            ExperimentName::Example2 => Self {
                sweep: [200usize, 400, 800, 1600, 3200]
                    .iter()
                    .map(|&n| GridPoint { value: n as f64, n: Some(n), ..Default::default() })
                    .collect(),
                ..base(
                    ModelConfig::MixedLinear { p: 10, k: 2, radius: 4.0, sigma: 1.0 },
                    800,
                    &["standard", "robustified", "gmm-full", "gmm-full-2", "gmm-full-3", "gmm-diagonal"],
                )
            },
            ExperimentName::Example3 => Self {
                center: true,
                sweep: [IndexVariant::A, IndexVariant::B, IndexVariant::C]
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| GridPoint { value: i as f64, variant: Some(v), ..Default::default() })
                    .collect(),
                ..base(
                    ModelConfig::Index { p: 10, variant: IndexVariant::A },
                    400,
                    &["phd-y", "phd-residual", "gmm-full", "gmm-diagonal"],
                )
            },
            ExperimentName::Dimest => Self {
                rank_estimates: true,
                sweep: vec![
                    GridPoint { value: 2.0, r: Some(2), n: Some(500), ..Default::default() },
                    GridPoint { value: 4.0, r: Some(4), n: Some(1000), ..Default::default() },
                ],
                ..base(factor, 500, &["gmm-full"])
            },
            ExperimentName::Custom => {
                return Err(Error::Config("the custom experiment needs a config file".into()));
            }
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Grid points, or a single point at the base parameters.
    pub fn grid(&self) -> Vec<GridPoint> {
        if self.sweep.is_empty() {
            vec![GridPoint { value: 0.0, ..Default::default() }]
        } else {
            self.sweep.clone()
        }
    }

    /// Model and sample size at a grid point.
    pub fn resolve(&self, point: &GridPoint) -> (ModelConfig, usize) {
        let mut model = self.model.clone();
        match &mut model {
            ModelConfig::Factor { r, mu, .. } => {
                if let Some(v) = point.mu {
                    *mu = v;
                }
                if let Some(v) = point.r {
                    *r = v;
                }
            }
            ModelConfig::MixedLinear { k, .. } | ModelConfig::MixedLogistic { k, .. } => {
                if let Some(v) = point.r {
                    *k = v;
                }
            }
            ModelConfig::Index { variant, .. } => {
                if let Some(v) = point.variant {
                    *variant = v;
                }
            }
        }
        (model, point.n.unwrap_or(self.n))
    }

    /// Rejects anything that would fail mid-run.
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be ≥ 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be ≥ 0, got {}", self.delta)));
        }
        if !(self.eta_quantile > 0.0 && self.eta_quantile < 1.0) {
            return Err(Error::Config(format!("eta_quantile must be in (0, 1), got {}", self.eta_quantile)));
        }
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !labels.insert(m.label.as_str()) {
                return Err(Error::Config(format!("method {} listed twice", m.label)));
            }
        }
        for point in self.grid() {
            let (model, n) = self.resolve(&point);
            if n == 0 {
                return Err(Error::Config("sample size must be ≥ 1".into()));
            }
            let groups = model.groups();
            for m in &self.methods {
                let ok = match (&m.method, &model) {
                    (Method::Standard, ModelConfig::Index { .. }) => false,
                    (Method::Robustified, ModelConfig::Factor { .. } | ModelConfig::Index { .. }) => false,
                    (Method::PhdY | Method::PhdResidual, ModelConfig::Factor { .. }) => false,
                    (Method::Augmented(_), m) => matches!(m, ModelConfig::Factor { .. }),
                    (Method::GmmSubset(tags), _) => {
                        if let Some(bad) = tags.iter().find(|t| !groups.contains(&t.as_str())) {
                            return Err(Error::Config(format!(
                                "method {}: unknown moment group {bad:?} (available: {})",
                                m.label,
                                groups.join(", ")
                            )));
                        }
                        true
                    }
                    _ => true,
                };
                if !ok {
                    return Err(Error::Config(format!("method {} is not defined for this model", m.label)));
                }
            }
        }
        Ok(())
    }
}
