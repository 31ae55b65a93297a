//! Estimation across data shards that never share raw samples.
//!
//! Shard `ℓ` holds `n_ℓ` of the `n` samples and its own moment set with
//! `K_ℓ` descriptors. With a pilot `Û₀` it reports
//!
//! ```text
//! V_ℓ  = (n_ℓ/n) · (local moment averages)            p × K_ℓ
//! Σ_ℓℓ = (n_ℓ/n) · (local Σ̂ at Û₀)                    K_ℓ × K_ℓ
//! ```
//!
//! which are exactly the diagonal blocks a centralized run would compute if
//! each descriptor were zero outside its shard. The coordinator returns the
//! top-`r` eigenvectors of `Σ_ℓ V_ℓ pinv_δ(Σ_ℓℓ) V_ℓᵀ`.
//!
//! The pipeline runs over an in-process transport whose messages are the
//! serialized JSON wire forms; it counts the bytes crossing each shard
//! boundary.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, SubspaceEstimate, WeightMatrix};
use crate::linalg;
use crate::models::Dataset;
use crate::moments::{materialize, MomentFunctionSet, Storage};

pub const WIRE_VERSION: u32 = 1;

/// Per-shard summary sent to the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSummary {
    pub shard_id: String,
    pub n_l: usize,
    pub n_total: usize,
    /// `(n_ℓ/n)` times the local moment averages, `p × K_ℓ`.
    pub v_l: DMatrix<f64>,
    /// `(n_ℓ/n)` times the local `Σ̂`, `K_ℓ × K_ℓ`.
    pub sigma_ll: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SummaryWire {
    version: u32,
    shard_id: String,
    n_l: usize,
    n_total: usize,
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    /// column-major
    #[serde(rename = "V_l")]
    v_l: Vec<f64>,
    /// row-major upper triangle including the diagonal
    #[serde(rename = "Sigma_ll")]
    sigma_ll: Vec<f64>,
}

impl LocalSummary {
    pub fn weight(&self) -> f64 {
        self.n_l as f64 / self.n_total as f64
    }

    pub fn p(&self) -> usize {
        self.v_l.nrows()
    }

    pub fn k(&self) -> usize {
        self.v_l.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        let k = self.k();
        let mut upper = Vec::with_capacity(k * (k + 1) / 2);
        for i in 0..k {
            for j in i..k {
                upper.push(self.sigma_ll[(i, j)]);
            }
        }
        Ok(serde_json::to_string(&SummaryWire {
            version: WIRE_VERSION,
            shard_id: self.shard_id.clone(),
            n_l: self.n_l,
            n_total: self.n_total,
            p: self.p(),
            k,
            v_l: self.v_l.as_slice().to_vec(),
            sigma_ll: upper,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: SummaryWire = serde_json::from_str(text)?;
        if w.version != WIRE_VERSION {
            return Err(Error::Config(format!("unsupported summary version {}", w.version)));
        }
        if w.v_l.len() != w.p * w.k || w.sigma_ll.len() != w.k * (w.k + 1) / 2 {
            return Err(Error::dim(format!("summary {} has inconsistent sizes", w.shard_id)));
        }
        let mut sigma = DMatrix::zeros(w.k, w.k);
        let mut it = w.sigma_ll.iter();
        for i in 0..w.k {
            for j in i..w.k {
                let v = *it.next().expect("length checked");
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        Ok(Self {
            shard_id: w.shard_id,
            n_l: w.n_l,
            n_total: w.n_total,
            v_l: DMatrix::from_column_slice(w.p, w.k, &w.v_l),
            sigma_ll: sigma,
        })
    }
}

/// Computes a shard's summary for the given pilot.
pub fn local_summarize(shard_id: &str, shard: &Dataset, set: &MomentFunctionSet, pilot: &DMatrix<f64>, n_total: usize) -> Result<LocalSummary> {
    if shard.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    if n_total < shard.n() {
        return Err(Error::param(format!("n_total = {n_total} is smaller than the shard size {}", shard.n())));
    }
    linalg::ensure_orthonormal(pilot, 1e-8, "pilot")?;
    let mm = materialize(shard, set, Storage::Auto)?;
    let sigma = estimator::estimate_sigma(&mm, pilot)?;
    let weight = shard.n() as f64 / n_total as f64;
    Ok(LocalSummary {
        shard_id: shard_id.to_string(),
        n_l: shard.n(),
        n_total,
        v_l: mm.v() * weight,
        sigma_ll: sigma.sigma * weight,
    })
}

fn check_summaries(summaries: &[LocalSummary]) -> Result<usize> {
    let first = summaries.first().ok_or_else(|| Error::param("no shard summaries"))?;
    let p = first.p();
    let mut ids = BTreeSet::new();
    for s in summaries {
        if s.p() != p {
            return Err(Error::dim(format!("shard {} has p={} but shard {} has p={p}", s.shard_id, s.p(), first.shard_id)));
        }
        if !ids.insert(s.shard_id.as_str()) {
            return Err(Error::param(format!("duplicate shard id {}", s.shard_id)));
        }
    }
    Ok(p)
}

/// Block-diagonal weight `diag(pinv_δ(Σ_ℓℓ))` in summary order. Shards whose
/// block thresholds to zero contribute nothing; if every block does, the
/// identity is used.
pub fn block_weight(summaries: &[LocalSummary], delta: f64, warnings: &mut Vec<String>) -> Result<WeightMatrix> {
    let mut blocks = Vec::with_capacity(summaries.len());
    let mut any = false;
    for s in summaries {
        let t = estimator::thresholded_pinv(&s.sigma_ll, delta)?;
        if t.is_degenerate() {
            warnings.push(format!("shard {}: every eigenvalue of Σ_ℓℓ is ≤ δ; its moments get zero weight", s.shard_id));
        } else {
            any = true;
        }
        blocks.push(t.weight.matrix().clone());
    }
    if !any {
        warnings.push("all shard blocks are degenerate; falling back to W = I".into());
        blocks = summaries.iter().map(|s| DMatrix::identity(s.k(), s.k())).collect();
    }
    WeightMatrix::block_diagonal(&blocks)
}

/// Top-`r` eigenvectors of `Σ_ℓ V_ℓ pinv_δ(Σ_ℓℓ) V_ℓᵀ`.
pub fn aggregate(summaries: &[LocalSummary], r: usize, delta: f64) -> Result<SubspaceEstimate> {
    let p = check_summaries(summaries)?;
    let mut warnings = Vec::new();
    let weight = block_weight(summaries, delta, &mut warnings)?;
    let mut total = DMatrix::zeros(p, p);
    let mut at = 0;
    for s in summaries {
        let k = s.k();
        let w = weight.matrix().view((at, at), (k, k));
        total += &s.v_l * w * s.v_l.transpose();
        at += k;
    }
    let mut est = estimator::symmetric_top(&linalg::symmetrize(&total), r)?;
    warnings.append(&mut est.warnings);
    est.warnings = warnings;
    Ok(est)
}

/// Request from the coordinator to a shard.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "round", rename_all = "snake_case")]
enum Request {
    /// Unscaled local moment averages.
    Moments,
    /// Summary at the broadcast pilot.
    Summary { p: usize, r: usize, pilot: Vec<f64>, n_total: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentsWire {
    version: u32,
    shard_id: String,
    n_l: usize,
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "V_l")]
    v_l: Vec<f64>,
}

/// A shard behind the transport boundary. The coordinator reaches it only
/// through serialized request and reply strings.
pub struct ShardWorker {
    id: String,
    data: Dataset,
    set: MomentFunctionSet,
}

impl ShardWorker {
    pub fn new(id: impl Into<String>, data: Dataset, set: MomentFunctionSet) -> Self {
        Self { id: id.into(), data, set }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn handle(&self, request: &str) -> Result<String> {
        match serde_json::from_str::<Request>(request)? {
            Request::Moments => {
                let mm = materialize(&self.data, &self.set, Storage::Auto)?;
                Ok(serde_json::to_string(&MomentsWire {
                    version: WIRE_VERSION,
                    shard_id: self.id.clone(),
                    n_l: self.data.n(),
                    p: mm.p(),
                    k: mm.m(),
                    v_l: mm.v().as_slice().to_vec(),
                })?)
            }
            Request::Summary { p, r, pilot, n_total } => {
                if pilot.len() != p * r {
                    return Err(Error::dim("pilot message has inconsistent size"));
                }
                let pilot = DMatrix::from_column_slice(p, r, &pilot);
                local_summarize(&self.id, &self.data, &self.set, &pilot, n_total)?.to_json()
            }
        }
    }
}

/// Bytes moved across one shard boundary in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub shard_id: String,
    pub round: u8,
    pub bytes_down: usize,
    pub bytes_up: usize,
}

/// In-process message passing with a byte counter.
pub struct InProcessTransport {
    workers: Vec<ShardWorker>,
    traffic: Vec<Traffic>,
}

impl InProcessTransport {
    pub fn new(workers: Vec<ShardWorker>) -> Result<Self> {
        if workers.is_empty() {
            return Err(Error::param("at least one shard is required"));
        }
        let mut ids = BTreeSet::new();
        if let Some(dup) = workers.iter().find(|w| !ids.insert(w.id.clone())) {
            return Err(Error::param(format!("duplicate shard id {}", dup.id)));
        }
        Ok(Self { workers, traffic: Vec::new() })
    }

    pub fn traffic(&self) -> &[Traffic] {
        &self.traffic
    }

    /// Sends one request per shard concurrently; replies come back in shard order.
    fn round(&mut self, round: u8, requests: Vec<String>) -> Result<Vec<String>> {
        let replies: Vec<Result<String>> = self
            .workers
            .par_iter()
            .zip(requests.par_iter())
            .map(|(w, req)| {
                w.handle(req).map_err(|e| Error::Shard {
                    shard: w.id.clone(),
                    source: Box::new(e),
                })
            })
            .collect();
        let replies = replies.into_iter().collect::<Result<Vec<_>>>()?;
        for ((w, req), rep) in self.workers.iter().zip(&requests).zip(&replies) {
            self.traffic.push(Traffic {
                shard_id: w.id.clone(),
                round,
                bytes_down: req.len(),
                bytes_up: rep.len(),
            });
        }
        Ok(replies)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub estimate: SubspaceEstimate,
    pub pilot: DMatrix<f64>,
    pub summaries: Vec<LocalSummary>,
    pub traffic: Vec<Traffic>,
}

/// Two-round protocol: pilot from `W = I` on the concatenated unscaled
/// local moments, then summaries at that pilot and aggregation.
pub fn run_pipeline(transport: &mut InProcessTransport, r: usize, delta: f64) -> Result<PipelineResult> {
    let count = transport.workers.len();
    let ask = serde_json::to_string(&Request::Moments)?;
    let replies = transport.round(1, vec![ask; count])?;
    let mut blocks = Vec::with_capacity(count);
    let mut n_total = 0;
    let mut p = None;
    for rep in &replies {
        let m: MomentsWire = serde_json::from_str(rep)?;
        if m.v_l.len() != m.p * m.k {
            return Err(Error::Shard {
                shard: m.shard_id,
                source: Box::new(Error::dim("moment message has inconsistent size")),
            });
        }
        if *p.get_or_insert(m.p) != m.p {
            return Err(Error::Shard {
                shard: m.shard_id,
                source: Box::new(Error::dim(format!("shard has p={} but earlier shards have p={}", m.p, p.unwrap_or(0)))),
            });
        }
        n_total += m.n_l;
        blocks.push(DMatrix::from_column_slice(m.p, m.k, &m.v_l));
    }
    let p = p.unwrap_or(0);
    let concat = DMatrix::from_fn(p, blocks.iter().map(|b| b.ncols()).sum(), {
        let cols: Vec<(usize, usize)> = blocks
            .iter()
            .enumerate()
            .flat_map(|(b, m)| (0..m.ncols()).map(move |c| (b, c)))
            .collect();
        move |i, j| blocks[cols[j].0][(i, cols[j].1)]
    });
    let pilot = estimator::weighted_eigen(&concat, &WeightMatrix::identity(concat.ncols()), r)?.u;
    let ask = serde_json::to_string(&Request::Summary {
        p,
        r,
        pilot: pilot.as_slice().to_vec(),
        n_total,
    })?;
    let replies = transport.round(2, vec![ask; count])?;
    let summaries = replies
        .iter()
        .map(|rep| LocalSummary::from_json(rep))
        .collect::<Result<Vec<_>>>()?;
    let estimate = aggregate(&summaries, r, delta)?;
    Ok(PipelineResult {
        estimate,
        pilot,
        summaries,
        traffic: transport.traffic.clone(),
    })
}

/// Runs the two-round protocol on in-memory shards named `shard0`, `shard1`, ….
pub fn distributed_pipeline(shards: &[Dataset], sets: &[MomentFunctionSet], r: usize, delta: f64) -> Result<PipelineResult> {
    if shards.len() != sets.len() {
        return Err(Error::param(format!("{} shards but {} moment sets", shards.len(), sets.len())));
    }
    let workers = shards
        .iter()
        .zip(sets)
        .enumerate()
        .map(|(i, (d, s))| ShardWorker::new(format!("shard{i}"), d.clone(), s.clone()))
        .collect();
    run_pipeline(&mut InProcessTransport::new(workers)?, r, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip() {
        let s = LocalSummary {
            shard_id: "a".into(),
            n_l: 3,
            n_total: 7,
            v_l: DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            sigma_ll: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
        };
        let json = s.to_json().unwrap();
        assert!(json.contains("\"Sigma_ll\":[1.0,0.5,2.0]"));
        assert_eq!(LocalSummary::from_json(&json).unwrap(), s);
    }

    #[test]
    fn scalar_blocks_use_reciprocal_weights() {
        let mk = |id: &str, v: [f64; 2], s: f64| LocalSummary {
            shard_id: id.into(),
            n_l: 1,
            n_total: 2,
            v_l: DMatrix::from_column_slice(2, 1, &v),
            sigma_ll: DMatrix::from_element(1, 1, s),
        };
        let sums = [mk("a", [1.0, 0.0], 0.5), mk("b", [0.0, 1.0], 0.25)];
        let est = aggregate(&sums, 1, 0.01).unwrap();
        // 1/0.5 < 1/0.25, so the second shard's direction wins
        assert!((est.u[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(est.eigenvalues.as_slice(), &[4.0, 2.0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = LocalSummary {
            shard_id: "a".into(),
            n_l: 1,
            n_total: 1,
            v_l: DMatrix::from_column_slice(1, 1, &[1.0]),
            sigma_ll: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(aggregate(&[s.clone(), s], 1, 0.0).is_err());
    }
}
