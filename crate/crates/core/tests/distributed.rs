use nalgebra::DMatrix;
use subspace_gmm::distributed::{aggregate, distributed_pipeline, local_summarize, LocalSummary};
use subspace_gmm::estimator::{subspace_metrics, two_step_gmm, weighted_eigen, GmmOptions, WeightMatrix};
use subspace_gmm::models::{gen_factor, gen_mixed_linear, Dataset};
use subspace_gmm::moments::{materialize, MixtureKind, MomentFunctionSet, Storage};
use subspace_gmm::Error;

fn split(data: &Dataset, bounds: &[usize]) -> Vec<Dataset> {
    bounds
        .windows(2)
        .map(|w| data.select_rows(&(w[0]..w[1]).collect::<Vec<_>>()).unwrap())
        .collect()
}

#[test]
fn single_shard_reproduces_the_two_step_estimate() {
    let (data, _) = gen_factor(1200, 8, 2, &[2.0, -2.0], 2.0, 4).unwrap();
    let set = MomentFunctionSet::factor(8, 2.0).unwrap();
    let out = distributed_pipeline(std::slice::from_ref(&data), std::slice::from_ref(&set), 2, 0.01).unwrap();
    let v = materialize(&data, &set, Storage::Cached).unwrap();
    let central = two_step_gmm(&v, &GmmOptions::fixed(2)).unwrap().estimate;
    let d = subspace_metrics(&out.estimate.u, &central.u).unwrap().distance;
    assert!(d < 1e-10, "distance {d}");
}

#[test]
fn weighted_local_averages_sum_to_the_global_average() {
    let (data, _) = gen_mixed_linear(1000, 5, 2, 2.0, 1.0, 6).unwrap();
    let set = MomentFunctionSet::concat(&[
        MomentFunctionSet::mixture(5, MixtureKind::YFirst, None).unwrap(),
        MomentFunctionSet::mixture(5, MixtureKind::Y2Second, None).unwrap(),
    ])
    .unwrap();
    let shards = split(&data, &[0, 123, 600, 1000]);
    let out = distributed_pipeline(&shards, &vec![set.clone(); 3], 2, 0.01).unwrap();
    let total: DMatrix<f64> = out.summaries.iter().map(|s| s.v_l.clone()).sum();
    let global = materialize(&data, &set, Storage::Cached).unwrap();
    assert!((total - global.v()).amax() < 1e-12);
    for (s, shard) in out.summaries.iter().zip(&shards) {
        assert_eq!((s.n_l, s.n_total), (shard.n(), 1000));
        assert!((s.weight() - shard.n() as f64 / 1000.0).abs() < 1e-15);
    }
}

#[test]
fn summary_blocks_are_scaled_local_sigma() {
    let (data, _) = gen_factor(900, 6, 2, &[1.0, 1.0], 1.0, 8).unwrap();
    let set = MomentFunctionSet::factor(6, 1.0).unwrap();
    let shard = data.select_rows(&(0..300).collect::<Vec<_>>()).unwrap();
    let v = materialize(&shard, &set, Storage::Cached).unwrap();
    let pilot = weighted_eigen(v.v(), &WeightMatrix::identity(v.m()), 2).unwrap().u;
    let s = local_summarize("a", &shard, &set, &pilot, 900).unwrap();
    let local = subspace_gmm::estimate_sigma(&v, &pilot).unwrap().sigma;
    assert!((&s.sigma_ll - local / 3.0).amax() < 1e-12);
    assert!((&s.v_l - v.v() / 3.0).amax() < 1e-15);
}

#[test]
fn traffic_does_not_grow_with_shard_size() {
    let set = MomentFunctionSet::factor(6, 1.0).unwrap();
    let bytes = |n: usize| {
        let (data, _) = gen_factor(n, 6, 2, &[1.0, -1.0], 1.0, 2).unwrap();
        let shards = split(&data, &[0, n / 2, n]);
        let out = distributed_pipeline(&shards, &[set.clone(), set.clone()], 2, 0.01).unwrap();
        assert_eq!(out.traffic.len(), 4);
        out.traffic.iter().map(|t| t.bytes_up + t.bytes_down).sum::<usize>()
    };
    let (small, large) = (bytes(200), bytes(20_000));
    let raw = 20_000 * 6 * 8;
    assert!((large as f64 / small as f64 - 1.0).abs() < 0.1, "{small} vs {large} bytes");
    assert!(large * 20 < raw, "{large} bytes against {raw} bytes of raw data");
}

#[test]
fn wire_format_fields() {
    let (data, _) = gen_factor(100, 4, 1, &[1.0], 1.0, 3).unwrap();
    let set = MomentFunctionSet::factor(4, 1.0).unwrap();
    let pilot = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
    let s = local_summarize("east", &data, &set, &pilot, 400).unwrap();
    let text = s.to_json().unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["shard_id"], "east");
    assert_eq!(doc["K"], 5);
    assert_eq!(doc["V_l"].as_array().unwrap().len(), 20);
    assert_eq!(doc["Sigma_ll"].as_array().unwrap().len(), 15);
    assert_eq!(LocalSummary::from_json(&text).unwrap(), s);
}

#[test]
fn aggregate_is_shard_order_invariant() {
    let (data, _) = gen_factor(900, 8, 2, &[2.0, -2.0], 2.0, 5).unwrap();
    let full = MomentFunctionSet::factor(8, 2.0).unwrap();
    let sets = [full.clone(), full.select(&[0]).unwrap(), full.select(&[2, 4, 6]).unwrap()];
    let out = distributed_pipeline(&split(&data, &[0, 300, 500, 900]), &sets, 2, 0.01).unwrap();
    let mut rev = out.summaries.clone();
    rev.rotate_left(1);
    let other = aggregate(&rev, 2, 0.01).unwrap();
    assert!(subspace_metrics(&out.estimate.u, &other.u).unwrap().distance < 1e-12);
}

#[test]
fn shard_failures_name_the_shard() {
    let (with_y, _) = gen_mixed_linear(100, 4, 2, 2.0, 1.0, 1).unwrap();
    let (no_y, _) = gen_factor(100, 4, 2, &[1.0, 1.0], 1.0, 1).unwrap();
    let set = MomentFunctionSet::mixture(4, MixtureKind::Y2Second, None).unwrap();
    let err = distributed_pipeline(&[with_y, no_y], &[set.clone(), set], 2, 0.01).unwrap_err();
    match err {
        Error::Shard { shard, .. } => assert_eq!(shard, "shard1"),
        other => panic!("unexpected error {other}"),
    }
}
