use ewfm::evaluation::{estimate_log_partition, snis_observable};
use ewfm::importance::{
    clip_log_weights, compute_log_weights, nearest_rank_percentile, normalize_weights, snis_gradient, weight_ess,
    ClipPolicy,
};
use ewfm::trainer::initial_proposal_sample;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn snis_gradient_matches_linear_space_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let lw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let grads: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let w = normalize_weights(&lw).unwrap();
        let got = snis_gradient(&grads, &w).unwrap();
        let raw: Vec<f64> = lw.iter().map(|v| v.exp()).collect();
        let total: f64 = raw.iter().sum();
        for k in 0..5 {
            let want = grads.iter().zip(&raw).map(|(g, r)| g[k] * r).sum::<f64>() / total;
            assert!((got[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn snis_one_dimensional_consistency() {
    // target N(1, 1) via E = (x - 1)^2 / 2, proposal N(0, 2^2); E_target[x^2] = 2
    let draws = initial_proposal_sample(1, 2.0, 100_000, 4).unwrap();
    let e: Vec<f64> = draws.iter().map(|(x, _)| 0.5 * (x[0] - 1.0).powi(2)).collect();
    let lq: Vec<f64> = draws.iter().map(|(_, l)| *l).collect();
    let f: Vec<f64> = draws.iter().map(|(x, _)| x[0] * x[0]).collect();
    let est = snis_observable(&lq, &e, 1.0, &f).unwrap();
    // delta-method standard error of the ratio estimator
    let w = normalize_weights(&compute_log_weights(&e, 1.0, &lq).unwrap().values).unwrap();
    let se = w.iter().zip(&f).map(|(wi, fi)| wi * wi * (fi - est).powi(2)).sum::<f64>().sqrt();
    assert!((est - 2.0).abs() < 3.0 * se, "{est} (se {se})");
}

#[test]
fn snis_second_moment_of_standard_normal() {
    let d = 3;
    let draws = initial_proposal_sample(d, 2.0, 100_000, 8).unwrap();
    let e: Vec<f64> = draws.iter().map(|(x, _)| 0.5 * x.iter().map(|v| v * v).sum::<f64>()).collect();
    let lq: Vec<f64> = draws.iter().map(|(_, l)| *l).collect();
    let f: Vec<f64> = draws.iter().map(|(x, _)| x.iter().map(|v| v * v).sum()).collect();
    let est = snis_observable(&lq, &e, 1.0, &f).unwrap();
    let w = normalize_weights(&compute_log_weights(&e, 1.0, &lq).unwrap().values).unwrap();
    let se = w.iter().zip(&f).map(|(wi, fi)| wi * wi * (fi - est).powi(2)).sum::<f64>().sqrt();
    assert!((est - d as f64).abs() < 3.0 * se, "{est} (se {se})");
}

#[test]
fn log_partition_shift_rule() {
    let draws = initial_proposal_sample(2, 1.5, 1000, 2).unwrap();
    let e: Vec<f64> = draws.iter().map(|(x, _)| 0.5 * x.iter().map(|v| v * v).sum::<f64>()).collect();
    let lq: Vec<f64> = draws.iter().map(|(_, l)| *l).collect();
    let base = estimate_log_partition(&lq, &e, 1.0).unwrap().log_z;
    // E -> E + a and log q -> log q + b shifts log Z by -(a + b)
    let (a, b) = (3.5, -1.25);
    let e2: Vec<f64> = e.iter().map(|v| v + a).collect();
    let lq2: Vec<f64> = lq.iter().map(|v| v + b).collect();
    let shifted = estimate_log_partition(&lq2, &e2, 1.0).unwrap().log_z;
    assert!((shifted - (base - a - b)).abs() < 1e-10);
}

fn clip_bound(n: usize, p: f64) -> usize {
    (n as f64 * (1.0 - p / 100.0) - 1e-9).ceil().max(0.0) as usize
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn clipping_contract(
        values in prop::collection::vec(-50.0f64..50.0, 1..200),
        p in 1.0f64..=100.0,
    ) {
        let (out, count) = clip_log_weights(&values, &ClipPolicy::ClipLogweight { percentile: p });
        let modified = values.iter().zip(&out).filter(|(a, b)| a != b).count();
        prop_assert_eq!(modified, count);
        prop_assert!(count <= clip_bound(values.len(), p), "{} > {}", count, clip_bound(values.len(), p));
        for (a, b) in values.iter().zip(&out) {
            prop_assert!(b <= a);
        }
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
        let tau = nearest_rank_percentile(&values, p).unwrap();
        prop_assert!(out.iter().all(|v| *v <= tau));
    }

    #[test]
    fn normalized_weights_are_a_distribution(lw in prop::collection::vec(-700.0f64..700.0, 1..100)) {
        let w = normalize_weights(&lw).unwrap();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ess = weight_ess(&w);
        prop_assert!(ess > 0.0 && ess <= lw.len() as f64 * (1.0 + 1e-12));
    }
}
