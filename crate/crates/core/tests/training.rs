use std::sync::Arc;

use ewfm::cnf::{draw_standard_normal, sample_forward, standard_normal_log_density, OdeConfig};
use ewfm::energy::{GmmSpec, HarmonicWell};
use ewfm::flow_matching::{cfm_sample_loss, draw_conditional};
use ewfm::importance::{compute_log_weights, normalize_weights, snis_gradient, ClipPolicy};
use ewfm::trainer::{
    optimizer_step, refresh_buffer, AdamConfig, AdamState, Algorithm, AnnealSchedule, BufferEntry, ProposalSource,
    SampleBuffer, TrainConfig, Trainer,
};
use ewfm::{EnergySystem, Error, FieldArch, VectorFieldNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn harmonic(d: usize) -> EnergySystem {
    EnergySystem::new("h", Arc::new(HarmonicWell { dim: d, variance: 1.0 }), 1.0).unwrap()
}

fn ring(n: usize, radius: f64) -> EnergySystem {
    let g = GmmSpec::isotropic(GmmSpec::ring_means(n, radius), 1.0).unwrap();
    EnergySystem::new("ring", Arc::new(g), 1.0).unwrap()
}

fn small_cfg(buffer: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        buffer_size: buffer,
        batch_size: buffer,
        epochs,
        minibatches_per_epoch: 2,
        refresh_every: 2,
        ode: OdeConfig::new(10).unwrap(),
        initial_proposal_scale: 3.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn net(d: usize, seed: u64) -> VectorFieldNet {
    VectorFieldNet::new(FieldArch::new(d, vec![16, 16], 4), seed).unwrap()
}

// Target samples with their exact normalized density as the proposal.
fn exact_buffer(system: &EnergySystem, n: usize, seed: u64) -> SampleBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|_| {
            let x = draw_standard_normal(&mut rng, system.dim());
            BufferEntry {
                log_prop: standard_normal_log_density(&x),
                energy: system.energy(&x).unwrap(),
                x,
            }
        })
        .collect();
    SampleBuffer {
        entries,
        generation: 0,
        source: ProposalSource::InitialProposal,
        dropped: 0,
    }
}

#[test]
fn snis_gradient_equals_cfm_gradient_for_exact_proposal() {
    let sys = harmonic(2);
    let model = VectorFieldNet::random(FieldArch::new(2, vec![16], 4), 1, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let buf = exact_buffer(&sys, 64, rng.random());
        let draws: Vec<_> = buf.entries.iter().map(|e| draw_conditional(&e.x, &mut rng)).collect();
        let grads: Vec<Vec<f64>> = draws.iter().map(|d| cfm_sample_loss(&model, d).unwrap().1).collect();
        let energies: Vec<f64> = buf.entries.iter().map(|e| e.energy).collect();
        let lq: Vec<f64> = buf.entries.iter().map(|e| e.log_prop).collect();
        let lw = compute_log_weights(&energies, 1.0, &lq).unwrap();
        let w = normalize_weights(&lw.values).unwrap();
        let snis = snis_gradient(&grads, &w).unwrap();
        let n = grads.len() as f64;
        for k in 0..snis.len() {
            let mean = grads.iter().map(|g| g[k]).sum::<f64>() / n;
            assert!((snis[k] - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{} vs {mean}", snis[k]);
        }
    }
}

#[test]
fn injected_exact_buffer_matches_plain_cfm_training() {
    let sys = harmonic(2);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        buffer_size: 32,
        batch_size: 16,
        epochs: 1,
        minibatches_per_epoch: 5,
        refresh_every: 1,
        clip: ClipPolicy::None,
        seed: 9,
        ..TrainConfig::default()
    };
    let buffer = exact_buffer(&sys, 32, 4);
    let mut trained = net(2, 3);
    Trainer::new(&sys, cfg.clone(), Algorithm::Iewfm)
        .with_initial_buffer(buffer.clone())
        .run(&mut trained)
        .unwrap();

    // plain CFM on the identical stream
    let mut plain = net(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(plain.n_params());
    for _ in 0..cfg.minibatches_per_epoch {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..buffer.len())).collect();
        let draws: Vec<_> = picks.iter().map(|&i| draw_conditional(&buffer.entries[i].x, &mut rng)).collect();
        let mut grad = vec![0.0; plain.n_params()];
        for d in &draws {
            let (_, g) = cfm_sample_loss(&plain, d).unwrap();
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / cfg.batch_size as f64;
            }
        }
        optimizer_step(plain.params_mut(), &grad, &mut adam, cfg.learning_rate, &AdamConfig::default()).unwrap();
    }
    for (a, b) in trained.params().iter().zip(plain.params()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn energy_accounting_identity() {
    let sys = ring(4, 3.0);
    let mut model = net(2, 0);
    let out = Trainer::new(&sys, small_cfg(50, 7), Algorithm::Iewfm).run(&mut model).unwrap();
    // refreshes at epochs 3, 5, 7
    assert_eq!(out.refreshes, 3);
    assert_eq!(out.buffers.len(), 4);
    assert_eq!(out.eval_count, 50 * (1 + 3));
    assert_eq!(sys.eval_count(), out.eval_count);
    assert_eq!(out.proposal_source, ProposalSource::Model);
    assert_eq!(out.metrics.len(), 14);
    assert_eq!(out.metrics.last().unwrap().eval_count, 200);
}

#[test]
fn ewfm_never_refreshes() {
    let sys = ring(4, 3.0);
    let mut model = net(2, 0);
    let out = Trainer::new(&sys, small_cfg(50, 7), Algorithm::Ewfm).run(&mut model).unwrap();
    assert_eq!(out.refreshes, 0);
    assert_eq!(out.eval_count, 50);
    assert_eq!(out.proposal_source, ProposalSource::InitialProposal);
}

#[test]
fn single_level_annealing_is_iewfm() {
    let sys = ring(4, 3.0);
    let cfg = small_cfg(40, 6);
    let mut a = net(2, 1);
    let mut b = net(2, 1);
    let ra = Trainer::new(&sys, cfg.clone(), Algorithm::Iewfm).run(&mut a).unwrap();
    let schedule = AnnealSchedule::new(1.0, 1.0, 2, 4).unwrap();
    let sys2 = ring(4, 3.0);
    let rb = Trainer::new(&sys2, cfg, Algorithm::Aewfm)
        .with_schedule(schedule)
        .run(&mut b)
        .unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.eval_count, rb.eval_count);
}

#[test]
fn annealing_uses_level_temperatures() {
    let sys = ring(4, 3.0);
    let schedule = AnnealSchedule::new(10.0, 1.0, 2, 4).unwrap();
    let mut model = net(2, 1);
    let out = Trainer::new(&sys, small_cfg(40, 7), Algorithm::Aewfm)
        .with_schedule(schedule)
        .run(&mut model)
        .unwrap();
    let temps: Vec<f64> = out.metrics.iter().step_by(2).map(|m| m.temperature).collect();
    let mid = 10f64.sqrt();
    assert_eq!(temps[0], 10.0);
    assert_eq!(temps[1], 10.0);
    assert!((temps[2] - mid).abs() < 1e-12 && (temps[3] - mid).abs() < 1e-12);
    assert_eq!(&temps[4..], &[1.0, 1.0, 1.0]);
}

#[test]
fn aewfm_without_schedule_is_config_error() {
    let sys = ring(4, 3.0);
    let mut model = net(2, 1);
    let r = Trainer::new(&sys, small_cfg(10, 1), Algorithm::Aewfm).run(&mut model);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let sys = ring(4, 3.0);
        let mut model = net(2, 2);
        let out = Trainer::new(&sys, small_cfg(30, 5), Algorithm::Iewfm).run(&mut model).unwrap();
        (model.params().to_vec(), out.metrics)
    };
    let (pa, ma) = run();
    let (pb, mb) = run();
    assert_eq!(pa, pb);
    assert_eq!(ma, mb);
}

#[test]
fn refresh_buffer_contract() {
    let sys = ring(4, 3.0);
    let cfg = small_cfg(25, 1);
    let model = net(2, 0);
    let before = sys.eval_count();
    let buf = refresh_buffer(&sys, &model, &cfg, 3).unwrap();
    assert_eq!(sys.eval_count() - before, 25);
    assert_eq!(buf.generation, 3);
    for e in &buf.entries {
        assert!((e.log_prop - standard_normal_log_density(&e.x)).abs() < 1e-10);
        assert_eq!(e.energy, sys.fork().energy(&e.x).unwrap());
    }
}

#[test]
fn degenerate_batches_abort() {
    let sys = harmonic(2);
    let mut buffer = exact_buffer(&sys, 8, 1);
    for e in &mut buffer.entries {
        e.log_prop = f64::NAN;
    }
    let mut model = net(2, 0);
    let r = Trainer::new(&sys, small_cfg(8, 3), Algorithm::Ewfm)
        .with_initial_buffer(buffer)
        .run(&mut model);
    assert!(matches!(r, Err(Error::TrainingAborted(_))), "{r:?}");
}

fn mode_fractions(xs: &[Vec<f64>], means: &[Vec<f64>]) -> Vec<f64> {
    let mut counts = vec![0usize; means.len()];
    for x in xs {
        let k = (0..means.len())
            .min_by(|&a, &b| {
                let da: f64 = means[a].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                let db: f64 = means[b].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        counts[k] += 1;
    }
    counts.iter().map(|&c| c as f64 / xs.len() as f64).collect()
}

fn two_mode_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        buffer_size: 500,
        batch_size: 256,
        epochs: 500,
        minibatches_per_epoch: 4,
        refresh_every: 5,
        ode: OdeConfig::new(20).unwrap(),
        initial_proposal_scale: 5.0,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn two_mode_mixture_covers_both_modes() {
    let sys = ring(2, 4.0);
    let means = GmmSpec::ring_means(2, 4.0);
    let mut model = VectorFieldNet::new(FieldArch::new(2, vec![32, 32], 8), 0).unwrap();
    Trainer::new(&sys, two_mode_cfg(0), Algorithm::Iewfm).run(&mut model).unwrap();
    let xs = sample_forward(&model, 10_000, &OdeConfig::new(20).unwrap(), 1).unwrap();
    let f = mode_fractions(&xs, &means);
    assert!(f.iter().all(|&v| v >= 0.10), "{f:?}");
}

#[test]
fn weight_ess_rises_over_first_generations() {
    let mut per_gen: Vec<Vec<f64>> = vec![Vec::new(); 5];
    for seed in 0..5 {
        let sys = ring(2, 4.0);
        // 100 optimizer steps between generations; with only ~20 the first
        // model buffer comes from a near-identity flow and the trend fails
        let cfg = TrainConfig {
            epochs: 41,
            refresh_every: 10,
            minibatches_per_epoch: 10,
            ..two_mode_cfg(seed)
        };
        let mut model = VectorFieldNet::new(FieldArch::new(2, vec![32, 32], 8), seed).unwrap();
        let out = Trainer::new(&sys, cfg, Algorithm::Iewfm).run(&mut model).unwrap();
        for (g, b) in out.buffers.iter().take(5).enumerate() {
            per_gen[g].push(b.ess);
        }
    }
    let medians: Vec<f64> = per_gen
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
}
