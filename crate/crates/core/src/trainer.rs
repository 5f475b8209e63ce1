//! Buffered iterative training and its temperature-annealed variant.
//!
//! One run owns a single network. Every `refresh_every` epochs (never in the
//! first) the buffer is regenerated from the current model; every minibatch
//! draws endpoints from the buffer with replacement, weights them with the
//! energies and densities cached at generation time, and takes one
//! optimizer step on the self-normalized gradient.
//!
//! Random streams: the minibatch stream is `ChaCha8Rng::seed_from_u64(seed)`
//! and is consumed per step as `batch_size` index draws followed by one
//! `(t, x_0)` draw per endpoint. Buffer generation `g` uses per-sample
//! streams derived from `(seed, g)`.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnf::{self, draw_standard_normal, sample_rng, DivergenceMode, OdeConfig};
use crate::energy::EnergySystem;
use crate::error::{Error, Result};
use crate::field::VectorFieldNet;
use crate::flow_matching::{cfm_sample_loss, draw_conditional};
use crate::importance::{
    clipped_log_weights, ewfm_loss_estimate, normalize_weights, snis_gradient, weight_ess, ClipPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    InitialProposal,
    Model,
}

impl std::fmt::Display for ProposalSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProposalSource::InitialProposal => "initial-proposal",
            ProposalSource::Model => "model",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    pub log_prop: f64,
    pub energy: f64,
}

/// Cached `(x, log q(x), E(x))` triples; never recomputed after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    pub entries: Vec<BufferEntry>,
    pub generation: usize,
    pub source: ProposalSource,
    /// Samples lost to failed ODE solves during generation.
    pub dropped: usize,
}

impl SampleBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `false` (and leaves everything
/// untouched) when the gradient has non-finite entries.
pub fn optimizer_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<bool> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Internal("optimizer shape mismatch".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        warn!("rejected optimizer step with non-finite gradient");
        return Ok(false);
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    /// Epochs between buffer refreshes.
    pub refresh_every: usize,
    #[serde(default)]
    pub clip: ClipPolicy,
    #[serde(default)]
    pub ode: OdeConfig,
    /// Density mode for buffer generation; exact for `d <= 8` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceMode>,
    /// Standard deviation of the isotropic Gaussian initial proposal.
    #[serde(default = "one")]
    pub initial_proposal_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Zero the optimizer moments whenever the annealing temperature changes.
    #[serde(default)]
    pub reset_moments_per_level: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            buffer_size: 5000,
            batch_size: 5000,
            epochs: 5000,
            minibatches_per_epoch: 10,
            refresh_every: 1,
            clip: ClipPolicy::default(),
            ode: OdeConfig::default(),
            divergence: None,
            initial_proposal_scale: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            reset_moments_per_level: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("buffer_size", self.buffer_size),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("minibatches_per_epoch", self.minibatches_per_epoch),
            ("refresh_every", self.refresh_every),
            ("ode.n_steps", self.ode.n_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.initial_proposal_scale > 0.0) {
            return Err(Error::Config("initial_proposal_scale must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        self.clip.validate()?;
        if let Some(d) = &self.divergence {
            d.validate()?;
        }
        Ok(())
    }

    pub fn divergence_for(&self, dim: usize) -> DivergenceMode {
        self.divergence.unwrap_or_else(|| DivergenceMode::auto(dim, 1))
    }
}

/// Geometric temperature ladder `T_k = T_init (T_final / T_init)^(k / K)`,
/// `K = total_anneal_epochs / epochs_per_temperature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub t_init: f64,
    pub t_final: f64,
    pub epochs_per_temperature: usize,
    pub total_anneal_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(t_init: f64, t_final: f64, epochs_per_temperature: usize, total_anneal_epochs: usize) -> Result<Self> {
        let s = Self {
            t_init,
            t_final,
            epochs_per_temperature,
            total_anneal_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !(self.t_init >= self.t_final) || !self.t_init.is_finite() {
            return Err(Error::Config(format!(
                "need T_init >= T_final > 0, got {} and {}",
                self.t_init, self.t_final
            )));
        }
        if self.epochs_per_temperature == 0 {
            return Err(Error::Config("epochs_per_temperature must be >= 1".into()));
        }
        if !self.total_anneal_epochs.is_multiple_of(self.epochs_per_temperature) {
            return Err(Error::Config(
                "total_anneal_epochs must be a multiple of epochs_per_temperature".into(),
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.total_anneal_epochs / self.epochs_per_temperature
    }

    /// All `K + 1` levels; the last is exactly `t_final`.
    pub fn temperatures(&self) -> Vec<f64> {
        let k = self.n_steps();
        let ratio = self.t_final / self.t_init;
        let mut out: Vec<f64> = (0..=k)
            .map(|i| {
                if k == 0 {
                    self.t_final
                } else {
                    self.t_init * ratio.powf(i as f64 / k as f64)
                }
            })
            .collect();
        *out.last_mut().unwrap() = self.t_final;
        out
    }

    /// Temperature for 1-based `epoch`; the final level holds after the
    /// annealing window.
    pub fn temperature_at_epoch(&self, epoch: usize, levels: &[f64]) -> f64 {
        let level = ((epoch - 1) / self.epochs_per_temperature).min(levels.len() - 1);
        levels[level]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Fixed initial proposal, no refresh.
    Ewfm,
    Iewfm,
    Aewfm,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ewfm" => Ok(Algorithm::Ewfm),
            "iewfm" => Ok(Algorithm::Iewfm),
            "aewfm" => Ok(Algorithm::Aewfm),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ewfm => "ewfm",
            Algorithm::Iewfm => "iewfm",
            Algorithm::Aewfm => "aewfm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub temperature: f64,
    pub loss_estimate: f64,
    pub ess: f64,
    pub clip_count: usize,
    pub dropped: usize,
    pub eval_count: u64,
    pub grad_norm: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 9] = [
        "epoch",
        "step",
        "temperature",
        "loss_estimate",
        "ess",
        "clip_count",
        "dropped",
        "eval_count",
        "grad_norm",
    ];

    pub fn fields(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.step.to_string(),
            self.temperature.to_string(),
            self.loss_estimate.to_string(),
            self.ess.to_string(),
            self.clip_count.to_string(),
            self.dropped.to_string(),
            self.eval_count.to_string(),
            self.grad_norm.to_string(),
        ]
    }
}

/// Per-generation summary of the buffer's importance weights at the
/// temperature in force when it was generated.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferStats {
    pub generation: usize,
    pub epoch: usize,
    pub temperature: f64,
    pub ess: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub buffers: Vec<BufferStats>,
    pub refreshes: usize,
    pub proposal_source: ProposalSource,
    pub skipped_steps: usize,
    pub rejected_steps: usize,
    pub eval_count: u64,
}

/// `n` draws from `N(0, scale^2 I)` with exact log-densities.
pub fn initial_proposal_sample(dim: usize, scale: f64, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidInput("proposal scale must be positive".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let x: Vec<f64> = draw_standard_normal(&mut rng, dim).into_iter().map(|z| z * scale).collect();
            let lq = gaussian_log_density(&x, scale);
            (x, lq)
        })
        .collect())
}

/// `log N(x | 0, scale^2 I)`.
pub fn gaussian_log_density(x: &[f64], scale: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() / (scale * scale)
        - 0.5 * d * (2.0 * std::f64::consts::PI * scale * scale).ln()
}

fn generation_seed(seed: u64, generation: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (generation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fill_energies(system: &EnergySystem, samples: Vec<(Vec<f64>, f64)>) -> Vec<BufferEntry> {
    let xs: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.clone()).collect();
    let energies = system.energy_batch(&xs);
    samples
        .into_iter()
        .zip(energies)
        .map(|((x, log_prop), e)| BufferEntry {
            x,
            log_prop,
            energy: e.unwrap_or(f64::INFINITY),
        })
        .collect()
}

/// Generation-0 buffer from the Gaussian initial proposal.
pub fn initial_buffer(system: &EnergySystem, cfg: &TrainConfig) -> Result<SampleBuffer> {
    let samples = initial_proposal_sample(
        system.dim(),
        cfg.initial_proposal_scale,
        cfg.buffer_size,
        generation_seed(cfg.seed, 0),
    )?;
    Ok(SampleBuffer {
        entries: fill_energies(system, samples),
        generation: 0,
        source: ProposalSource::InitialProposal,
        dropped: 0,
    })
}

/// Draws `buffer_size` model samples with their densities and evaluates each
/// energy once. A failed ODE solve is retried once with fresh noise and then
/// dropped; more than half the buffer failing is an error.
pub fn refresh_buffer(
    system: &EnergySystem,
    net: &VectorFieldNet,
    cfg: &TrainConfig,
    generation: usize,
) -> Result<SampleBuffer> {
    let div = cfg.divergence_for(system.dim());
    let seed = generation_seed(cfg.seed, generation);
    let mut samples = Vec::with_capacity(cfg.buffer_size);
    let mut dropped = 0;
    let mut last_err = None;
    for i in 0..cfg.buffer_size {
        let mut rng = sample_rng(seed, i as u64);
        let first = cnf::sample_one_with_logdensity(net, &cfg.ode, div, &mut rng);
        let result = match first {
            Ok(s) => Ok(s),
            Err(_) => cnf::sample_one_with_logdensity(net, &cfg.ode, div, &mut rng),
        };
        match result {
            Ok(s) => samples.push(s),
            Err(e) => {
                dropped += 1;
                last_err = Some(e);
            }
        }
    }
    if dropped > 0 {
        warn!("buffer generation {generation}: dropped {dropped} samples after retry");
    }
    if 2 * dropped > cfg.buffer_size {
        return Err(last_err.unwrap_or(Error::Internal("buffer generation failed".into())));
    }
    Ok(SampleBuffer {
        entries: fill_energies(system, samples),
        generation,
        source: ProposalSource::Model,
        dropped,
    })
}

fn buffer_ess(buffer: &SampleBuffer, temperature: f64) -> f64 {
    let energies: Vec<f64> = buffer.entries.iter().map(|e| e.energy).collect();
    let log_prop: Vec<f64> = buffer.entries.iter().map(|e| e.log_prop).collect();
    clipped_log_weights(&energies, temperature, &log_prop, &ClipPolicy::None)
        .and_then(|w| normalize_weights(&w.values))
        .map(|w| weight_ess(&w))
        .unwrap_or(0.0)
}

/// Called after each epoch with `(epoch, net)`.
pub type EpochHook<'a> = dyn FnMut(usize, &VectorFieldNet) -> Result<()> + 'a;

/// Configurable training run; see the free functions for the common cases.
pub struct Trainer<'a> {
    system: &'a EnergySystem,
    cfg: TrainConfig,
    algorithm: Algorithm,
    schedule: Option<AnnealSchedule>,
    initial_buffer: Option<SampleBuffer>,
    hook: Option<Box<EpochHook<'a>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(system: &'a EnergySystem, cfg: TrainConfig, algorithm: Algorithm) -> Self {
        Self {
            system,
            cfg,
            algorithm,
            schedule: None,
            initial_buffer: None,
            hook: None,
        }
    }

    pub fn with_schedule(mut self, schedule: AnnealSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    /// Replaces the generation-0 buffer (and its energy evaluations).
    pub fn with_initial_buffer(mut self, buffer: SampleBuffer) -> Self {
        self.initial_buffer = Some(buffer);
        self
    }

    pub fn with_epoch_hook(mut self, hook: Box<EpochHook<'a>>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn run(mut self, net: &mut VectorFieldNet) -> Result<TrainOutcome> {
        let cfg = self.cfg.clone();
        cfg.validate()?;
        if net.dim() != self.system.dim() {
            return Err(Error::Config(format!(
                "network dimension {} does not match system dimension {}",
                net.dim(),
                self.system.dim()
            )));
        }
        let (schedule, levels) = match (self.algorithm, &self.schedule) {
            (Algorithm::Aewfm, Some(s)) => {
                s.validate()?;
                (Some(s.clone()), s.temperatures())
            }
            (Algorithm::Aewfm, None) => {
                return Err(Error::Config("aewfm needs an annealing schedule".into()))
            }
            _ => (None, vec![self.system.temperature()]),
        };
        let temperature_at = |epoch: usize| match &schedule {
            Some(s) => s.temperature_at_epoch(epoch, &levels),
            None => levels[0],
        };
        let refresh_from_model = self.algorithm != Algorithm::Ewfm;

        let mut buffer = match self.initial_buffer.take() {
            Some(b) => b,
            None => initial_buffer(self.system, &cfg)?,
        };
        let mut buffers = vec![BufferStats {
            generation: buffer.generation,
            epoch: 1,
            temperature: temperature_at(1),
            ess: buffer_ess(&buffer, temperature_at(1)),
            size: buffer.len(),
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = AdamState::new(net.n_params());
        let mut metrics = Vec::with_capacity(cfg.epochs * cfg.minibatches_per_epoch);
        let mut refreshes = 0;
        let mut step = 0;
        let mut skipped = 0;
        let mut rejected = 0;
        let mut consecutive_degenerate = 0;
        let mut current_temperature = temperature_at(1);

        for epoch in 1..=cfg.epochs {
            let temperature = temperature_at(epoch);
            if temperature != current_temperature {
                if cfg.reset_moments_per_level {
                    adam = AdamState::new(net.n_params());
                }
                current_temperature = temperature;
            }
            if refresh_from_model && epoch > 1 && (epoch - 1) % cfg.refresh_every == 0 {
                buffer = refresh_buffer(self.system, net, &cfg, buffer.generation + 1)?;
                refreshes += 1;
                buffers.push(BufferStats {
                    generation: buffer.generation,
                    epoch,
                    temperature,
                    ess: buffer_ess(&buffer, temperature),
                    size: buffer.len(),
                });
            }
            if buffer.is_empty() {
                return Err(Error::TrainingAborted("empty sample buffer".into()));
            }

            for _ in 0..cfg.minibatches_per_epoch {
                step += 1;
                let n = buffer.len();
                let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
                let endpoints: Vec<&BufferEntry> = picks.iter().map(|&i| &buffer.entries[i]).collect();
                let draws: Vec<_> = endpoints.iter().map(|e| draw_conditional(&e.x, &mut rng)).collect();

                let energies: Vec<f64> = endpoints.iter().map(|e| e.energy).collect();
                let log_prop: Vec<f64> = endpoints.iter().map(|e| e.log_prop).collect();
                let log_w = clipped_log_weights(&energies, temperature, &log_prop, &cfg.clip)?;
                let weights = match normalize_weights(&log_w.values) {
                    Ok(w) => w,
                    Err(Error::DegenerateBatch) => {
                        consecutive_degenerate += 1;
                        skipped += 1;
                        warn!("epoch {epoch} step {step}: degenerate batch, step skipped");
                        if consecutive_degenerate >= 3 {
                            return Err(Error::TrainingAborted(format!(
                                "three consecutive degenerate batches at step {step} ({} dropped in last batch)",
                                log_w.dropped
                            )));
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                consecutive_degenerate = 0;

                let mut losses = Vec::with_capacity(draws.len());
                let mut grads = Vec::with_capacity(draws.len());
                for (draw, &w) in draws.iter().zip(&weights) {
                    if w == 0.0 {
                        losses.push(0.0);
                        grads.push(Vec::new());
                        continue;
                    }
                    let (l, g) = cfm_sample_loss(net, draw)?;
                    losses.push(l);
                    grads.push(g);
                }
                let grad = snis_gradient(&grads, &weights)?;
                let loss_estimate = ewfm_loss_estimate(&losses, &weights)?;
                let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !optimizer_step(net.params_mut(), &grad, &mut adam, cfg.learning_rate, &cfg.adam)? {
                    rejected += 1;
                }
                metrics.push(MetricsRow {
                    epoch,
                    step,
                    temperature,
                    loss_estimate,
                    ess: weight_ess(&weights),
                    clip_count: log_w.clipped,
                    dropped: log_w.dropped,
                    eval_count: self.system.eval_count(),
                    grad_norm,
                });
            }
            if let Some(hook) = self.hook.as_mut() {
                hook(epoch, net)?;
            }
            if epoch % 50 == 0 {
                if let Some(m) = metrics.last() {
                    info!(
                        "epoch {epoch} T={temperature:.4} loss={:.4} ess={:.1} evals={}",
                        m.loss_estimate, m.ess, m.eval_count
                    );
                }
            }
        }

        Ok(TrainOutcome {
            metrics,
            buffers,
            refreshes,
            proposal_source: if refreshes > 0 {
                ProposalSource::Model
            } else {
                ProposalSource::InitialProposal
            },
            skipped_steps: skipped,
            rejected_steps: rejected,
            eval_count: self.system.eval_count(),
        })
    }
}

pub fn train_ewfm(system: &EnergySystem, net: &mut VectorFieldNet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(system, cfg.clone(), Algorithm::Ewfm).run(net)
}

pub fn train_iewfm(system: &EnergySystem, net: &mut VectorFieldNet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(system, cfg.clone(), Algorithm::Iewfm).run(net)
}

pub fn train_aewfm(
    system: &EnergySystem,
    net: &mut VectorFieldNet,
    cfg: &TrainConfig,
    schedule: &AnnealSchedule,
) -> Result<TrainOutcome> {
    Trainer::new(system, cfg.clone(), Algorithm::Aewfm)
        .with_schedule(schedule.clone())
        .run(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.1, 0.1];
        let cfg = AdamConfig::default();
        // bias-corrected m_hat is nonzero here, so use fresh state for the
        // "unchanged" claim
        let mut fresh = AdamState::new(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut fresh, 1e-3, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        optimizer_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(s.m, vec![0.45, 0.45]);
        assert!((s.v[0] - 0.0999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let cfg = AdamConfig::default();
        optimizer_step(&mut p, &g, &mut s, 0.01, &cfg).unwrap();
        for i in 0..3 {
            let expect = -0.01 * g[i] / (g[i].abs() + cfg.epsilon);
            assert!((p[i] - expect).abs() < 1e-12, "{} vs {}", p[i], expect);
        }
    }

    #[test]
    fn adam_equal_gradients_equal_updates() {
        let mut p = vec![0.5, 0.5];
        let mut s = AdamState::new(2);
        for k in 0..5 {
            let g = [0.1 * k as f64 - 0.2; 2];
            optimizer_step(&mut p, &[g[0], g[1]], &mut s, 0.01, &AdamConfig::default()).unwrap();
            assert_eq!(p[0], p[1]);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let ok = optimizer_step(&mut p, &[f64::NAN], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert!(!ok);
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_levels() {
        let s = AnnealSchedule::new(10.0, 1.0, 1, 2).unwrap();
        let t = s.temperatures();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0], 10.0);
        assert!((t[1] - 10f64.sqrt()).abs() < 1e-12);
        assert!((t[1] - 3.16228).abs() < 1e-5);
        assert_eq!(t[2], 1.0);

        let table = AnnealSchedule::new(10.0, 1.0, 2, 100).unwrap();
        let levels = table.temperatures();
        assert_eq!(levels.len(), 51);
        assert!(levels.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*levels.last().unwrap(), 1.0);
        assert_eq!(table.temperature_at_epoch(1, &levels), 10.0);
        assert_eq!(table.temperature_at_epoch(2, &levels), 10.0);
        assert_eq!(table.temperature_at_epoch(3, &levels), levels[1]);
        assert_eq!(table.temperature_at_epoch(100, &levels), levels[49]);
        assert_eq!(table.temperature_at_epoch(101, &levels), 1.0);
        assert_eq!(table.temperature_at_epoch(5000, &levels), 1.0);

        let flat = AnnealSchedule::new(2.0, 2.0, 2, 10).unwrap();
        assert!(flat.temperatures().iter().all(|&t| t == 2.0));
        assert!(AnnealSchedule::new(0.5, 1.0, 2, 10).is_err());
        assert!(AnnealSchedule::new(10.0, 1.0, 3, 10).is_err());
    }

    #[test]
    fn initial_proposal_density() {
        assert!((gaussian_log_density(&[0.0, 0.0], 1.0) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let a = gaussian_log_density(&[0.3, -1.2, 2.0], 2.5);
        let b = gaussian_log_density(&[-0.3, 1.2, -2.0], 2.5);
        assert_eq!(a, b);
        let s = initial_proposal_sample(3, 2.0, 10, 4).unwrap();
        for (x, lq) in &s {
            assert_eq!(*lq, gaussian_log_density(x, 2.0));
        }
        assert!(initial_proposal_sample(2, 0.0, 1, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            refresh_every: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
