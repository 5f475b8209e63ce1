//! Random-walk Metropolis-Hastings reference sampler.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cnf::sample_rng;
use crate::energy::EnergySystem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhConfig {
    pub step_size: f64,
    pub n_chains: usize,
    /// Kept draws per chain.
    pub samples_per_chain: usize,
    pub burn_in: usize,
    pub thinning: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the random start when the system has no known
    /// modes.
    #[serde(default = "one")]
    pub init_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            n_chains: 8,
            samples_per_chain: 250,
            burn_in: 1000,
            thinning: 10,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("MH step size must be positive".into()));
        }
        if self.n_chains == 0 || self.thinning == 0 {
            return Err(Error::Config("n_chains and thinning must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MhResult {
    /// Chain-major: all kept draws of chain 0, then chain 1, ...
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub warning: Option<String>,
}

/// Metropolis acceptance probability `min(1, exp((E(x) - E(x')) / T))`.
pub fn acceptance_probability(e_current: f64, e_proposed: f64, temperature: f64) -> f64 {
    if e_proposed <= e_current {
        1.0
    } else {
        ((e_current - e_proposed) / temperature).exp()
    }
}

/// Runs independent chains. Chain `c` starts at mode `c mod K` when the
/// energy reports `K` mode centers, otherwise at a scaled Gaussian draw.
pub fn mh_sample(system: &EnergySystem, config: &MhConfig) -> Result<MhResult> {
    config.validate()?;
    let d = system.dim();
    let t = system.temperature();
    let modes = system.energy_fn().mode_centers();
    let mut samples = Vec::with_capacity(config.n_chains * config.samples_per_chain);
    let mut accepted = 0u64;
    let mut proposed = 0u64;

    for c in 0..config.n_chains {
        let mut rng = sample_rng(config.seed, c as u64);
        let mut x: Vec<f64> = match &modes {
            Some(m) if !m.is_empty() => m[c % m.len()].clone(),
            _ => (0..d)
                .map(|_| config.init_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let mut e = system.energy(&x)?;
        let total = config.burn_in + config.samples_per_chain * config.thinning;
        let mut proposal = vec![0.0; d];
        for it in 0..total {
            for k in 0..d {
                proposal[k] = x[k] + config.step_size * rng.sample::<f64, _>(StandardNormal);
            }
            let e_new = system.energy(&proposal).unwrap_or(f64::INFINITY);
            let a = acceptance_probability(e, e_new, t);
            let u: f64 = rng.random();
            let counted = it >= config.burn_in;
            if counted {
                proposed += 1;
            }
            if u < a {
                std::mem::swap(&mut x, &mut proposal);
                e = e_new;
                if counted {
                    accepted += 1;
                }
            }
            if counted && (it - config.burn_in + 1).is_multiple_of(config.thinning) {
                samples.push(x.clone());
            }
        }
    }
    let acceptance_rate = if proposed > 0 {
        accepted as f64 / proposed as f64
    } else {
        0.0
    };
    let warning = if proposed > 0 && !(0.05..=0.95).contains(&acceptance_rate) {
        let hint = if acceptance_rate < 0.05 {
            "decrease step_size"
        } else {
            "increase step_size"
        };
        let msg = format!("acceptance rate {acceptance_rate:.3} outside [0.05, 0.95]; {hint}");
        warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(MhResult {
        samples,
        acceptance_rate,
        warning,
    })
}
