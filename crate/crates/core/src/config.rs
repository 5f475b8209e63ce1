//! Run configuration files (TOML) and the shipped presets.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyFn, EnergySystem, GmmSpec, HarmonicWell, ParticlePotential, ParticleSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::field::{FieldArch, VectorFieldNet};
use crate::importance::ClipPolicy;
use crate::reference::MhConfig;
use crate::trainer::{AnnealSchedule, TrainConfig};

pub const CONFIG_SCHEMA: u32 = 1;

/// Placement of mixture means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeanLayout {
    /// Uniform lattice over `[-half_width, half_width]^d`.
    Grid { shape: Vec<usize>, half_width: f64 },
    /// Seeded uniform draws in `[-half_width, half_width]^d`.
    UniformRandom {
        n: usize,
        dim: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Equally spaced points on a circle in the plane.
    Ring { n: usize, radius: f64 },
    Explicit { means: Vec<Vec<f64>> },
}

fn default_half_width() -> f64 {
    40.0
}

fn unit() -> f64 {
    1.0
}

impl MeanLayout {
    pub fn means(&self) -> Result<Vec<Vec<f64>>> {
        let means = match self {
            MeanLayout::Grid { shape, half_width } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::Config("grid shape entries must be >= 1".into()));
                }
                GmmSpec::grid_means(shape, *half_width)
            }
            MeanLayout::UniformRandom { n, dim, half_width, seed } => {
                if *n == 0 || *dim == 0 {
                    return Err(Error::Config("uniform-random layout needs n, dim >= 1".into()));
                }
                GmmSpec::uniform_random_means(*n, *dim, *half_width, *seed)
            }
            MeanLayout::Ring { n, radius } => {
                if *n == 0 {
                    return Err(Error::Config("ring layout needs n >= 1".into()));
                }
                GmmSpec::ring_means(*n, *radius)
            }
            MeanLayout::Explicit { means } => means.clone(),
        };
        Ok(means)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Gmm {
        means: MeanLayout,
        /// Isotropic component variance, used when `covariances` is absent.
        #[serde(default = "unit")]
        variance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariances: Option<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default = "unit")]
        temperature: f64,
    },
    Particles {
        n_particles: usize,
        space_dim: usize,
        potential: ParticlePotential,
        #[serde(default = "unit")]
        temperature: f64,
    },
    Harmonic {
        dim: usize,
        #[serde(default = "unit")]
        variance: f64,
        #[serde(default = "unit")]
        temperature: f64,
    },
}

impl SystemSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::Gmm { .. } => "gmm",
            SystemSpec::Particles { potential, .. } => match potential {
                ParticlePotential::DoubleWell { .. } => "double-well",
                ParticlePotential::LennardJones { .. } => "lennard-jones",
            },
            SystemSpec::Harmonic { .. } => "harmonic",
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            SystemSpec::Gmm { temperature, .. }
            | SystemSpec::Particles { temperature, .. }
            | SystemSpec::Harmonic { temperature, .. } => *temperature,
        }
    }

    pub fn energy(&self) -> Result<Arc<dyn EnergyFn>> {
        Ok(match self {
            SystemSpec::Gmm {
                means,
                variance,
                covariances,
                weights,
                ..
            } => {
                let means = means.means()?;
                let spec = match covariances {
                    Some(c) => GmmSpec::new(means, c.clone(), weights.clone())?,
                    None if weights.is_some() => {
                        let d = means.first().map_or(0, |m| m.len());
                        let cov = (0..d)
                            .map(|i| (0..d).map(|j| if i == j { *variance } else { 0.0 }).collect())
                            .collect::<Vec<Vec<f64>>>();
                        let covs = vec![cov; means.len()];
                        GmmSpec::new(means, covs, weights.clone())?
                    }
                    None => GmmSpec::isotropic(means, *variance)?,
                };
                Arc::new(spec)
            }
            SystemSpec::Particles {
                n_particles,
                space_dim,
                potential,
                ..
            } => Arc::new(ParticleSpec::new(*n_particles, *space_dim, potential.clone())?),
            SystemSpec::Harmonic { dim, variance, .. } => {
                if *dim == 0 || !(*variance > 0.0) {
                    return Err(Error::Config("harmonic well needs dim >= 1 and variance > 0".into()));
                }
                Arc::new(HarmonicWell {
                    dim: *dim,
                    variance: *variance,
                })
            }
        })
    }

    pub fn build(&self) -> Result<EnergySystem> {
        EnergySystem::new(self.name(), self.energy()?, self.temperature())
    }

    /// System used for evaluation: the LJ distance floor is removed.
    pub fn build_for_eval(&self) -> Result<EnergySystem> {
        match self {
            SystemSpec::Particles {
                n_particles,
                space_dim,
                potential,
                temperature,
            } => {
                let spec = ParticleSpec::new(*n_particles, *space_dim, potential.clone())?.with_r_min(None);
                EnergySystem::new(self.name(), Arc::new(spec), *temperature)
            }
            _ => self.build(),
        }
    }

    pub fn space_dim(&self) -> Option<usize> {
        match self {
            SystemSpec::Particles { space_dim, .. } => Some(*space_dim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default = "default_max_freq")]
    pub time_embed_max_freq: f64,
    /// Project particle inputs to zero centroid (particle systems only).
    #[serde(default)]
    pub center: bool,
}

fn default_max_freq() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed: network initialization and the training streams.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Epochs between intermediate checkpoints; `0` writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub system: SystemSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealSchedule>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<MhConfig>,
}

fn default_output_dir() -> String {
    "runs".into()
}

impl RunConfig {
    /// Parses and validates. Errors carry the offending line and key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(describe_toml_error(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::Config("train.seed conflicts with the top-level seed".into()));
        }
        self.train.validate()?;
        if let Some(a) = &self.anneal {
            a.validate()?;
            if (a.t_final - self.system.temperature()).abs() > 1e-12 * self.system.temperature() {
                return Err(Error::Config("anneal.t_final must equal the system temperature".into()));
            }
        }
        if let Some(o) = &self.oracle {
            o.validate()?;
        }
        if self.eval.n_samples == 0 || self.eval.n_bins == 0 {
            return Err(Error::Config("eval.n_samples and eval.n_bins must be >= 1".into()));
        }
        self.arch()?.validate()
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.system.energy()?.dim())
    }

    pub fn arch(&self) -> Result<FieldArch> {
        let mut arch = FieldArch::new(self.dim()?, self.model.hidden.clone(), self.model.time_embed_dim);
        arch.time_embed_max_freq = self.model.time_embed_max_freq;
        if self.model.center {
            arch.center_space_dim = self.system.space_dim();
            if arch.center_space_dim.is_none() {
                return Err(Error::Config("model.center requires a particle system".into()));
            }
        }
        Ok(arch)
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }

    pub fn init_net(&self) -> Result<VectorFieldNet> {
        VectorFieldNet::new(self.arch()?, self.seed)
    }
}

fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let snippet = text.lines().nth(line - 1).unwrap_or("").trim();
            format!("line {line}: {msg} (at `{snippet}`)")
        }
        None => msg,
    }
}

fn preset_train(
    learning_rate: f64,
    buffer: usize,
    epochs: usize,
    minibatches: usize,
    clip: f64,
) -> TrainConfig {
    TrainConfig {
        learning_rate,
        buffer_size: buffer,
        batch_size: buffer,
        epochs,
        minibatches_per_epoch: minibatches,
        refresh_every: 1,
        clip: ClipPolicy::ClipLogweight { percentile: clip },
        ..TrainConfig::default()
    }
}

fn default_anneal() -> AnnealSchedule {
    AnnealSchedule {
        t_init: 10.0,
        t_final: 1.0,
        epochs_per_temperature: 2,
        total_anneal_epochs: 100,
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 5] = ["gmm40", "dw4", "lj13", "lj55", "gmm8-ring"];

/// Built-in run configurations.
pub fn preset(name: &str) -> Result<RunConfig> {
    let lj = |n: usize| SystemSpec::Particles {
        n_particles: n,
        space_dim: 3,
        potential: ParticlePotential::LennardJones {
            epsilon: 1.0,
            r_m: 1.0,
            c_osc: 0.5,
            r_min: Some(1e-6),
        },
        temperature: 1.0,
    };
    let base = |system: SystemSpec, train: TrainConfig, output: &str, center: bool| RunConfig {
        schema_version: CONFIG_SCHEMA,
        seed: 0,
        output_dir: format!("runs/{output}"),
        checkpoint_every: 100,
        model: ModelSection {
            hidden: vec![if system.energy().map_or(0, |e| e.dim()) <= 8 { 128 } else { 256 }; 3],
            time_embed_dim: 32,
            time_embed_max_freq: default_max_freq(),
            center,
        },
        system,
        train,
        anneal: Some(default_anneal()),
        eval: EvalConfig::default(),
        oracle: None,
    };
    let cfg = match name {
        "gmm40" => {
            let mut c = base(
                SystemSpec::Gmm {
                    means: MeanLayout::UniformRandom {
                        n: 40,
                        dim: 2,
                        half_width: 40.0,
                        seed: 0,
                    },
                    variance: 1.0,
                    covariances: None,
                    weights: None,
                    temperature: 1.0,
                },
                preset_train(5e-4, 5000, 5000, 10, 99.9),
                "gmm40",
                false,
            );
            c.train.initial_proposal_scale = 40.0;
            c.oracle = Some(MhConfig {
                step_size: 1.5,
                n_chains: 40,
                samples_per_chain: 50,
                burn_in: 2000,
                thinning: 20,
                seed: 0,
                init_scale: 1.0,
            });
            c
        }
        "dw4" => {
            let mut c = base(
                SystemSpec::Particles {
                    n_particles: 4,
                    space_dim: 2,
                    potential: ParticleSpec::dw4().potential,
                    temperature: 1.0,
                },
                preset_train(1e-3, 5000, 2500, 10, 97.5),
                "dw4",
                true,
            );
            c.train.initial_proposal_scale = 2.0;
            c.oracle = Some(MhConfig {
                step_size: 0.5,
                n_chains: 8,
                samples_per_chain: 250,
                burn_in: 5000,
                thinning: 50,
                seed: 0,
                init_scale: 2.0,
            });
            c
        }
        "lj13" => base(lj(13), preset_train(5e-4, 5000, 2500, 20, 99.9), "lj13", true),
        "lj55" => base(lj(55), preset_train(5e-4, 500, 2500, 20, 98.0), "lj55", true),
        "gmm8-ring" => desk_ring_preset(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Desk-scale 8-mode ring mixture used by the acceptance suite.
pub fn desk_ring_preset() -> RunConfig {
    RunConfig {
        schema_version: CONFIG_SCHEMA,
        seed: 0,
        output_dir: "runs/gmm8-ring".into(),
        checkpoint_every: 100,
        system: SystemSpec::Gmm {
            means: MeanLayout::Ring { n: 8, radius: 6.0 },
            variance: 1.0,
            covariances: None,
            weights: None,
            temperature: 1.0,
        },
        model: ModelSection {
            hidden: vec![64, 64],
            time_embed_dim: 16,
            time_embed_max_freq: 100.0,
            center: false,
        },
        train: TrainConfig {
            learning_rate: 1e-3,
            buffer_size: 1000,
            batch_size: 500,
            epochs: 500,
            minibatches_per_epoch: 10,
            refresh_every: 5,
            clip: ClipPolicy::ClipLogweight { percentile: 99.9 },
            ode: crate::cnf::OdeConfig { n_steps: 20 },
            initial_proposal_scale: 7.0,
            ..TrainConfig::default()
        },
        anneal: Some(default_anneal()),
        eval: EvalConfig {
            n_samples: 2000,
            n_reference: 2000,
            ode: crate::cnf::OdeConfig { n_steps: 50 },
            n_bins: 60,
            seed: 1,
        },
        // many short chains keep the per-mode mass balanced
        oracle: Some(MhConfig {
            step_size: 1.2,
            n_chains: 400,
            samples_per_chain: 5,
            burn_in: 500,
            thinning: 20,
            seed: 0,
            init_scale: 1.0,
        }),
    }
}
