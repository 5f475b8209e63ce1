//! Energy-weighted flow matching for training continuous normalizing flows
//! as samplers of Boltzmann densities from energy evaluations alone.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cnf;
pub mod config;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod flow_matching;
pub mod importance;
pub mod reference;
pub mod trainer;

pub use energy::{EnergyFn, EnergySystem, GmmSpec, ParticlePotential, ParticleSpec};
pub use error::{Error, Result};
pub use field::{FieldArch, VectorFieldNet};
pub use trainer::{Algorithm, AnnealSchedule, TrainConfig, Trainer};
