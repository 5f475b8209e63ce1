//! Continuous normalizing flow: fixed-step RK4 integration of
//! `dx/dt = u_t(x)` with the divergence integral carried as one extra state.
//!
//! With prior `p_0 = N(0, I)` the density of `x_1 = psi_1(x_0)` is
//! `log p_1(x_1) = log p_0(x_0) - int_0^1 div u_t(x_t) dt`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorFieldNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub n_steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { n_steps: 100 }
    }
}

impl OdeConfig {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(Self { n_steps })
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.n_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Prior (t = 0) to data (t = 1).
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DivergenceMode {
    Exact,
    /// Rademacher probes, held fixed along one trajectory.
    Hutchinson { probes: usize },
}

impl DivergenceMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceMode::Hutchinson { probes: 0 } => {
                Err(Error::Config("hutchinson needs at least one probe".into()))
            }
            _ => Ok(()),
        }
    }

    /// Exact trace for `d <= 8`, one Hutchinson probe above.
    pub fn auto(dim: usize, probes: usize) -> Self {
        if dim <= 8 {
            DivergenceMode::Exact
        } else {
            DivergenceMode::Hutchinson { probes }
        }
    }
}

/// A time-dependent velocity field with access to its input-Jacobian trace.
pub trait VelocityField {
    fn dim(&self) -> usize;

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;

    /// Velocity and the exact trace of `du/dx`.
    fn velocity_and_trace(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, f64)>;

    /// Velocity and the mean of `v^T (du/dx) v` over the probes.
    fn velocity_and_probe_trace(&self, t: f64, x: &[f64], probes: &[Vec<f64>]) -> Result<(Vec<f64>, f64)>;
}

impl VelocityField for VectorFieldNet {
    fn dim(&self) -> usize {
        VectorFieldNet::dim(self)
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        VectorFieldNet::velocity(self, t, x)
    }

    fn velocity_and_trace(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (u, tape) = self.forward(t, x)?;
        let tr = self.jacobian_trace(&tape)?;
        Ok((u, tr))
    }

    fn velocity_and_probe_trace(&self, t: f64, x: &[f64], probes: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        let (u, tape) = self.forward(t, x)?;
        let mut acc = 0.0;
        for v in probes {
            let jt_v = self.backward_input(&tape, v)?;
            acc += jt_v.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok((u, acc / probes.len() as f64))
    }
}

/// `u_t(x) = c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub c: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn velocity(&self, _t: f64, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.c.clone())
    }

    fn velocity_and_trace(&self, _t: f64, _x: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok((self.c.clone(), 0.0))
    }

    fn velocity_and_probe_trace(&self, _t: f64, _x: &[f64], _p: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        Ok((self.c.clone(), 0.0))
    }
}

/// `u_t(x) = a x`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: f64,
    pub dim: usize,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, _t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| self.a * v).collect())
    }

    fn velocity_and_trace(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok((self.velocity(t, x)?, self.a * self.dim as f64))
    }

    fn velocity_and_probe_trace(&self, t: f64, x: &[f64], probes: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
        let q = probes
            .iter()
            .map(|v| v.iter().map(|p| p * p).sum::<f64>())
            .sum::<f64>()
            / probes.len() as f64;
        Ok((self.velocity(t, x)?, self.a * q))
    }
}

/// `log N(x | 0, I)`.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

pub fn draw_standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn rademacher_probes<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Per-sample stream so results do not depend on evaluation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Divergence at one point, exact or estimated.
pub fn divergence<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    x: &[f64],
    probes: Option<&[Vec<f64>]>,
) -> Result<f64> {
    match probes {
        None => field.velocity_and_trace(t, x).map(|(_, d)| d),
        Some(p) => field.velocity_and_probe_trace(t, x, p).map(|(_, d)| d),
    }
}

fn check_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

fn at_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NumericalOverflow { .. } | Error::InvalidInput(_) => Error::Divergence { step },
        other => other,
    })
}

/// Integrates from `t = 0` (forward) or `t = 1` (reverse). When `div` is
/// given, also returns `int div u_t dt` taken along the direction of
/// integration (so it is negated for reverse runs).
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    ode: &OdeConfig,
    direction: Direction,
    div: Option<Option<&[Vec<f64>]>>,
) -> Result<(Vec<f64>, f64)> {
    if x_start.len() != field.dim() {
        return Err(Error::InvalidInput(format!(
            "state has {} coordinates, field has {}",
            x_start.len(),
            field.dim()
        )));
    }
    if x_start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial state".into()));
    }
    let n = ode.n_steps;
    if n == 0 {
        return Err(Error::Config("n_steps must be >= 1".into()));
    }
    let nf = n as f64;
    let h = match direction {
        Direction::Forward => 1.0 / nf,
        Direction::Reverse => -1.0 / nf,
    };
    let time = |k: usize| match direction {
        Direction::Forward => k as f64 / nf,
        Direction::Reverse => (n - k) as f64 / nf,
    };
    let eval = |t: f64, x: &[f64]| -> Result<(Vec<f64>, f64)> {
        match div {
            None => field.velocity(t, x).map(|u| (u, 0.0)),
            Some(None) => field.velocity_and_trace(t, x),
            Some(Some(p)) => field.velocity_and_probe_trace(t, x, p),
        }
    };

    let d = x_start.len();
    let mut x = x_start.to_vec();
    let mut acc = 0.0;
    let mut tmp = vec![0.0; d];
    for k in 0..n {
        let t0 = time(k);
        let t1 = time(k + 1);
        let tm = 0.5 * (t0 + t1);

        let (k1, d1) = at_step(eval(t0, &x), k)?;
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        check_state(&tmp, k)?;
        let (k2, d2) = at_step(eval(tm, &tmp), k)?;
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        check_state(&tmp, k)?;
        let (k3, d3) = at_step(eval(tm, &tmp), k)?;
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        check_state(&tmp, k)?;
        let (k4, d4) = at_step(eval(t1, &tmp), k)?;
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        acc += h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4);
        check_state(&x, k)?;
        if !acc.is_finite() {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok((x, acc))
}

/// `psi_1(x_0)` for `n` prior draws.
pub fn sample_forward<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    ode: &OdeConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let x0 = draw_standard_normal(&mut rng, field.dim());
            integrate(field, &x0, ode, Direction::Forward, None).map(|(x, _)| x)
        })
        .collect()
}

/// One forward sample with its model log-density, from a caller-owned stream.
pub fn sample_one_with_logdensity<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ode: &OdeConfig,
    div: DivergenceMode,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let d = field.dim();
    let x0 = draw_standard_normal(rng, d);
    let probes = match div {
        DivergenceMode::Exact => None,
        DivergenceMode::Hutchinson { probes } => Some(rademacher_probes(rng, d, probes)),
    };
    let (x1, div_int) = integrate(field, &x0, ode, Direction::Forward, Some(probes.as_deref()))?;
    Ok((x1, standard_normal_log_density(&x0) - div_int))
}

/// Samples with `log q(x)` from a single ODE solve each.
pub fn sample_with_logdensity<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    ode: &OdeConfig,
    div: DivergenceMode,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64)>> {
    div.validate()?;
    (0..n)
        .map(|i| sample_one_with_logdensity(field, ode, div, &mut sample_rng(seed, i as u64)))
        .collect()
}

/// Reverse-time likelihood: returns `(log p_1(x), log p_0(x_rev))`.
pub fn log_likelihood<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    ode: &OdeConfig,
    div: DivergenceMode,
    seed: u64,
) -> Result<(f64, f64)> {
    div.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = match div {
        DivergenceMode::Exact => None,
        DivergenceMode::Hutchinson { probes } => Some(rademacher_probes(&mut rng, field.dim(), probes)),
    };
    let (x0, div_int) = integrate(field, x, ode, Direction::Reverse, Some(probes.as_deref()))?;
    let log_p0 = standard_normal_log_density(&x0);
    // div_int runs from 1 to 0, i.e. it already carries the minus sign
    Ok((log_p0 + div_int, log_p0))
}
