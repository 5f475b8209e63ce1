//! Boltzmann targets: energy functions with evaluation counting.
//!
//! The target density is `exp(-E(x) / T) / Z`. Nothing in this module ever
//! computes `Z`; see [`crate::evaluation::estimate_log_partition`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pure energy function over flattened configurations.
pub trait EnergyFn: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn energy(&self, x: &[f64]) -> Result<f64>;

    /// `(n_particles, space_dim)` for particle systems.
    fn particle_layout(&self) -> Option<(usize, usize)> {
        None
    }

    /// Known mode locations, used to seed reference chains.
    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        None
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("non-finite coordinate".into()))
    }
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::InvalidInput(format!(
            "expected {dim} coordinates, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// `log(sum(exp(v)))`, max-shifted.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

/// Mixture of full-covariance Gaussians. Cholesky factors are cached at
/// construction.
#[derive(Clone)]
pub struct GmmSpec {
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    // L^{-1} for each covariance
    whiteners: Vec<DMatrix<f64>>,
    // log w_i - 0.5 (d log 2pi + log det Sigma_i)
    log_norms: Vec<f64>,
}

impl fmt::Debug for GmmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GmmSpec")
            .field("components", &self.means.len())
            .field("dim", &self.dim())
            .finish()
    }
}

impl GmmSpec {
    pub fn new(
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("mixture dimension must be >= 1".into()));
        }
        if covariances.len() != k {
            return Err(Error::InvalidInput(format!(
                "{k} means but {} covariances",
                covariances.len()
            )));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        if weights.len() != k {
            return Err(Error::InvalidInput("weight count does not match components".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }

        let mut mean_vecs = Vec::with_capacity(k);
        let mut cov_mats = Vec::with_capacity(k);
        let mut whiteners = Vec::with_capacity(k);
        let mut log_norms = Vec::with_capacity(k);
        for (i, (mu, cov)) in means.into_iter().zip(covariances).enumerate() {
            if mu.len() != d || cov.len() != d || cov.iter().any(|row| row.len() != d) {
                return Err(Error::InvalidInput(format!("component {i} has wrong dimension")));
            }
            check_finite(&mu)?;
            let m = DMatrix::from_fn(d, d, |r, c| cov[r][c]);
            for r in 0..d {
                for c in 0..r {
                    if (m[(r, c)] - m[(c, r)]).abs() > 1e-12 * (1.0 + m[(r, c)].abs()) {
                        return Err(Error::InvalidInput(format!(
                            "covariance {i} is not symmetric"
                        )));
                    }
                }
            }
            let chol = m.clone().cholesky().ok_or_else(|| {
                Error::InvalidInput(format!("covariance {i} is not positive-definite"))
            })?;
            let l = chol.l();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let l_inv = l
                .try_inverse()
                .ok_or_else(|| Error::InvalidInput(format!("covariance {i} is singular")))?;
            log_norms.push(weights[i].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det));
            whiteners.push(l_inv);
            mean_vecs.push(DVector::from_vec(mu));
            cov_mats.push(m);
        }
        Ok(Self {
            means: mean_vecs,
            covariances: cov_mats,
            weights,
            whiteners,
            log_norms,
        })
    }

    /// Equal-weight mixture with `variance * I` covariances.
    pub fn isotropic(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidInput("variance must be positive".into()));
        }
        let d = means.first().map(|m| m.len()).unwrap_or(0);
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|r| (0..d).map(|c| if r == c { variance } else { 0.0 }).collect())
            .collect();
        let covs = vec![cov; means.len()];
        Self::new(means, covs, None)
    }

    /// Means on a uniform lattice spanning `[-half_width, half_width]` along
    /// each axis; `shape[k]` points along axis `k`.
    pub fn grid_means(shape: &[usize], half_width: f64) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = shape
            .iter()
            .map(|&n| {
                if n <= 1 {
                    vec![0.0]
                } else {
                    (0..n)
                        .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let mut out = vec![Vec::new()];
        for axis in &axes {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for prefix in &out {
                for &v in axis {
                    let mut p = prefix.clone();
                    p.push(v);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    /// Seeded means uniform in `[-half_width, half_width]^dim`.
    pub fn uniform_random_means(n: usize, dim: usize, half_width: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect())
            .collect()
    }

    /// `n` means evenly spaced on a circle of `radius` in the plane.
    pub fn ring_means(n: usize, radius: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.means.iter().map(|m| m.iter().copied().collect()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn covariance(&self, i: usize) -> &DMatrix<f64> {
        &self.covariances[i]
    }

    /// Per-component `log w_i + log N(x | mu_i, Sigma_i)`.
    pub fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut diff = DVector::zeros(d);
        (0..self.means.len())
            .map(|i| {
                for k in 0..d {
                    diff[k] = x[k] - self.means[i][k];
                }
                let z = &self.whiteners[i] * &diff;
                self.log_norms[i] - 0.5 * z.norm_squared()
            })
            .collect()
    }
}

/// `-log sum_i w_i N(x | mu_i, Sigma_i)` in log-space.
pub fn gmm_energy(spec: &GmmSpec, x: &[f64]) -> Result<f64> {
    check_dim(x, spec.dim())?;
    check_finite(x)?;
    Ok(-log_sum_exp(&spec.component_log_densities(x)))
}

impl EnergyFn for GmmSpec {
    fn dim(&self) -> usize {
        GmmSpec::dim(self)
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        gmm_energy(self, x)
    }

    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        Some(self.means())
    }
}

// ---------------------------------------------------------------------------
// Particle systems
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "potential", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ParticlePotential {
    /// Pairwise quartic double well.
    DoubleWell { a: f64, b: f64, c: f64, d0: f64, tau: f64 },
    /// Lennard-Jones pair potential plus a harmonic pull toward the centroid.
    LennardJones {
        epsilon: f64,
        r_m: f64,
        c_osc: f64,
        /// Floor on pair distances; `None` disables it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r_min: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSpec {
    pub n_particles: usize,
    pub space_dim: usize,
    pub potential: ParticlePotential,
}

impl ParticleSpec {
    pub fn new(n_particles: usize, space_dim: usize, potential: ParticlePotential) -> Result<Self> {
        if n_particles == 0 || space_dim == 0 {
            return Err(Error::InvalidInput("particle counts must be positive".into()));
        }
        match &potential {
            ParticlePotential::DoubleWell { tau, .. } if !(*tau > 0.0) => {
                return Err(Error::InvalidInput("double-well tau must be positive".into()))
            }
            ParticlePotential::LennardJones { r_m, r_min, .. } => {
                if !(*r_m > 0.0) {
                    return Err(Error::InvalidInput("r_m must be positive".into()));
                }
                if let Some(r) = r_min {
                    if !(*r > 0.0) {
                        return Err(Error::InvalidInput("r_min must be positive".into()));
                    }
                }
            }
            _ => {}
        }
        Ok(Self {
            n_particles,
            space_dim,
            potential,
        })
    }

    /// DW-4: four particles in the plane with the standard benchmark constants.
    pub fn dw4() -> Self {
        Self {
            n_particles: 4,
            space_dim: 2,
            potential: ParticlePotential::DoubleWell {
                a: 0.0,
                b: -4.0,
                c: 0.9,
                d0: 4.0,
                tau: 1.0,
            },
        }
    }

    /// LJ-n in three dimensions with unit constants.
    pub fn lj(n_particles: usize) -> Self {
        Self {
            n_particles,
            space_dim: 3,
            potential: ParticlePotential::LennardJones {
                epsilon: 1.0,
                r_m: 1.0,
                c_osc: 0.5,
                r_min: None,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.n_particles * self.space_dim
    }

    /// Returns a copy with the LJ distance floor replaced.
    pub fn with_r_min(&self, r_min: Option<f64>) -> Self {
        let mut out = self.clone();
        if let ParticlePotential::LennardJones { r_min: r, .. } = &mut out.potential {
            *r = r_min;
        }
        out
    }
}

fn pair_distance(x: &[f64], i: usize, j: usize, s: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..s {
        let diff = x[i * s + k] - x[j * s + k];
        acc += diff * diff;
    }
    acc.sqrt()
}

/// All `i < j` pair distances in row-major pair order.
pub fn pairwise_distances(x: &[f64], n_particles: usize, space_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_particles * (n_particles.saturating_sub(1)) / 2);
    for i in 0..n_particles {
        for j in (i + 1)..n_particles {
            out.push(pair_distance(x, i, j, space_dim));
        }
    }
    out
}

/// `(1 / 2 tau) * sum_{i<j} [a r + b r^2 + c r^4]` with `r = d_ij - d0`.
pub fn dw4_energy(spec: &ParticleSpec, x: &[f64]) -> Result<f64> {
    let ParticlePotential::DoubleWell { a, b, c, d0, tau } = spec.potential else {
        return Err(Error::InvalidInput("not a double-well spec".into()));
    };
    check_dim(x, spec.dim())?;
    check_finite(x)?;
    let mut total = 0.0;
    for i in 0..spec.n_particles {
        for j in (i + 1)..spec.n_particles {
            let r = pair_distance(x, i, j, spec.space_dim) - d0;
            let r2 = r * r;
            total += a * r + b * r2 + c * r2 * r2;
        }
    }
    Ok(total / (2.0 * tau))
}

/// Lennard-Jones cluster energy with centroid harmonic confinement.
pub fn lj_energy(spec: &ParticleSpec, x: &[f64]) -> Result<f64> {
    let ParticlePotential::LennardJones {
        epsilon,
        r_m,
        c_osc,
        r_min,
    } = spec.potential
    else {
        return Err(Error::InvalidInput("not a Lennard-Jones spec".into()));
    };
    check_dim(x, spec.dim())?;
    check_finite(x)?;
    let (n, s) = (spec.n_particles, spec.space_dim);
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut r = pair_distance(x, i, j, s);
            match r_min {
                Some(floor) => r = r.max(floor),
                None if r == 0.0 => return Err(Error::SingularConfiguration { i, j }),
                None => {}
            }
            let q6 = (r_m / r).powi(6);
            pair += epsilon * (q6 * q6 - 2.0 * q6);
        }
    }
    let mut confine = 0.0;
    if c_osc != 0.0 {
        let centroid = centroid(x, n, s);
        for i in 0..n {
            for k in 0..s {
                let diff = x[i * s + k] - centroid[k];
                confine += diff * diff;
            }
        }
    }
    Ok(pair + c_osc * confine)
}

/// Mean particle position.
pub fn centroid(x: &[f64], n_particles: usize, space_dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; space_dim];
    for i in 0..n_particles {
        for k in 0..space_dim {
            c[k] += x[i * space_dim + k];
        }
    }
    for v in &mut c {
        *v /= n_particles as f64;
    }
    c
}

impl EnergyFn for ParticleSpec {
    fn dim(&self) -> usize {
        ParticleSpec::dim(self)
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        match self.potential {
            ParticlePotential::DoubleWell { .. } => dw4_energy(self, x),
            ParticlePotential::LennardJones { .. } => lj_energy(self, x),
        }
    }

    fn particle_layout(&self) -> Option<(usize, usize)> {
        Some((self.n_particles, self.space_dim))
    }
}

/// Isotropic quadratic well `||x||^2 / (2 variance)`: a Gaussian target with
/// known partition function `(2 pi variance T)^{d/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicWell {
    pub dim: usize,
    pub variance: f64,
}

impl EnergyFn for HarmonicWell {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim)?;
        check_finite(x)?;
        Ok(x.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.variance))
    }

    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        Some(vec![vec![0.0; self.dim]])
    }
}

// ---------------------------------------------------------------------------
// EnergySystem
// ---------------------------------------------------------------------------

/// A Boltzmann target: energy function, temperature and an evaluation counter.
#[derive(Debug)]
pub struct EnergySystem {
    name: String,
    temperature: f64,
    energy: Arc<dyn EnergyFn>,
    eval_count: AtomicU64,
}

impl EnergySystem {
    pub fn new(name: impl Into<String>, energy: Arc<dyn EnergyFn>, temperature: f64) -> Result<Self> {
        if energy.dim() == 0 {
            return Err(Error::InvalidInput("system dimension must be >= 1".into()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            temperature,
            energy,
            eval_count: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.energy.dim()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn energy_fn(&self) -> &Arc<dyn EnergyFn> {
        &self.energy
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count.load(Ordering::SeqCst)
    }

    /// Fresh system sharing the energy function, with its own zeroed counter.
    pub fn fork(&self) -> Self {
        Self {
            name: self.name.clone(),
            temperature: self.temperature,
            energy: Arc::clone(&self.energy),
            eval_count: AtomicU64::new(0),
        }
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        self.eval_count.fetch_add(1, Ordering::SeqCst);
        self.energy.energy(x)
    }

    /// Evaluates every configuration; the counter grows by `xs.len()` even if
    /// some entries fail.
    pub fn energy_batch(&self, xs: &[Vec<f64>]) -> Vec<Result<f64>> {
        self.eval_count.fetch_add(xs.len() as u64, Ordering::SeqCst);
        xs.iter().map(|x| self.energy.energy(x)).collect()
    }

    /// `-E(x) / T`.
    pub fn boltzmann_log_density_unnorm(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.energy(x)? / self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_body(potential: ParticlePotential, r: f64) -> (ParticleSpec, Vec<f64>) {
        let spec = ParticleSpec::new(2, 3, potential).unwrap();
        (spec, vec![0.0, 0.0, 0.0, r, 0.0, 0.0])
    }

    #[test]
    fn standard_normal_at_origin() {
        let spec = GmmSpec::isotropic(vec![vec![0.0, 0.0]], 1.0).unwrap();
        let e = gmm_energy(&spec, &[0.0, 0.0]).unwrap();
        assert!((e - (2.0 * PI).ln()).abs() < 1e-14);
        assert!((e - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn symmetric_pair_is_symmetric() {
        let spec = GmmSpec::isotropic(vec![vec![3.0, -1.0], vec![-3.0, 1.0]], 1.0).unwrap();
        for x in [[0.3, 0.7], [1.5, -2.0], [0.0, 0.0]] {
            let neg = [-x[0], -x[1]];
            assert_eq!(gmm_energy(&spec, &x).unwrap(), gmm_energy(&spec, &neg).unwrap());
        }
    }

    #[test]
    fn far_field_is_finite() {
        let spec = GmmSpec::isotropic(GmmSpec::ring_means(8, 6.0), 1.0).unwrap();
        let e = gmm_energy(&spec, &[1e3, -1e3]).unwrap();
        assert!(e.is_finite() && e > 1e5);
    }

    #[test]
    fn rejects_non_finite_and_bad_weights() {
        let spec = GmmSpec::isotropic(vec![vec![0.0]], 1.0).unwrap();
        assert!(matches!(gmm_energy(&spec, &[f64::NAN]), Err(Error::InvalidInput(_))));
        let bad = GmmSpec::new(vec![vec![0.0]], vec![vec![vec![1.0]]], Some(vec![0.9]));
        assert!(bad.is_err());
        let not_pd = GmmSpec::new(vec![vec![0.0]], vec![vec![vec![-1.0]]], None);
        assert!(not_pd.is_err());
    }

    #[test]
    fn grid_layout_covers_box() {
        let means = GmmSpec::grid_means(&[8, 5], 40.0);
        assert_eq!(means.len(), 40);
        assert!(means.contains(&vec![-40.0, -40.0]));
        assert!(means.contains(&vec![40.0, 40.0]));
        let rand_a = GmmSpec::uniform_random_means(40, 2, 40.0, 7);
        let rand_b = GmmSpec::uniform_random_means(40, 2, 40.0, 7);
        assert_eq!(rand_a, rand_b);
        assert!(rand_a.iter().flatten().all(|v| v.abs() <= 40.0));
    }

    #[test]
    fn double_well_at_rest_length() {
        // Equilateral triangle with side d0: every pair term vanishes.
        let spec = ParticleSpec::new(3, 2, ParticleSpec::dw4().potential).unwrap();
        let h = 4.0 * 3f64.sqrt() / 2.0;
        let x = [0.0, 0.0, 4.0, 0.0, 2.0, h];
        assert!(dw4_energy(&spec, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn double_well_single_stretched_pair() {
        let spec = ParticleSpec::new(2, 2, ParticleSpec::dw4().potential).unwrap();
        let e = dw4_energy(&spec, &[0.0, 0.0, 5.0, 0.0]).unwrap();
        assert!((e - (-1.55)).abs() < 1e-12);
    }

    #[test]
    fn double_well_wrong_dimension() {
        let spec = ParticleSpec::dw4();
        assert!(matches!(dw4_energy(&spec, &[0.0; 6]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn lj_minimum_and_half_point() {
        let pot = ParticlePotential::LennardJones {
            epsilon: 2.5,
            r_m: 1.3,
            c_osc: 0.0,
            r_min: None,
        };
        let (spec, x) = two_body(pot.clone(), 1.3);
        assert!((lj_energy(&spec, &x).unwrap() + 2.5).abs() < 1e-12);

        // (r_m / r)^6 = 1/2
        let r = 1.3 * 2f64.powf(1.0 / 6.0);
        let (spec, x) = two_body(pot, r);
        let q6: f64 = 0.5;
        let oracle = 2.5 * (q6 * q6 - 2.0 * q6);
        assert!((lj_energy(&spec, &x).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle + 1.875).abs() < 1e-12);
    }

    #[test]
    fn lj_coincident_particles() {
        let (spec, x) = two_body(ParticleSpec::lj(2).potential, 0.0);
        assert!(matches!(
            lj_energy(&spec, &x),
            Err(Error::SingularConfiguration { i: 0, j: 1 })
        ));
        let floored = spec.with_r_min(Some(1e-6));
        assert!(lj_energy(&floored, &x).unwrap().is_finite());
    }

    #[test]
    fn lj_translation_invariant_with_confinement() {
        let spec = ParticleSpec::lj(4);
        let x = [
            0.0, 0.1, 0.2, 1.1, 0.0, -0.1, 0.3, 1.0, 0.4, -0.5, 0.6, 0.9,
        ];
        let shifted: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v + [3.0, -7.0, 0.5][i % 3])
            .collect();
        let a = lj_energy(&spec, &x).unwrap();
        let b = lj_energy(&spec, &shifted).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn counter_and_log_density() {
        let sys = EnergySystem::new(
            "h",
            Arc::new(HarmonicWell {
                dim: 1,
                variance: 1.0 / 6.0,
            }),
            1.0,
        )
        .unwrap();
        // E(1) = 3
        assert!((sys.boltzmann_log_density_unnorm(&[1.0]).unwrap() + 3.0).abs() < 1e-15);
        let hot = EnergySystem::new("h", Arc::clone(sys.energy_fn()), 3.0).unwrap();
        assert!((hot.boltzmann_log_density_unnorm(&[1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(sys.eval_count(), 1);
        let xs = vec![vec![0.1], vec![0.2], vec![0.3]];
        let out = sys.energy_batch(&xs);
        assert_eq!(out.len(), 3);
        assert_eq!(sys.eval_count(), 4);
        assert_eq!(sys.fork().eval_count(), 0);
    }

    #[test]
    fn invalid_system_parameters() {
        let e: Arc<dyn EnergyFn> = Arc::new(HarmonicWell { dim: 2, variance: 1.0 });
        assert!(EnergySystem::new("x", Arc::clone(&e), 0.0).is_err());
        assert!(EnergySystem::new("x", Arc::clone(&e), -1.0).is_err());
        let zero: Arc<dyn EnergyFn> = Arc::new(HarmonicWell { dim: 0, variance: 1.0 });
        assert!(EnergySystem::new("x", zero, 1.0).is_err());
    }
}
