//! Sample-quality metrics and importance-sampling estimators.

use serde::{Deserialize, Serialize};

use crate::cnf::{self, DivergenceMode, OdeConfig};
use crate::energy::{pairwise_distances, EnergySystem};
use crate::error::{Error, Result};
use crate::field::VectorFieldNet;
use crate::importance::{compute_log_weights, normalize_weights, weight_ess};

/// Largest equal-size problem solved by exact assignment.
pub const EXACT_ASSIGNMENT_MAX: usize = 4096;
/// Entropic regularization, as a fraction of the mean ground cost.
pub const SINKHORN_REG_FRACTION: f64 = 0.01;
pub const SINKHORN_TOL: f64 = 1e-6;
pub const SINKHORN_MAX_ITERS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Result {
    pub value: f64,
    /// `false` when the entropic approximation was used.
    pub exact: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a dense square cost matrix (row-major),
/// by shortest augmenting paths with potentials. Returns `assignment[row]`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays, column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::InvalidInput("sample dimensions differ".into()));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    Ok(d)
}

/// 2-Wasserstein distance between empirical distributions with squared
/// Euclidean ground cost. Exact assignment when `n == m <= 4096`, otherwise
/// log-domain Sinkhorn with `eps = 0.01 * mean cost`.
pub fn w2_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<W2Result> {
    check_samples(a, b)?;
    let (n, m) = (a.len(), b.len());
    if n == m && n <= EXACT_ASSIGNMENT_MAX {
        let mut cost = Vec::with_capacity(n * n);
        for x in a {
            for y in b {
                cost.push(sq_dist(x, y));
            }
        }
        let assignment = solve_assignment(&cost, n);
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(W2Result {
            value: (total / n as f64).max(0.0).sqrt(),
            exact: true,
        });
    }
    Ok(W2Result {
        value: sinkhorn_w2(a, b).sqrt(),
        exact: false,
    })
}

fn log_sum_exp_iter(iter: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = iter.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + iter.map(|v| (v - m).exp()).sum::<f64>().ln()
}

// Transport cost <P, C> of the entropic plan with uniform marginals.
fn sinkhorn_w2(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut mean_cost = 0.0;
    for x in a {
        for y in b {
            mean_cost += sq_dist(x, y);
        }
    }
    mean_cost /= (n * m) as f64;
    if mean_cost == 0.0 {
        return 0.0;
    }
    let eps = SINKHORN_REG_FRACTION * mean_cost;
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..SINKHORN_MAX_ITERS {
        for i in 0..n {
            f[i] = -eps * log_sum_exp_iter((0..m).map(|j| (g[j] - sq_dist(&a[i], &b[j])) / eps + log_b));
        }
        for j in 0..m {
            g[j] = -eps * log_sum_exp_iter((0..n).map(|i| (f[i] - sq_dist(&a[i], &b[j])) / eps + log_a));
        }
        // after the g-update column marginals are exact; check rows
        let mut err = 0.0;
        for i in 0..n {
            let row: f64 = (0..m)
                .map(|j| ((f[i] + g[j] - sq_dist(&a[i], &b[j])) / eps + log_a + log_b).exp())
                .sum();
            err += (row - 1.0 / n as f64).abs();
        }
        if err < SINKHORN_TOL {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = sq_dist(&a[i], &b[j]);
            total += ((f[i] + g[j] - c) / eps + log_a + log_b).exp() * c;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllResult {
    pub mean: f64,
    pub std_err: f64,
    pub failures: usize,
}

/// Mean `-log q(x)` over test samples via the reverse-time likelihood.
/// Per-sample ODE failures are skipped; 1% or more is an error.
pub fn model_nll(
    net: &VectorFieldNet,
    test_samples: &[Vec<f64>],
    ode: &OdeConfig,
    div: DivergenceMode,
    seed: u64,
) -> Result<NllResult> {
    if test_samples.is_empty() {
        return Err(Error::InvalidInput("no test samples".into()));
    }
    let mut values = Vec::with_capacity(test_samples.len());
    let mut failures = 0;
    for (i, x) in test_samples.iter().enumerate() {
        match cnf::log_likelihood(net, x, ode, div, seed.wrapping_add(i as u64)) {
            Ok((lp, _)) if lp.is_finite() => values.push(-lp),
            _ => failures += 1,
        }
    }
    if failures as f64 >= 0.01 * test_samples.len() as f64 {
        return Err(Error::InvalidInput(format!(
            "likelihood failed for {failures} of {} samples",
            test_samples.len()
        )));
    }
    let (mean, std_err) = mean_and_se(&values);
    Ok(NllResult {
        mean,
        std_err,
        failures,
    })
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Self-normalized estimate of `E_target[O]` from proposal draws:
/// `sum w_i O_i / sum w_i`, `w_i = exp(-E_i / T - log q_i)`.
pub fn snis_observable(log_q: &[f64], energies: &[f64], temperature: f64, observable: &[f64]) -> Result<f64> {
    if observable.len() != log_q.len() {
        return Err(Error::InvalidInput("observable and density counts differ".into()));
    }
    let lw = compute_log_weights(energies, temperature, log_q)?;
    let m = lw.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::DegenerateBatch);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (lw, o) in lw.values.iter().zip(observable) {
        let w = (lw - m).exp();
        if w != 0.0 {
            num += w * o;
            den += w;
        }
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPartitionEstimate {
    pub log_z: f64,
    /// Delta-method standard error of `log_z`.
    pub std_err: f64,
}

/// `log mean exp(-E_i / T - log q_i)`.
pub fn estimate_log_partition(log_prop: &[f64], energies: &[f64], temperature: f64) -> Result<LogPartitionEstimate> {
    let lw = compute_log_weights(energies, temperature, log_prop)?;
    let m = lw.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::DegenerateBatch);
    }
    let scaled: Vec<f64> = lw.values.iter().map(|v| (v - m).exp()).collect();
    let (mean, se) = mean_and_se(&scaled);
    Ok(LogPartitionEstimate {
        log_z: m + mean.ln(),
        std_err: if se.is_nan() { 0.0 } else { se / mean },
    })
}

/// Exact 1-D Wasserstein-1 distance between empirical distributions,
/// integrating the difference of quantile functions.
pub fn histogram_w1(values_a: &[f64], values_b: &[f64]) -> Result<f64> {
    if values_a.is_empty() || values_b.is_empty() {
        return Err(Error::InvalidInput("empty value set".into()));
    }
    if values_a.iter().chain(values_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    let mut a = values_a.to_vec();
    let mut b = values_b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        // compare (i+1)/n with (j+1)/m exactly
        let lhs = (i + 1) * m;
        let rhs = (j + 1) * n;
        let next = if lhs <= rhs {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total)
}

/// Histogram densities of two value sets on shared bins:
/// `(bin_center, density_a, density_b)`.
pub fn histogram_data(values_a: &[f64], values_b: &[f64], n_bins: usize, range: (f64, f64)) -> Vec<(f64, f64, f64)> {
    let (lo, hi) = range;
    let width = (hi - lo) / n_bins as f64;
    let density = |vals: &[f64]| {
        let mut counts = vec![0usize; n_bins];
        for &v in vals {
            if v >= lo && v <= hi && width > 0.0 {
                let k = (((v - lo) / width) as usize).min(n_bins - 1);
                counts[k] += 1;
            }
        }
        let norm = vals.len() as f64 * width;
        counts.into_iter().map(|c| c as f64 / norm).collect::<Vec<_>>()
    };
    let da = density(values_a);
    let db = density(values_b);
    (0..n_bins)
        .map(|k| (lo + (k as f64 + 0.5) * width, da[k], db[k]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Model samples drawn for W2 and histograms.
    pub n_samples: usize,
    /// Reference samples used for W2 and NLL (`0` = all).
    #[serde(default)]
    pub n_reference: usize,
    #[serde(default)]
    pub ode: OdeConfig,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_bins() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_reference: 2000,
            ode: OdeConfig::default(),
            n_bins: default_bins(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub w2: f64,
    pub w2_exact: bool,
    pub nll: f64,
    pub nll_std_err: f64,
    pub energy_hist_w1: f64,
    pub dist_hist_w1: Option<f64>,
    pub weight_ess_fraction: f64,
    pub eval_count: u64,
    pub n_model: usize,
    pub n_reference: usize,
}

impl EvalReport {
    pub const KEYS: [&'static str; 10] = [
        "w2",
        "w2_exact",
        "nll",
        "nll_std_err",
        "energy_hist_w1",
        "dist_hist_w1",
        "weight_ess_fraction",
        "eval_count",
        "n_model",
        "n_reference",
    ];

    pub fn values(&self) -> [String; 10] {
        [
            self.w2.to_string(),
            self.w2_exact.to_string(),
            self.nll.to_string(),
            self.nll_std_err.to_string(),
            self.energy_hist_w1.to_string(),
            self.dist_hist_w1.map_or_else(|| "none".to_string(), |v| v.to_string()),
            self.weight_ess_fraction.to_string(),
            self.eval_count.to_string(),
            self.n_model.to_string(),
            self.n_reference.to_string(),
        ]
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn csv_header() -> String {
        Self::KEYS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().join(",")
    }
}

/// Histogram exports produced alongside a report.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramExport {
    pub energy: Vec<(f64, f64, f64)>,
    pub distance: Option<Vec<(f64, f64, f64)>>,
}

fn finite_energies(system: &EnergySystem, xs: &[Vec<f64>]) -> Vec<f64> {
    system
        .energy_batch(xs)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.is_finite())
        .collect()
}

fn value_range(a: &[f64], b: &[f64]) -> (f64, f64) {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Full evaluation of a model against reference samples. Energy calls go to
/// a forked counter; `eval_count` is passed through from training.
pub fn evaluate_model(
    system: &EnergySystem,
    net: &VectorFieldNet,
    reference: &[Vec<f64>],
    cfg: &EvalConfig,
    eval_count: u64,
) -> Result<(EvalReport, HistogramExport)> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference set".into()));
    }
    if reference.iter().any(|x| x.len() != net.dim()) || net.dim() != system.dim() {
        return Err(Error::InvalidInput("reference dimension does not match model".into()));
    }
    let probe = system.fork();
    let div = DivergenceMode::auto(net.dim(), 10);
    let n_ref = if cfg.n_reference == 0 {
        reference.len()
    } else {
        cfg.n_reference.min(reference.len())
    };
    let reference = &reference[..n_ref];

    let with_density = cnf::sample_with_logdensity(net, cfg.n_samples, &cfg.ode, DivergenceMode::auto(net.dim(), 1), cfg.seed)?;
    let model: Vec<Vec<f64>> = with_density.iter().map(|(x, _)| x.clone()).collect();
    let log_q: Vec<f64> = with_density.iter().map(|(_, l)| *l).collect();

    let w2 = w2_distance(&model, reference)?;
    let nll = model_nll(net, reference, &cfg.ode, div, cfg.seed ^ 0x5eed)?;

    let model_energies_all: Vec<f64> = probe
        .energy_batch(&model)
        .into_iter()
        .map(|e| e.unwrap_or(f64::INFINITY))
        .collect();
    let ess_fraction = compute_log_weights(&model_energies_all, system.temperature(), &log_q)
        .and_then(|w| normalize_weights(&w.values))
        .map(|w| weight_ess(&w) / model.len() as f64)
        .unwrap_or(0.0);
    let model_energies: Vec<f64> = model_energies_all.into_iter().filter(|e| e.is_finite()).collect();
    let ref_energies = finite_energies(&probe, reference);
    let energy_hist_w1 = histogram_w1(&model_energies, &ref_energies)?;
    let energy_hist = histogram_data(
        &model_energies,
        &ref_energies,
        cfg.n_bins,
        value_range(&model_energies, &ref_energies),
    );

    let (dist_hist_w1, distance) = match system.energy_fn().particle_layout() {
        Some((n, s)) => {
            let dm: Vec<f64> = model.iter().flat_map(|x| pairwise_distances(x, n, s)).collect();
            let dr: Vec<f64> = reference.iter().flat_map(|x| pairwise_distances(x, n, s)).collect();
            let hist = histogram_data(&dm, &dr, cfg.n_bins, value_range(&dm, &dr));
            (Some(histogram_w1(&dm, &dr)?), Some(hist))
        }
        None => (None, None),
    };

    Ok((
        EvalReport {
            w2: w2.value,
            w2_exact: w2.exact,
            nll: nll.mean,
            nll_std_err: nll.std_err,
            energy_hist_w1,
            dist_hist_w1,
            weight_ess_fraction: ess_fraction,
            eval_count,
            n_model: model.len(),
            n_reference: reference.len(),
        },
        HistogramExport {
            energy: energy_hist,
            distance,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn w2_trivial_cases() {
        let a = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let r = w2_distance(&a, &a).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.exact);
        let r = w2_distance(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn w2_three_points_brute_force() {
        let r = w2_distance(&pts(&[0.0, 1.0, 2.0]), &pts(&[0.0, 1.0, 5.0])).unwrap();
        assert!((r.value - 3f64.sqrt()).abs() < 1e-12);
        assert!((r.value - 1.73205).abs() < 1e-5);
    }

    #[test]
    fn w2_dimension_mismatch() {
        assert!(matches!(
            w2_distance(&[vec![0.0]], &[vec![0.0, 1.0]]),
            Err(Error::InvalidInput(_))
        ));
        assert!(w2_distance(&[], &[vec![0.0]]).is_err());
    }

    #[test]
    fn w2_unequal_sizes_is_approximate() {
        let a = pts(&[0.0, 1.0]);
        let b = pts(&[0.0, 0.5, 1.0]);
        let r = w2_distance(&a, &b).unwrap();
        assert!(!r.exact);
        // exact value: mass 1/3 at 0.5 is split between 0 and 1 -> cost 1/12
        assert!((r.value - (1.0f64 / 12.0).sqrt()).abs() < 0.05, "{}", r.value);
    }

    #[test]
    fn hist_w1_cases() {
        assert_eq!(histogram_w1(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(histogram_w1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(histogram_w1(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(histogram_w1(&[], &[1.0]).is_err());
    }

    #[test]
    fn snis_constant_observable() {
        let v = snis_observable(&[0.1, -3.0, 2.0], &[5.0, 1.0, 0.3], 0.7, &[1.0; 3]).unwrap();
        assert_eq!(v, 1.0);
        // constant weights -> plain mean
        let lq = [-0.5, -2.0, -1.0];
        let e: Vec<f64> = lq.iter().map(|l: &f64| -l).collect();
        let m = snis_observable(&lq, &e, 1.0, &[1.0, 2.0, 6.0]).unwrap();
        assert!((m - 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_partition_constant_summand() {
        let log_z = 1.234;
        let lq = [-0.5, -2.0, -1.0, -7.5];
        // normalized target as proposal: -E/T - log q = log Z for every sample
        let e: Vec<f64> = lq.iter().map(|l| -(l + log_z)).collect();
        let est = estimate_log_partition(&lq, &e, 1.0).unwrap();
        assert!((est.log_z - log_z).abs() < 1e-12);
        assert!(est.std_err < 1e-12);
    }

    #[test]
    fn histogram_export_normalized() {
        let h = histogram_data(&[0.1, 0.2, 0.9], &[0.5], 4, (0.0, 1.0));
        let area: f64 = h.iter().map(|(_, a, _)| a * 0.25).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert_eq!(h[0].0, 0.125);
    }
}
