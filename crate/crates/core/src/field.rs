//! Time-conditioned MLP vector field with hand-written reverse-mode gradients.
//!
//! Layout of the flat parameter vector: for each layer, the weight matrix in
//! row-major order (`out x in`) followed by the bias. Hidden layers use SiLU,
//! the output layer is affine.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ewfm-checkpoint";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldArch {
    /// Spatial dimension `d` (input and output width).
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    /// Largest embedding frequency; frequencies are geometric from 1.
    #[serde(default = "default_max_freq")]
    pub time_embed_max_freq: f64,
    /// When set, inputs are shifted to zero centroid over particles of this
    /// spatial dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_space_dim: Option<usize>,
}

fn default_max_freq() -> f64 {
    1000.0
}

impl FieldArch {
    pub fn new(dim: usize, hidden: Vec<usize>, time_embed_dim: usize) -> Self {
        Self {
            dim,
            hidden,
            time_embed_dim,
            time_embed_max_freq: default_max_freq(),
            center_space_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("field dimension must be >= 1".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.time_embed_max_freq >= 1.0) {
            return Err(Error::Config("time embedding max frequency must be >= 1".into()));
        }
        if let Some(s) = self.center_space_dim {
            if s == 0 || !self.dim.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "centering space dimension {s} does not divide {}",
                    self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.dim + self.time_embed_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }
}

/// `[sin(w_1 t) .. sin(w_K t), cos(w_1 t) .. cos(w_K t)]`, `K = dim / 2`,
/// with `w_k` geometric from 1 to `max_freq`.
pub fn time_embedding(t: f64, dim: usize, max_freq: f64) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dimension {dim} is odd")));
    }
    let freqs = embedding_frequencies(dim / 2, max_freq);
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (w * t).sin()));
    out.extend(freqs.iter().map(|w| (w * t).cos()));
    Ok(out)
}

pub fn embedding_frequencies(k: usize, max_freq: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    (0..k)
        .map(|i| max_freq.powf(i as f64 / (k - 1) as f64))
        .collect()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations cached by [`VectorFieldNet::forward`].
#[derive(Debug, Clone)]
pub struct GradTape {
    // input of each layer; inputs[0] is [centered x; embed(t)]
    inputs: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre_acts: Vec<Vec<f64>>,
    n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    arch: FieldArch,
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl VectorFieldNet {
    /// Fan-in scaled uniform hidden layers, zero output layer: the initial
    /// flow is the identity map.
    pub fn new(arch: FieldArch, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = net.widths.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let size = fan_in * fan_out + fan_out;
            if l + 1 < n_layers {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for p in &mut net.params[offset..offset + size] {
                    *p = rng.random_range(-bound..bound);
                }
            }
            offset += size;
        }
        Ok(net)
    }

    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        let params = vec![0.0; arch.n_params()];
        Ok(Self {
            arch,
            widths,
            params,
        })
    }

    /// Every layer, including the output layer, drawn from
    /// `U(-scale / sqrt(fan_in), scale / sqrt(fan_in))`.
    pub fn random(arch: FieldArch, seed: u64, scale: f64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for l in 0..net.widths.len() - 1 {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let size = fan_in * fan_out + fan_out;
            let bound = scale / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + size] {
                *p = rng.random_range(-bound..bound);
            }
            offset += size;
        }
        Ok(net)
    }

    pub fn from_params(arch: FieldArch, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn center(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if let Some(s) = self.arch.center_space_dim {
            project_zero_centroid(&mut out, s);
        }
        out
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        let d = self.arch.dim;
        if x.len() != d {
            return Err(Error::InvalidInput(format!("expected {d} inputs, got {}", x.len())));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite network input".into()));
        }
        let mut input = self.center(x);
        input.extend(time_embedding(
            t,
            self.arch.time_embed_dim,
            self.arch.time_embed_max_freq,
        )?);

        let n_layers = self.widths.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_acts = Vec::with_capacity(n_layers - 1);
        let mut current = input;
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;

            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>();
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow { layer: l });
            }
            let next = if l + 1 < n_layers {
                let act: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
                pre_acts.push(z);
                act
            } else {
                z
            };
            inputs.push(std::mem::replace(&mut current, next));
        }
        Ok((
            current,
            GradTape {
                inputs,
                pre_acts,
                n_params: self.params.len(),
            },
        ))
    }

    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(t, x).map(|(u, _)| u)
    }

    fn check_tape(&self, tape: &GradTape, upstream: &[f64]) -> Result<()> {
        if tape.n_params != self.params.len()
            || tape.inputs.len() != self.widths.len() - 1
            || tape.inputs[0].len() != self.widths[0]
        {
            return Err(Error::Internal("tape does not match network".into()));
        }
        if upstream.len() != self.arch.dim {
            return Err(Error::Internal(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                self.arch.dim
            )));
        }
        Ok(())
    }

    // Returns the gradient w.r.t. the first-layer input; accumulates into
    // `param_grad` when given.
    fn backprop(&self, tape: &GradTape, upstream: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }

        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let w = &self.params[off..off + n_in * n_out];
            let a = &tape.inputs[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, gb) = g[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (gi, ai) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(a) {
                            *gi += d * ai;
                        }
                    }
                    gb[o] += d;
                }
            }
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += wi * d;
                    }
                }
            }
            if l > 0 {
                for (p, z) in prev.iter_mut().zip(&tape.pre_acts[l - 1]) {
                    *p *= silu_grad(*z);
                }
            }
            delta = prev;
        }
        delta
    }

    /// `d(upstream . output) / d theta`.
    pub fn backward_params(&self, tape: &GradTape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape, upstream)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backprop(tape, upstream, Some(&mut grad));
        Ok(grad)
    }

    /// `d(upstream . output) / d x`, i.e. `J^T upstream`.
    pub fn backward_input(&self, tape: &GradTape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape, upstream)?;
        let mut g = self.backprop(tape, upstream, None);
        g.truncate(self.arch.dim);
        if let Some(s) = self.arch.center_space_dim {
            project_zero_centroid(&mut g, s);
        }
        Ok(g)
    }

    /// Exact trace of the input Jacobian via `d` backward passes.
    pub fn jacobian_trace(&self, tape: &GradTape) -> Result<f64> {
        let d = self.arch.dim;
        let mut e = vec![0.0; d];
        let mut trace = 0.0;
        for i in 0..d {
            e[i] = 1.0;
            trace += self.backward_input(tape, &e)?[i];
            e[i] = 0.0;
        }
        Ok(trace)
    }

    /// Text checkpoint: header lines, then one parameter per line.
    pub fn to_checkpoint(&self, seed: u64) -> String {
        let a = &self.arch;
        let mut s = String::new();
        let hidden: Vec<String> = a.hidden.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "schema_version={CHECKPOINT_SCHEMA}");
        let _ = writeln!(s, "dim={}", a.dim);
        let _ = writeln!(s, "hidden={}", hidden.join(","));
        let _ = writeln!(s, "time_embed_dim={}", a.time_embed_dim);
        let _ = writeln!(s, "time_embed_max_freq={}", a.time_embed_max_freq);
        let _ = writeln!(s, "center_space_dim={}", a.center_space_dim.unwrap_or(0));
        let _ = writeln!(s, "seed={seed}");
        let _ = writeln!(s, "n_params={}", self.params.len());
        let _ = writeln!(s, "params");
        for p in &self.params {
            let _ = writeln!(s, "{p}");
        }
        s
    }

    /// Parses a checkpoint; returns the network and its recorded seed.
    pub fn from_checkpoint(text: &str) -> Result<(Self, u64)> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "params" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields.get(k).ok_or_else(|| bad(format!("missing header key `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| bad(format!("bad value for `{k}`")))
        };
        let schema = num("schema_version")?;
        if schema != CHECKPOINT_SCHEMA as u64 {
            return Err(bad(format!(
                "unsupported schema version {schema} (expected {CHECKPOINT_SCHEMA})"
            )));
        }
        let hidden_s = get("hidden")?;
        let hidden = if hidden_s.is_empty() {
            Vec::new()
        } else {
            hidden_s
                .split(',')
                .map(|w| w.trim().parse().map_err(|_| bad("bad hidden widths".into())))
                .collect::<Result<Vec<usize>>>()?
        };
        let center = num("center_space_dim")? as usize;
        let arch = FieldArch {
            dim: num("dim")? as usize,
            hidden,
            time_embed_dim: num("time_embed_dim")? as usize,
            time_embed_max_freq: get("time_embed_max_freq")?
                .parse()
                .map_err(|_| bad("bad time_embed_max_freq".into()))?,
            center_space_dim: (center > 0).then_some(center),
        };
        arch.validate().map_err(|e| bad(e.to_string()))?;
        let n = num("n_params")? as usize;
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(format!("bad parameter `{l}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if params.len() != n || n != arch.n_params() {
            return Err(bad(format!(
                "parameter count mismatch: header {n}, body {}, architecture {}",
                params.len(),
                arch.n_params()
            )));
        }
        Ok((Self::from_params(arch, params)?, num("seed")?))
    }
}

/// Subtracts the per-axis particle mean in place.
pub fn project_zero_centroid(x: &mut [f64], space_dim: usize) {
    let n = x.len() / space_dim;
    for k in 0..space_dim {
        let mean = (0..n).map(|i| x[i * space_dim + k]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * space_dim + k] -= mean;
        }
    }
}
