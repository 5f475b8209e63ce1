use ewfm::field::{time_embedding, FieldArch, VectorFieldNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_case(seed: u64) -> (VectorFieldNet, f64, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..5);
    let arch = FieldArch::new(d, vec![16, 16], 4);
    let net = VectorFieldNet::random(arch, seed, 0.5).unwrap();
    let t = rng.random_range(0.0..1.0);
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (net, t, x, v)
}

fn scalar(net: &VectorFieldNet, t: f64, x: &[f64], v: &[f64]) -> f64 {
    net.velocity(t, x).unwrap().iter().zip(v).map(|(a, b)| a * b).sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..100 {
        let (mut net, t, x, v) = random_case(seed);
        let (_, tape) = net.forward(t, &x).unwrap();
        let g = net.backward_params(&tape, &v).unwrap();
        // check a spread of coordinates covering every layer
        let n = net.n_params();
        for k in (0..n).step_by(7).chain([n - 1]) {
            let p0 = net.params()[k];
            net.params_mut()[k] = p0 + H;
            let up = scalar(&net, t, &x, &v);
            net.params_mut()[k] = p0 - H;
            let down = scalar(&net, t, &x, &v);
            net.params_mut()[k] = p0;
            let fd = (up - down) / (2.0 * H);
            assert!(rel_err(g[k], fd) <= 1e-4, "seed {seed} param {k}: {} vs {fd}", g[k]);
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    for seed in 100..200 {
        let (net, t, x, v) = random_case(seed);
        let (_, tape) = net.forward(t, &x).unwrap();
        let g = net.backward_input(&tape, &v).unwrap();
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += H;
            let mut xm = x.clone();
            xm[k] -= H;
            let fd = (scalar(&net, t, &xp, &v) - scalar(&net, t, &xm, &v)) / (2.0 * H);
            assert!(rel_err(g[k], fd) <= 1e-4, "seed {seed} input {k}: {} vs {fd}", g[k]);
        }
    }
}

#[test]
fn jacobian_trace_matches_finite_differences() {
    for seed in 200..230 {
        let (net, t, x, _) = random_case(seed);
        let (_, tape) = net.forward(t, &x).unwrap();
        let tr = net.jacobian_trace(&tape).unwrap();
        let mut fd = 0.0;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += H;
            let mut xm = x.clone();
            xm[k] -= H;
            fd += (net.velocity(t, &xp).unwrap()[k] - net.velocity(t, &xm).unwrap()[k]) / (2.0 * H);
        }
        assert!(rel_err(tr, fd) <= 1e-4, "seed {seed}: {tr} vs {fd}");
    }
}

// second, independently written forward pass: fan-in-major layout with
// weights row-major then bias, SiLU between layers
fn reference_forward(net: &VectorFieldNet, t: f64, x: &[f64]) -> Vec<f64> {
    let arch = net.arch();
    let mut h: Vec<f64> = x.to_vec();
    h.extend(time_embedding(t, arch.time_embed_dim, arch.time_embed_max_freq).unwrap());
    let widths = arch.widths();
    let p = net.params();
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                acc += p[off + o * n_in + i] * h[i];
            }
            out[o] = acc + p[off + n_in * n_out + o];
        }
        off += n_in * n_out + n_out;
        if l + 2 < widths.len() {
            for v in out.iter_mut() {
                *v /= 1.0 + (-*v).exp();
            }
        }
        h = out;
    }
    h
}

#[test]
fn forward_matches_reference_implementation() {
    for seed in 0..20 {
        let (net, t, x, _) = random_case(seed);
        let got = net.velocity(t, &x).unwrap();
        let want = reference_forward(&net, t, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn time_embedding_is_lipschitz_per_frequency() {
    let freqs = ewfm::field::embedding_frequencies(8, 1000.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (t, s): (f64, f64) = (rng.random(), rng.random());
        let a = time_embedding(t, 16, 1000.0).unwrap();
        let b = time_embedding(s, 16, 1000.0).unwrap();
        for k in 0..8 {
            let bound = freqs[k] * (t - s).abs() + 1e-12;
            assert!((a[k] - b[k]).abs() <= bound);
            assert!((a[8 + k] - b[8 + k]).abs() <= bound);
        }
    }
}
