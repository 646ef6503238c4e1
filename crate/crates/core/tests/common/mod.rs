#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cool_core::autograd::{Graph, Var};
use cool_core::data::Label;
use cool_core::encoder::{FrozenEncoder, Tokenizer, TransformerConfig};

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Label::True } else { Label::Fake })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error between tape gradients and central differences
/// (step `h`) over every input of a scalar-valued `f`.
pub fn gradient_check(inputs: &[Array2<f64>], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Array2<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, vars[i]);
        let mut numeric = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xs = inputs.to_vec();
            xs[i][idx] += h;
            let up = eval(&xs);
            xs[i][idx] -= 2.0 * h;
            let down = eval(&xs);
            numeric[idx] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Scalar projection `Σ out ⊙ r` used to check vector-valued outputs.
pub fn project(g: &mut Graph, out: Var, r: &Array2<f64>) -> Var {
    let r = g.leaf(r.clone());
    let m = g.mul(out, r);
    g.sum(m)
}

/// Per-coordinate max over rows of `p ⊙ nb`, by explicit loops.
pub fn naive_modulation(p: &Array1<f64>, nb: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(p.len());
    for j in 0..p.len() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..nb.nrows() {
            best = best.max(p[j] * nb[[i, j]]);
        }
        out[j] = if nb.nrows() == 0 { 0.0 } else { best };
    }
    out
}

/// `[e_kg; e; e_kc] · w + b`, by explicit loops.
pub fn naive_fusion(x: &[&Array1<f64>; 3], w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = b.len();
    let mut out = b.clone();
    for (s, part) in x.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                out[j] += part[i] * w[[s * d + i, j]];
            }
        }
    }
    out
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Contrastive loss by explicit loops. With `same_set`, self-pairs are skipped
/// in both numerator and denominator.
pub fn naive_contrastive(
    anchors: &[(Array1<f64>, Label)],
    cands: &[(Array1<f64>, Label)],
    tau: f64,
    same_set: bool,
) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, (a, la)) in anchors.iter().enumerate() {
        let mut denom = 0.0;
        for (k, (c, _)) in cands.iter().enumerate() {
            if same_set && i == k {
                continue;
            }
            denom += (cosine(a, c) / tau).exp();
        }
        for (j, (c, lc)) in cands.iter().enumerate() {
            if (same_set && i == j) || la != lc {
                continue;
            }
            total += -((cosine(a, c) / tau).exp() / denom).ln();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// A small toy encoder over `words`.
pub fn toy_encoder(words: &str, d: usize, seed: u64) -> Arc<FrozenEncoder> {
    let mut all: Vec<&str> = "the veracity of following news is . true fake".split(' ').collect();
    all.extend(words.split_whitespace());
    let tok = Arc::new(Tokenizer::from_tokens(all));
    let mut cfg = TransformerConfig::toy(tok.len());
    cfg.d = d;
    cfg.ffn = 2 * d;
    Arc::new(FrozenEncoder::init(tok, cfg, seed).unwrap())
}
