//! Independent reference computations shared by the integration tests. These
//! work in f64 straight from the weight matrices and do not call into the
//! engine's kernels.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use steerlab::weights::{load_bundle, ModelConfig, Weights};
use steerlab::{Model, Tokenizer, Trace};

pub fn tiny_bundle() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny-gpt2")
}

pub fn tiny() -> (Model, Tokenizer) {
    let dir = tiny_bundle();
    let (_, w) = load_bundle(&dir).unwrap();
    (Model::new(w), Tokenizer::from_bundle(&dir).unwrap())
}

/// Small random model over the full GPT-2 vocabulary, so tokenizer output can
/// be fed to it directly.
pub fn random_vocab_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 32,
        d_mlp: 128,
        vocab_size: 50257,
        max_positions: 64,
        layer_norm_eps: 1e-5,
        tied_embeddings: true,
    };
    Model::new(Weights::random(cfg, seed, 0.3).unwrap())
}

pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    x.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&v, &g), &b)| (v as f64 - mean) * inv * g as f64 + b as f64)
        .collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn max_abs_diff(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).abs()).fold(0.0, f64::max)
}

/// Worst deviations found by [`check_decomposition`].
#[derive(Debug, Default, Clone, Copy)]
pub struct DecompositionError {
    /// `|Σ_h H + b_O − MHSA_out|∞`
    pub attn_sum: f64,
    /// `|Σ_i m_i v_i + b_FF − FF_out|∞`
    pub ff_sum: f64,
    /// Head outputs against a from-scratch attention computation, relative
    /// to `1 + |value|`.
    pub head_recompute: f64,
    /// Coefficients against `gelu(LN2(r̃) W_in + b_in)`, relative.
    pub coeff_recompute: f64,
    /// Residual bookkeeping `r̃ = r + MHSA`, `r' = r̃ + FF`.
    pub residual: f64,
}

impl DecompositionError {
    pub fn merge(&mut self, o: DecompositionError) {
        self.attn_sum = self.attn_sum.max(o.attn_sum);
        self.ff_sum = self.ff_sum.max(o.ff_sum);
        self.head_recompute = self.head_recompute.max(o.head_recompute);
        self.coeff_recompute = self.coeff_recompute.max(o.coeff_recompute);
        self.residual = self.residual.max(o.residual);
    }
}

/// Checks a full-capture trace against the weights at `positions`.
pub fn check_decomposition(w: &Weights, t: &Trace, positions: &[usize]) -> DecompositionError {
    let cfg = &w.config;
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut err = DecompositionError::default();
    for (l, lw) in w.layers.iter().enumerate() {
        let n = t.len();
        let normed: Vec<Vec<f64>> = (0..n)
            .map(|j| layer_norm(t.resid_pre[l].row(j), &lw.ln1_gamma, &lw.ln1_beta, cfg.layer_norm_eps))
            .collect();
        // column c of x W_qkv + b_qkv
        let proj = |x: &[f64], c: usize| -> f64 {
            lw.b_qkv[c] as f64 + (0..d).map(|k| x[k] * lw.w_qkv.get(k, c) as f64).sum::<f64>()
        };
        let qkv: Vec<Vec<f64>> = normed.iter().map(|x| (0..3 * d).map(|c| proj(x, c)).collect()).collect();
        for &p in positions {
            let mut sum: Vec<f64> = lw.b_out.iter().map(|&b| b as f64).collect();
            for h in 0..cfg.n_heads {
                let got = t.head_output(l, h, p).unwrap();
                for (s, &g) in sum.iter_mut().zip(got) {
                    *s += g as f64;
                }
                let q = &qkv[p][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=p)
                    .map(|j| {
                        let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut mix = vec![0.0; dh];
                for (j, ej) in e.iter().enumerate() {
                    let v = &qkv[j][2 * d + h * dh..2 * d + (h + 1) * dh];
                    for (m, &vv) in mix.iter_mut().zip(v) {
                        *m += ej / z * vv;
                    }
                }
                let want: Vec<f64> = (0..d)
                    .map(|c| (0..dh).map(|k| mix[k] * lw.w_out.get(h * dh + k, c) as f64).sum())
                    .collect();
                for (a, &b) in want.iter().zip(got) {
                    err.head_recompute = err.head_recompute.max((a - b as f64).abs() / (1.0 + a.abs()));
                }
            }
            err.attn_sum = err.attn_sum.max(max_abs_diff(&sum, t.attn_out[l].row(p)));

            let mid = t.resid_mid[l].row(p);
            let x2 = layer_norm(mid, &lw.ln2_gamma, &lw.ln2_beta, cfg.layer_norm_eps);
            let coeffs = t.neuron_coefficients(l, p).unwrap();
            let mut ff: Vec<f64> = lw.b_ff_out.iter().map(|&b| b as f64).collect();
            for (i, &m) in coeffs.iter().enumerate() {
                let pre = lw.b_in[i] as f64 + (0..d).map(|k| x2[k] * lw.w_in.get(k, i) as f64).sum::<f64>();
                let want = gelu_tanh(pre);
                err.coeff_recompute = err.coeff_recompute.max((want - m as f64).abs() / (1.0 + want.abs()));
                for (f, &v) in ff.iter_mut().zip(lw.w_ff_out.row(i)) {
                    *f += m as f64 * v as f64;
                }
            }
            err.ff_sum = err.ff_sum.max(max_abs_diff(&ff, t.ff_out[l].row(p)));

            let pre = t.resid_pre[l].row(p);
            let attn = t.attn_out[l].row(p);
            let ffo = t.ff_out[l].row(p);
            let next = t.resid_pre[l + 1].row(p);
            for c in 0..d {
                let r1 = (pre[c] as f64 + attn[c] as f64 - mid[c] as f64).abs();
                let r2 = (mid[c] as f64 + ffo[c] as f64 - next[c] as f64).abs();
                err.residual = err.residual.max(r1).max(r2);
            }
        }
    }
    err
}

/// Brute-force task-correctness: the target must not be beaten by any
/// distractor.
pub fn oracle_correct(logits: &[f32], target: usize, negatives: &[usize]) -> bool {
    negatives.iter().all(|&n| !(logits[n] > logits[target]))
}

/// Brute-force promotion, as a statement about every entry: the target
/// reaches `tau` times each logit in the vector.
pub fn oracle_promotes(logits: &[f32], target: usize, tau: f32) -> bool {
    logits.iter().all(|&v| logits[target] >= tau * v)
}
