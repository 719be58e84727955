//! Decomposed forward pass of a pre-LayerNorm GPT-2 decoder.
//!
//! Every attention head's additive contribution `H^{l,h}` (after its output
//! projection, shared bias excluded) and every FF neuron's coefficient `m_i`
//! are materialised, so the MHSA and FF sublayer outputs are exactly
//! `Σ_h H^{l,h} + b_O` and `Σ_i m_i v_i + b_FF`.
//!
//! Two interventions act on these contributions before the residual add:
//! a [`SteerPlan`] multiplies selected components by `α` at every position,
//! and an [`ActivationPatch`] overwrites selected (component, position)
//! contributions with supplied vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, gelu, gemm_into, layer_norm_into, softmax_in_place, Matrix, View};
use crate::tokenizer::TokenId;
use crate::weights::{ModelConfig, Weights};

/// An attention head or an FF neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentId {
    Head { layer: usize, head: usize },
    Neuron { layer: usize, neuron: usize },
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn neuron(layer: usize, neuron: usize) -> Self {
        ComponentId::Neuron { layer, neuron }
    }

    pub fn layer(&self) -> usize {
        match *self {
            ComponentId::Head { layer, .. } | ComponentId::Neuron { layer, .. } => layer,
        }
    }

    /// Head or neuron index within its layer.
    pub fn index(&self) -> usize {
        match *self {
            ComponentId::Head { head, .. } => head,
            ComponentId::Neuron { neuron, .. } => neuron,
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::Head { .. })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = match *self {
            ComponentId::Head { layer, head } => layer < config.n_layers && head < config.n_heads,
            ComponentId::Neuron { layer, neuron } => {
                layer < config.n_layers && neuron < config.d_mlp
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Component(format!("{self} does not exist in this model")))
        }
    }

    /// Every attention head in (layer, head) order.
    pub fn all_heads(config: &ModelConfig) -> Vec<ComponentId> {
        (0..config.n_layers)
            .flat_map(|l| (0..config.n_heads).map(move |h| ComponentId::head(l, h)))
            .collect()
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ComponentId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            ComponentId::Neuron { layer, neuron } => write!(f, "L{layer}N{neuron}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    /// Parses `L9H10` or `L19N11`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Component(format!("cannot parse component {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let split = rest.find(['H', 'N']).ok_or_else(bad)?;
        let layer: usize = rest[..split].parse().map_err(|_| bad())?;
        let index: usize = rest[split + 1..].parse().map_err(|_| bad())?;
        Ok(if &rest[split..split + 1] == "H" {
            ComponentId::head(layer, index)
        } else {
            ComponentId::neuron(layer, index)
        })
    }
}

/// Components to amplify, each with its multiplier. Serialized as a map from
/// component names (`"L9H10"`) to multipliers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, f32>", try_from = "BTreeMap<String, f32>")]
pub struct SteerPlan {
    pub entries: BTreeMap<ComponentId, f32>,
}

impl From<SteerPlan> for BTreeMap<String, f32> {
    fn from(p: SteerPlan) -> Self {
        p.entries.into_iter().map(|(c, a)| (c.to_string(), a)).collect()
    }
}

impl TryFrom<BTreeMap<String, f32>> for SteerPlan {
    type Error = Error;

    fn try_from(m: BTreeMap<String, f32>) -> Result<Self> {
        let entries = m
            .into_iter()
            .map(|(k, a)| Ok((k.parse()?, a)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

impl SteerPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uniform(components: impl IntoIterator<Item = ComponentId>, alpha: f32) -> Self {
        Self {
            entries: components.into_iter().map(|c| (c, alpha)).collect(),
        }
    }

    pub fn insert(&mut self, c: ComponentId, alpha: f32) {
        self.entries.insert(c, alpha);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (c, &alpha) in &self.entries {
            c.validate(config)?;
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::Component(format!("{c}: multiplier {alpha} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Replacement contributions keyed by (component, position).
///
/// For a head the vector replaces `H^{l,h}` at that position; for a neuron it
/// replaces `m_i v_i`.
#[derive(Clone, Debug, Default)]
pub struct ActivationPatch {
    pub entries: BTreeMap<(ComponentId, usize), Vec<f32>>,
}

impl ActivationPatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: ComponentId, position: usize, value: Vec<f32>) {
        self.entries.insert((c, position), value);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn first_layer(&self) -> Option<usize> {
        self.entries.keys().map(|(c, _)| c.layer()).min()
    }

    fn validate(&self, config: &ModelConfig, n: usize) -> Result<()> {
        for ((c, p), v) in &self.entries {
            c.validate(config)?;
            if *p >= n {
                return Err(Error::Index(format!("patch position {p} for {n} tokens")));
            }
            if v.len() != config.d_model {
                return Err(Error::Dimension(format!(
                    "patch for {c} has {} values, expected {}",
                    v.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

/// How much of the per-component state a trace keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Capture {
    /// Residual streams, sublayer outputs and logits only.
    Minimal,
    /// Per-head outputs and neuron coefficients at the final position.
    #[default]
    LastPosition,
    /// Per-head outputs and neuron coefficients at every position, plus
    /// attention patterns.
    Full,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub plan: Option<&'a SteerPlan>,
    pub patch: Option<&'a ActivationPatch>,
    pub capture: Capture,
    /// Clean trace of the same tokens. With a patch, layers before the first
    /// patched layer are reused from it instead of recomputed.
    pub resume_from: Option<&'a Trace>,
}

impl<'a> ForwardOptions<'a> {
    pub fn capture(capture: Capture) -> Self {
        Self {
            capture,
            ..Self::default()
        }
    }

    pub fn with_plan(mut self, plan: &'a SteerPlan) -> Self {
        self.plan = Some(plan);
        self
    }

    pub fn with_patch(mut self, patch: &'a ActivationPatch) -> Self {
        self.patch = Some(patch);
        self
    }

    pub fn resuming(mut self, clean: &'a Trace) -> Self {
        self.resume_from = Some(clean);
        self
    }
}

/// Decomposed record of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub tokens: Vec<TokenId>,
    /// `r^0 .. r^L`, each `n × d`. `r^L` is the residual before the final
    /// LayerNorm.
    pub resid_pre: Vec<Matrix>,
    /// `r̃^l` (after attention, before FF), each `n × d`.
    pub resid_mid: Vec<Matrix>,
    /// MHSA sublayer output including the output bias, each `n × d`.
    pub attn_out: Vec<Matrix>,
    /// FF sublayer output including its bias, each `n × d`.
    pub ff_out: Vec<Matrix>,
    /// Positions for which head outputs and coefficients were kept.
    pub captured_positions: Vec<usize>,
    /// Per layer: `(n_heads · |captured|) × d`, row `h·|captured| + k`.
    head_out: Vec<Matrix>,
    /// Per layer: `|captured| × d_mlp` coefficients `m_i` as applied.
    neuron_coeff: Vec<Matrix>,
    /// Per layer: `(n_heads · n) × n` attention probabilities (Full only).
    patterns: Vec<Matrix>,
    /// `LN_f(r^L_n)`.
    pub final_normed: Vec<f32>,
    /// Final-position logits over the vocabulary.
    pub logits: Vec<f32>,
    n_heads: usize,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    fn slot(&self, position: usize) -> Result<usize> {
        self.captured_positions
            .iter()
            .position(|&p| p == position)
            .ok_or_else(|| Error::Index(format!("position {position} was not captured")))
    }

    /// `H^{l,h}` at `position`, shared output bias excluded.
    pub fn head_output(&self, layer: usize, head: usize, position: usize) -> Result<&[f32]> {
        if layer >= self.head_out.len() || head >= self.n_heads {
            return Err(Error::Index(format!("head L{layer}H{head}")));
        }
        let k = self.slot(position)?;
        Ok(self.head_out[layer].row(head * self.captured_positions.len() + k))
    }

    /// Coefficient `m_i^l` at `position` (after any steering multiplier).
    pub fn neuron_coefficient(&self, layer: usize, neuron: usize, position: usize) -> Result<f32> {
        let k = self.slot(position)?;
        let m = self
            .neuron_coeff
            .get(layer)
            .ok_or_else(|| Error::Index(format!("layer {layer}")))?;
        if neuron >= m.cols() {
            return Err(Error::Index(format!("neuron L{layer}N{neuron}")));
        }
        Ok(m.get(k, neuron))
    }

    /// All coefficients of a layer at a captured position.
    pub fn neuron_coefficients(&self, layer: usize, position: usize) -> Result<&[f32]> {
        let k = self.slot(position)?;
        self.neuron_coeff
            .get(layer)
            .map(|m| m.row(k))
            .ok_or_else(|| Error::Index(format!("layer {layer}")))
    }

    /// Attention probabilities of one head, `n × n` (row = query position).
    pub fn attention_pattern(&self, layer: usize, head: usize) -> Result<Matrix> {
        let pat = self
            .patterns
            .get(layer)
            .ok_or_else(|| Error::Index(format!("no attention pattern for layer {layer}")))?;
        if head >= self.n_heads {
            return Err(Error::Index(format!("head L{layer}H{head}")));
        }
        pat.row_block(head * self.len(), self.len())
    }

    pub fn predicted(&self) -> TokenId {
        argmax(&self.logits) as TokenId
    }
}

/// Immutable model shared across concurrent forwards.
pub struct Model {
    pub weights: Weights,
}

impl Model {
    pub fn new(weights: Weights) -> Self {
        Self { weights }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn forward(&self, tokens: &[TokenId], opts: &ForwardOptions<'_>) -> Result<Trace> {
        let cfg = &self.weights.config;
        let n = tokens.len();
        if n == 0 || n > cfg.max_positions {
            return Err(Error::Length {
                len: n,
                max: cfg.max_positions,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Token(format!("id {bad} outside vocabulary")));
        }
        if let Some(plan) = opts.plan {
            plan.validate(cfg)?;
        }
        if let Some(patch) = opts.patch {
            patch.validate(cfg, n)?;
        }
        let d = cfg.d_model;
        let captured: Vec<usize> = match opts.capture {
            Capture::Minimal => Vec::new(),
            Capture::LastPosition => vec![n - 1],
            Capture::Full => (0..n).collect(),
        };

        let resume = match (opts.resume_from, opts.patch.and_then(|p| p.first_layer())) {
            (Some(clean), Some(layer)) if clean.tokens == tokens && opts.plan.is_none() => {
                Some((clean, layer))
            }
            _ => None,
        };
        let start_layer = resume.map_or(0, |(_, l)| l);

        let mut trace = Trace {
            tokens: tokens.to_vec(),
            resid_pre: Vec::with_capacity(cfg.n_layers + 1),
            resid_mid: Vec::with_capacity(cfg.n_layers),
            attn_out: Vec::with_capacity(cfg.n_layers),
            ff_out: Vec::with_capacity(cfg.n_layers),
            captured_positions: captured.clone(),
            head_out: Vec::new(),
            neuron_coeff: Vec::new(),
            patterns: Vec::new(),
            final_normed: Vec::new(),
            logits: Vec::new(),
            n_heads: cfg.n_heads,
        };

        let mut x = if let Some((clean, layer)) = resume {
            // layers below `layer` are untouched by the patch
            for l in 0..layer {
                trace.resid_pre.push(clean.resid_pre[l].clone());
                trace.resid_mid.push(clean.resid_mid[l].clone());
                trace.attn_out.push(clean.attn_out[l].clone());
                trace.ff_out.push(clean.ff_out[l].clone());
                trace.head_out.push(slice_capture(&clean.head_out, &clean.captured_positions, l, &captured, cfg.n_heads, d));
                trace.neuron_coeff.push(slice_capture(&clean.neuron_coeff, &clean.captured_positions, l, &captured, 1, cfg.d_mlp));
                if opts.capture == Capture::Full {
                    trace.patterns.push(clean.patterns.get(l).cloned().unwrap_or_else(|| Matrix::zeros(0, n)));
                }
            }
            clean.resid_pre[layer].clone()
        } else {
            let mut x = Matrix::zeros(n, d);
            for (p, &t) in tokens.iter().enumerate() {
                let row = x.row_mut(p);
                let e = self.weights.wte.row(t as usize);
                let pos = self.weights.wpe.row(p);
                for k in 0..d {
                    row[k] = e[k] + pos[k];
                }
            }
            x
        };

        for l in start_layer..cfg.n_layers {
            trace.resid_pre.push(x.clone());
            let (attn, heads, pattern) = self.attention(l, &x, opts, &captured)?;
            let mut mid = x;
            for (m, a) in mid.as_mut_slice().iter_mut().zip(attn.as_slice()) {
                *m += a;
            }
            trace.attn_out.push(attn);
            trace.head_out.push(heads);
            if let Some(p) = pattern {
                trace.patterns.push(p);
            }
            let (ff, coeff) = self.feed_forward(l, &mid, opts, &captured);
            let mut next = mid.clone();
            for (v, f) in next.as_mut_slice().iter_mut().zip(ff.as_slice()) {
                *v += f;
            }
            trace.resid_mid.push(mid);
            trace.ff_out.push(ff);
            trace.neuron_coeff.push(coeff);
            x = next;
        }

        let mut normed = vec![0.0; d];
        layer_norm_into(
            x.row(n - 1),
            &self.weights.ln_f_gamma,
            &self.weights.ln_f_beta,
            cfg.layer_norm_eps,
            &mut normed,
        );
        let mut logits = vec![0.0; cfg.vocab_size];
        gemm_into(View::rows_of(&normed, 1, d), self.weights.unembed_view(), &mut logits);
        trace.resid_pre.push(x);
        trace.final_normed = normed;
        trace.logits = logits;
        Ok(trace)
    }

    /// Returns (sublayer output, captured head outputs, attention pattern).
    fn attention(
        &self,
        l: usize,
        x: &Matrix,
        opts: &ForwardOptions<'_>,
        captured: &[usize],
    ) -> Result<(Matrix, Matrix, Option<Matrix>)> {
        let cfg = &self.weights.config;
        let w = &self.weights.layers[l];
        let (n, d) = x.shape();
        let nh = cfg.n_heads;
        let dh = cfg.d_head();

        let mut normed = Matrix::zeros(n, d);
        for p in 0..n {
            layer_norm_into(x.row(p), &w.ln1_gamma, &w.ln1_beta, cfg.layer_norm_eps, normed.row_mut(p));
        }
        let mut qkv = Matrix::zeros(n, 3 * d);
        gemm_into(View::of(&normed), View::of(&w.w_qkv), qkv.as_mut_slice());
        for p in 0..n {
            for (v, b) in qkv.row_mut(p).iter_mut().zip(&w.b_qkv) {
                *v += b;
            }
        }

        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut heads = Matrix::zeros(nh * captured.len(), d);
        let mut pattern = (opts.capture == Capture::Full).then(|| Matrix::zeros(nh * n, n));
        let mut z = vec![0.0f32; n * dh];
        let mut h_out = vec![0.0f32; n * d];
        let mut probs = vec![0.0f32; n];
        for h in 0..nh {
            let q_off = h * dh;
            let k_off = d + h * dh;
            let v_off = 2 * d + h * dh;
            z.fill(0.0);
            for i in 0..n {
                let q = &qkv.row(i)[q_off..q_off + dh];
                for j in 0..n {
                    probs[j] = if j <= i {
                        let k = &qkv.row(j)[k_off..k_off + dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                    } else {
                        f32::NEG_INFINITY
                    };
                }
                softmax_in_place(&mut probs);
                if let Some(pat) = pattern.as_mut() {
                    pat.row_mut(h * n + i).copy_from_slice(&probs);
                }
                let zi = &mut z[i * dh..(i + 1) * dh];
                for j in 0..=i {
                    let v = &qkv.row(j)[v_off..v_off + dh];
                    let pj = probs[j];
                    for (o, vv) in zi.iter_mut().zip(v) {
                        *o += pj * vv;
                    }
                }
            }
            let w_o = View::rows_of(&w.w_out.as_slice()[h * dh * d..(h + 1) * dh * d], dh, d);
            gemm_into(View::rows_of(&z, n, dh), w_o, &mut h_out);

            let c = ComponentId::head(l, h);
            if let Some(alpha) = opts.plan.and_then(|p| p.entries.get(&c)) {
                for v in h_out.iter_mut() {
                    *v *= alpha;
                }
            }
            if let Some(patch) = opts.patch {
                for ((pc, p), value) in patch.entries.range((c, 0)..=(c, usize::MAX)) {
                    debug_assert_eq!(*pc, c);
                    h_out[p * d..(p + 1) * d].copy_from_slice(value);
                }
            }
            for (o, v) in out.as_mut_slice().iter_mut().zip(&h_out) {
                *o += v;
            }
            for (k, &p) in captured.iter().enumerate() {
                heads
                    .row_mut(h * captured.len() + k)
                    .copy_from_slice(&h_out[p * d..(p + 1) * d]);
            }
        }
        for p in 0..n {
            for (o, b) in out.row_mut(p).iter_mut().zip(&w.b_out) {
                *o += b;
            }
        }
        Ok((out, heads, pattern))
    }

    /// Returns (sublayer output, captured coefficients).
    fn feed_forward(
        &self,
        l: usize,
        x: &Matrix,
        opts: &ForwardOptions<'_>,
        captured: &[usize],
    ) -> (Matrix, Matrix) {
        let cfg = &self.weights.config;
        let w = &self.weights.layers[l];
        let (n, d) = x.shape();
        let mut normed = Matrix::zeros(n, d);
        for p in 0..n {
            layer_norm_into(x.row(p), &w.ln2_gamma, &w.ln2_beta, cfg.layer_norm_eps, normed.row_mut(p));
        }
        let mut m = Matrix::zeros(n, cfg.d_mlp);
        gemm_into(View::of(&normed), View::of(&w.w_in), m.as_mut_slice());
        for p in 0..n {
            for (v, b) in m.row_mut(p).iter_mut().zip(&w.b_in) {
                *v = gelu(*v + b);
            }
        }
        if let Some(plan) = opts.plan {
            let lo = ComponentId::neuron(l, 0);
            let hi = ComponentId::neuron(l, usize::MAX);
            for (c, alpha) in plan.entries.range(lo..=hi) {
                for p in 0..n {
                    let v = m.get(p, c.index()) * alpha;
                    m.set(p, c.index(), v);
                }
            }
        }
        let mut out = Matrix::zeros(n, d);
        gemm_into(View::of(&m), View::of(&w.w_ff_out), out.as_mut_slice());
        for p in 0..n {
            for (o, b) in out.row_mut(p).iter_mut().zip(&w.b_ff_out) {
                *o += b;
            }
        }
        if let Some(patch) = opts.patch {
            let lo = (ComponentId::neuron(l, 0), 0);
            let hi = (ComponentId::neuron(l, usize::MAX), usize::MAX);
            for ((c, p), value) in patch.entries.range(lo..=hi) {
                let coeff = m.get(*p, c.index());
                let v_i = w.w_ff_out.row(c.index());
                for ((o, new), vi) in out.row_mut(*p).iter_mut().zip(value).zip(v_i) {
                    *o += new - coeff * vi;
                }
            }
        }
        let mut coeff = Matrix::zeros(captured.len(), cfg.d_mlp);
        for (k, &p) in captured.iter().enumerate() {
            coeff.row_mut(k).copy_from_slice(m.row(p));
        }
        (out, coeff)
    }

    /// `m_i^l v_i^l` at `position`, bias excluded.
    pub fn neuron_contribution(
        &self,
        trace: &Trace,
        layer: usize,
        neuron: usize,
        position: usize,
    ) -> Result<Vec<f32>> {
        let m = trace.neuron_coefficient(layer, neuron, position)?;
        let v = self.weights.neuron_value(layer, neuron)?;
        Ok(v.iter().map(|x| m * x).collect())
    }

    /// Greedy continuation of `prompt`; the plan applies at every step and
    /// position.
    pub fn greedy_decode(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        plan: Option<&SteerPlan>,
    ) -> Result<Vec<TokenId>> {
        let max = self.config().max_positions;
        let needed = prompt.len() + max_new.saturating_sub(1);
        if prompt.is_empty() || prompt.len() > max || needed > max {
            return Err(Error::Length { len: needed, max });
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        let opts = ForwardOptions {
            plan,
            capture: Capture::Minimal,
            ..Default::default()
        };
        for _ in 0..max_new {
            let next = self.forward(&tokens, &opts)?.predicted();
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Next-token greedy prediction.
    pub fn predict_next(&self, prompt: &[TokenId], plan: Option<&SteerPlan>) -> Result<TokenId> {
        Ok(self.greedy_decode(prompt, 1, plan)?[0])
    }
}

fn slice_capture(
    src: &[Matrix],
    src_positions: &[usize],
    layer: usize,
    want: &[usize],
    groups: usize,
    width: usize,
) -> Matrix {
    let mut out = Matrix::zeros(groups * want.len(), width);
    let Some(m) = src.get(layer) else { return out };
    for g in 0..groups {
        for (k, p) in want.iter().enumerate() {
            if let Some(sk) = src_positions.iter().position(|q| q == p) {
                out.row_mut(g * want.len() + k)
                    .copy_from_slice(m.row(g * src_positions.len() + sk));
            }
        }
    }
    out
}

/// JSON export of attention patterns and final-position activations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceExport {
    pub tokens: Vec<TokenId>,
    pub token_text: Vec<String>,
    /// `[layer][head][query][key]`.
    pub attention: Vec<Vec<Vec<Vec<f32>>>>,
    /// `[layer][head]` → d-vector at the final position.
    pub last_head_outputs: Vec<Vec<Vec<f32>>>,
    /// `[layer]` → coefficients at the final position.
    pub last_neuron_coefficients: Vec<Vec<f32>>,
    /// Top next tokens as (id, logit).
    pub top_logits: Vec<(TokenId, f32)>,
}

impl TraceExport {
    /// Requires a [`Capture::Full`] trace.
    pub fn from_trace(trace: &Trace, token_text: Vec<String>, top_k: usize) -> Result<Self> {
        let layers = trace.attn_out.len();
        let n = trace.len();
        let last = trace.last_position();
        let mut attention = Vec::with_capacity(layers);
        let mut heads = Vec::with_capacity(layers);
        let mut neurons = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut per_head = Vec::new();
            let mut outs = Vec::new();
            for h in 0..trace.n_heads {
                let pat = trace.attention_pattern(l, h)?;
                per_head.push((0..n).map(|r| pat.row(r).to_vec()).collect());
                outs.push(trace.head_output(l, h, last)?.to_vec());
            }
            attention.push(per_head);
            heads.push(outs);
            neurons.push(trace.neuron_coefficients(l, last)?.to_vec());
        }
        Ok(Self {
            tokens: trace.tokens.clone(),
            token_text,
            attention,
            last_head_outputs: heads,
            last_neuron_coefficients: neurons,
            top_logits: top_k_indices(&trace.logits, top_k)
                .into_iter()
                .map(|i| (i as TokenId, trace.logits[i]))
                .collect(),
        })
    }
}

/// Indices of the `k` largest values, descending; lower index wins ties.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    } else {
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 4,
            d_model: 16,
            d_mlp: 64,
            vocab_size: 50,
            max_positions: 12,
            layer_norm_eps: 1e-5,
            tied_embeddings: true,
        }
    }

    fn model() -> Model {
        Model::new(Weights::random(cfg(), 11, 0.4).unwrap())
    }

    #[test]
    fn component_id_parse_and_display() {
        let c: ComponentId = "L9H10".parse().unwrap();
        assert_eq!(c, ComponentId::head(9, 10));
        assert_eq!(c.to_string(), "L9H10");
        let n: ComponentId = "L19N11".parse().unwrap();
        assert_eq!(n, ComponentId::neuron(19, 11));
        assert!("H3".parse::<ComponentId>().is_err());
        assert!("L1X2".parse::<ComponentId>().is_err());
        assert!(ComponentId::head(3, 0).validate(&cfg()).is_err());
        assert!(ComponentId::neuron(0, 64).validate(&cfg()).is_err());
        assert_eq!(ComponentId::all_heads(&cfg()).len(), 12);
    }

    #[test]
    fn length_and_component_errors() {
        let m = model();
        let opts = ForwardOptions::default();
        assert!(matches!(m.forward(&[], &opts), Err(Error::Length { .. })));
        assert!(matches!(m.forward(&[1; 13], &opts), Err(Error::Length { .. })));
        let plan = SteerPlan::uniform([ComponentId::head(5, 0)], 1.5);
        assert!(matches!(
            m.forward(&[1, 2], &ForwardOptions::default().with_plan(&plan)),
            Err(Error::Component(_))
        ));
        let zero = SteerPlan::uniform([ComponentId::head(0, 0)], 0.0);
        assert!(m.forward(&[1, 2], &ForwardOptions::default().with_plan(&zero)).is_err());
    }

    #[test]
    fn decomposition_identities() {
        let m = model();
        let t = m.forward(&[3, 1, 4, 1, 5, 9], &ForwardOptions::capture(Capture::Full)).unwrap();
        let c = m.config();
        for l in 0..c.n_layers {
            for p in 0..t.len() {
                for k in 0..c.d_model {
                    let heads: f32 = (0..c.n_heads)
                        .map(|h| t.head_output(l, h, p).unwrap()[k])
                        .sum::<f32>()
                        + m.weights.layers[l].b_out[k];
                    assert!((heads - t.attn_out[l].get(p, k)).abs() < 1e-4);
                    let neurons: f32 = (0..c.d_mlp)
                        .map(|i| m.neuron_contribution(&t, l, i, p).unwrap()[k])
                        .sum::<f32>()
                        + m.weights.layers[l].b_ff_out[k];
                    assert!((neurons - t.ff_out[l].get(p, k)).abs() < 1e-4);
                }
            }
            for h in 0..c.n_heads {
                let pat = t.attention_pattern(l, h).unwrap();
                for r in 0..t.len() {
                    let s: f32 = pat.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(pat.row(r)[r + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_value_weights_give_zero_head_output() {
        let mut w = Weights::random(cfg(), 3, 0.4).unwrap();
        let d = 16;
        let dh = 4;
        // zero head 1's value columns in layer 0
        for r in 0..d {
            for c in 0..dh {
                w.layers[0].w_qkv.set(r, 2 * d + dh + c, 0.0);
            }
        }
        for c in 0..dh {
            w.layers[0].b_qkv[2 * d + dh + c] = 0.0;
        }
        let m = Model::new(w);
        let t = m.forward(&[1, 2, 3], &ForwardOptions::capture(Capture::Full)).unwrap();
        for p in 0..3 {
            assert!(t.head_output(0, 1, p).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unit_steering_is_identity() {
        let m = model();
        let toks = [7, 8, 9, 10];
        let base = m.forward(&toks, &ForwardOptions::default()).unwrap();
        let plan = SteerPlan::uniform(
            [ComponentId::head(0, 1), ComponentId::head(2, 3), ComponentId::neuron(1, 5)],
            1.0,
        );
        let steered = m.forward(&toks, &ForwardOptions::default().with_plan(&plan)).unwrap();
        assert_eq!(base.logits, steered.logits);
    }

    #[test]
    fn steering_scales_contribution() {
        let m = model();
        let toks = [7, 8, 9, 10];
        let full = ForwardOptions::capture(Capture::Full);
        let base = m.forward(&toks, &full).unwrap();
        let plan = SteerPlan::uniform([ComponentId::head(1, 2)], 1.7);
        let steered = m.forward(&toks, &full.with_plan(&plan)).unwrap();
        for p in 0..toks.len() {
            let a = base.head_output(1, 2, p).unwrap();
            let b = steered.head_output(1, 2, p).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, x * 1.7);
            }
        }
        // layer 0 untouched
        assert_eq!(base.attn_out[0], steered.attn_out[0]);
        assert_ne!(base.logits, steered.logits);

        let nplan = SteerPlan::uniform([ComponentId::neuron(0, 3)], 2.0);
        let ns = m.forward(&toks, &full.with_plan(&nplan)).unwrap();
        for p in 0..toks.len() {
            let a = base.neuron_coefficient(0, 3, p).unwrap();
            assert_eq!(ns.neuron_coefficient(0, 3, p).unwrap(), a * 2.0);
        }
    }

    #[test]
    fn self_patch_is_noop() {
        let m = model();
        let toks = [5, 6, 7, 8, 9];
        let clean = m.forward(&toks, &ForwardOptions::capture(Capture::Full)).unwrap();
        let mut patch = ActivationPatch::new();
        patch.insert(ComponentId::head(1, 3), 2, clean.head_output(1, 3, 2).unwrap().to_vec());
        patch.insert(
            ComponentId::neuron(2, 7),
            4,
            m.neuron_contribution(&clean, 2, 7, 4).unwrap(),
        );
        let opts = ForwardOptions::capture(Capture::Minimal).with_patch(&patch);
        let fresh = m.forward(&toks, &opts).unwrap();
        let resumed = m.forward(&toks, &opts.resuming(&clean)).unwrap();
        // head patch is bit-exact; the neuron patch re-adds m·v after removing it
        for (a, b) in clean.logits.iter().zip(&fresh.logits) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(fresh.logits, resumed.logits);
    }

    #[test]
    fn head_patch_is_bit_exact() {
        let m = model();
        let toks = [5, 6, 7, 8, 9];
        let clean = m.forward(&toks, &ForwardOptions::capture(Capture::Full)).unwrap();
        let mut patch = ActivationPatch::new();
        for h in 0..4 {
            for p in 0..toks.len() {
                patch.insert(ComponentId::head(1, h), p, clean.head_output(1, h, p).unwrap().to_vec());
            }
        }
        let t = m
            .forward(&toks, &ForwardOptions::capture(Capture::Minimal).with_patch(&patch).resuming(&clean))
            .unwrap();
        assert_eq!(t.logits, clean.logits);
    }

    #[test]
    fn patch_changes_only_later_positions() {
        let m = model();
        let toks = [5, 6, 7, 8, 9];
        let clean = m.forward(&toks, &ForwardOptions::capture(Capture::Full)).unwrap();
        let mut patch = ActivationPatch::new();
        patch.insert(ComponentId::head(0, 0), 3, vec![0.5; 16]);
        let t = m.forward(&toks, &ForwardOptions::capture(Capture::Full).with_patch(&patch)).unwrap();
        for l in 0..3 {
            for p in 0..3 {
                assert_eq!(t.resid_pre[l + 1].row(p), clean.resid_pre[l + 1].row(p));
            }
        }
        assert_ne!(t.resid_pre[1].row(3), clean.resid_pre[1].row(3));
    }

    #[test]
    fn causality() {
        let m = model();
        let a = m.forward(&[1, 2, 3, 4], &ForwardOptions::default()).unwrap();
        let b = m.forward(&[1, 2, 3, 4, 40, 41], &ForwardOptions::default()).unwrap();
        for l in 0..=3 {
            for p in 0..4 {
                assert_eq!(a.resid_pre[l].row(p), b.resid_pre[l].row(p));
            }
        }
    }

    #[test]
    fn greedy_decode_contract() {
        let m = model();
        assert!(m.greedy_decode(&[1, 2], 0, None).unwrap().is_empty());
        let a = m.greedy_decode(&[1, 2], 5, None).unwrap();
        let b = m.greedy_decode(&[1, 2], 5, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let t = m.forward(&[1, 2], &ForwardOptions::default()).unwrap();
        assert_eq!(a[0], t.predicted());
        assert!(matches!(m.greedy_decode(&[1; 10], 4, None), Err(Error::Length { .. })));
        assert!(m.greedy_decode(&[1; 10], 3, None).is_ok());
    }

    #[test]
    fn trace_export_shapes() {
        let m = model();
        let t = m.forward(&[1, 2, 3], &ForwardOptions::capture(Capture::Full)).unwrap();
        let e = TraceExport::from_trace(&t, vec!["a".into(), "b".into(), "c".into()], 5).unwrap();
        assert_eq!(e.attention.len(), 3);
        assert_eq!(e.attention[0].len(), 4);
        assert_eq!(e.attention[0][0].len(), 3);
        assert_eq!(e.last_head_outputs[2][3].len(), 16);
        assert_eq!(e.top_logits.len(), 5);
        assert!(e.top_logits.windows(2).all(|w| w[0].1 >= w[1].1));
        let json = serde_json::to_string(&e).unwrap();
        let back: TraceExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tokens, e.tokens);
        let last = m.forward(&[1, 2, 3], &ForwardOptions::default()).unwrap();
        assert!(TraceExport::from_trace(&last, vec![], 5).is_err());
    }

    #[test]
    fn top_k_order() {
        assert_eq!(top_k_indices(&[1.0, 5.0, 3.0, 5.0], 3), vec![1, 3, 2]);
        assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
        assert!(top_k_indices(&[1.0], 0).is_empty());
    }

    #[test]
    fn plan_json_uses_component_names() {
        let mut p = SteerPlan::uniform([ComponentId::head(9, 10)], 1.5);
        p.insert(ComponentId::neuron(2, 7), 2.0);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"L2N7":2.0,"L9H10":1.5}"#);
        assert_eq!(serde_json::from_str::<SteerPlan>(&text).unwrap(), p);
        assert!(serde_json::from_str::<SteerPlan>(r#"{"bad":1.0}"#).is_err());
    }
}
