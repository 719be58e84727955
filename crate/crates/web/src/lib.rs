//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every method returns a JSON string so the page needs no generated
//! TypeScript types. The logic lives in [`Demo`], which is plain Rust and is
//! tested natively; [`Session`] only adapts errors for JavaScript.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use steerlab::attribution::{project_logits, promotes, task_correct};
use steerlab::engine::top_k_indices;
use steerlab::weights::load_from_bytes;
use steerlab::{Capture, ComponentId, Error, ForwardOptions, Model, Result, SteerPlan, Tokenizer};

pub struct Demo {
    model: Model,
    tok: Tokenizer,
}

impl Demo {
    pub fn new(config_json: &[u8], tensors: &[u8], vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let weights = load_from_bytes(config_json, tensors)?;
        let tok = Tokenizer::from_strings(vocab_json, merges_txt)?;
        Ok(Self { model: Model::new(weights), tok })
    }

    pub fn config(&self) -> Value {
        let c = self.model.config();
        json!({
            "n_layers": c.n_layers,
            "n_heads": c.n_heads,
            "d_model": c.d_model,
            "d_mlp": c.d_mlp,
            "vocab_size": c.vocab_size,
            "max_positions": c.max_positions,
        })
    }

    fn texts(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.tok.token_text(id)).collect()
    }

    fn single(&self, text: &str) -> Result<u32> {
        self.tok
            .single_token(text)
            .ok_or_else(|| Error::Token(format!("{text:?} is not a single token")))
    }

    /// Tokens of `prompt` and one head's attention pattern over them.
    pub fn attention(&self, prompt: &str, layer: usize, head: usize) -> Result<Value> {
        let ids = self.tok.encode(prompt);
        let t = self.model.forward(&ids, &ForwardOptions::capture(Capture::Full))?;
        let pat = t.attention_pattern(layer, head)?;
        let rows: Vec<&[f32]> = (0..pat.rows()).map(|r| pat.row(r)).collect();
        Ok(json!({ "tokens": self.texts(&ids)?, "pattern": rows }))
    }

    /// Logit-lens verdicts of every head at the final position: whether the
    /// target beats the distractors and whether it reaches `tau` of the
    /// head's largest logit.
    pub fn head_verdicts(&self, prompt: &str, target: &str, distractors: &[String], tau: f32) -> Result<Value> {
        let target_id = self.single(target)?;
        let negs = distractors.iter().map(|d| self.single(d)).collect::<Result<Vec<_>>>()?;
        let ids = self.tok.encode(prompt);
        let t = self.model.forward(&ids, &ForwardOptions::default())?;
        let last = t.last_position();
        let mut rows = Vec::new();
        for c in ComponentId::all_heads(self.model.config()) {
            let logits = project_logits(&self.model.weights, t.head_output(c.layer(), c.index(), last)?)?;
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            rows.push(json!({
                "head": c.to_string(),
                "correct": if negs.is_empty() { Value::Null } else { task_correct(&logits, target_id, &negs)?.into() },
                "promotes": promotes(&logits, target_id, tau),
                "target_logit": logits[target_id as usize],
                "max_logit": max,
            }));
        }
        Ok(json!({ "predicted": self.tok.token_text(t.predicted())?, "heads": rows }))
    }

    /// Top next tokens with and without multiplying `components` by `alpha`.
    pub fn steer_preview(&self, prompt: &str, components: &str, alpha: f32, top: usize) -> Result<Value> {
        let comps = components
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<ComponentId>>>()?;
        let plan = SteerPlan::uniform(comps, alpha);
        plan.validate(self.model.config())?;
        let ids = self.tok.encode(prompt);
        let opts = ForwardOptions::capture(Capture::Minimal);
        let base = self.model.forward(&ids, &opts)?;
        let steered = self.model.forward(&ids, &opts.with_plan(&plan))?;
        let list = |logits: &[f32]| -> Result<Vec<Value>> {
            top_k_indices(logits, top)
                .into_iter()
                .map(|i| Ok(json!({ "token": self.tok.token_text(i as u32)?, "logit": logits[i] })))
                .collect()
        };
        Ok(json!({ "baseline": list(&base.logits)?, "steered": list(&steered.logits)? }))
    }
}

#[wasm_bindgen]
pub struct Session(Demo);

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(config_json: &[u8], tensors: &[u8], vocab_json: &str, merges_txt: &str) -> std::result::Result<Session, JsError> {
        Demo::new(config_json, tensors, vocab_json, merges_txt).map(Session).map_err(js)
    }

    pub fn config(&self) -> String {
        self.0.config().to_string()
    }

    pub fn attention(&self, prompt: &str, layer: usize, head: usize) -> std::result::Result<String, JsError> {
        self.0.attention(prompt, layer, head).map(|v| v.to_string()).map_err(js)
    }

    /// `distractors` is a JSON array of token strings.
    pub fn head_verdicts(&self, prompt: &str, target: &str, distractors: &str, tau: f32) -> std::result::Result<String, JsError> {
        let d: Vec<String> = serde_json::from_str(distractors).map_err(|e| JsError::new(&e.to_string()))?;
        self.0.head_verdicts(prompt, target, &d, tau).map(|v| v.to_string()).map_err(js)
    }

    pub fn steer_preview(&self, prompt: &str, components: &str, alpha: f32, top: usize) -> std::result::Result<String, JsError> {
        self.0.steer_preview(prompt, components, alpha, top).map(|v| v.to_string()).map_err(js)
    }
}
