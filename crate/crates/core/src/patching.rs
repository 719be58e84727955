//! Activation patching with counterfactual prompts.
//!
//! A counterfactual prompt adds one open parenthesis to a clean prompt, which
//! moves the expected answer from `r` to the next-longer closing token `r'`.
//! Patching a head's output at one position from the counterfactual run into
//! the clean run measures how much that (head, position) carries the
//! difference; patching everything outside a candidate circuit measures how
//! much of the clean behaviour the circuit alone recovers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationPatch, Capture, ComponentId, ForwardOptions, Model, Trace};
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_f64};
use crate::par;
use crate::ranking::{Criterion, RankedEntry, RankedList};
use crate::tasks::{Example, TaskId};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Example,
    pub corrupt_prompt: String,
    pub corrupt_tokens: Vec<TokenId>,
    /// Expected answer of the clean prompt.
    pub clean_target: TokenId,
    /// Expected answer (first token) of the counterfactual prompt.
    pub corrupt_target: TokenId,
    /// Clean token position that was replaced.
    pub position: usize,
    /// Extra tokens the replacement introduced; non-zero when the doubled
    /// parenthesis is not a single token.
    pub shift: usize,
}

impl PromptPair {
    /// Counterfactual position aligned with clean position `q`.
    pub fn corrupt_position(&self, q: usize) -> usize {
        if q > self.position {
            q + self.shift
        } else {
            q
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.shift > 0
    }
}

/// One counterfactual per prompt token containing `(`, doubling its first
/// open parenthesis.
pub fn gen_counterfactuals(clean: &Example, tok: &Tokenizer) -> Result<Vec<PromptPair>> {
    let TaskId::Paren(sub) = clean.task else {
        return Err(Error::Config(format!("{} has no parentheses to corrupt", clean.task)));
    };
    let longer = ")".repeat(sub.depth() + 1);
    let corrupt_target = *tok
        .encode(&longer)
        .first()
        .ok_or_else(|| Error::Config("empty encoding".into()))?;
    let mut pairs = Vec::new();
    for (p, &id) in clean.tokens.iter().enumerate() {
        let text = tok.token_text(id)?;
        if !text.contains('(') {
            continue;
        }
        let replacement = tok.encode(&text.replacen('(', "((", 1));
        let mut tokens = clean.tokens[..p].to_vec();
        tokens.extend_from_slice(&replacement);
        tokens.extend_from_slice(&clean.tokens[p + 1..]);
        pairs.push(PromptPair {
            clean: clean.clone(),
            corrupt_prompt: tok.decode(&tokens)?,
            corrupt_tokens: tokens,
            clean_target: clean.target_token_id,
            corrupt_target,
            position: p,
            shift: replacement.len() - 1,
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilteredPairs {
    pub pairs: Vec<PromptPair>,
    /// True when no pair met the logit criterion and only the clean-answer
    /// constraint was applied.
    pub relaxed: bool,
    pub candidates: usize,
}

/// Keeps pairs whose clean prompt the model answers correctly and whose
/// counterfactual run scores `r'` above `r`. When that leaves nothing but
/// some clean prompts are answered correctly, the logit criterion is dropped
/// and `relaxed` is set.
pub fn filter_counterfactuals(model: &Model, pairs: &[PromptPair]) -> Result<FilteredPairs> {
    let opts = ForwardOptions::capture(Capture::Minimal);
    let verdicts = par::try_map(pairs, |pair| {
        let clean = model.forward(&pair.clean.tokens, &opts)?;
        let clean_ok = argmax(&clean.logits) as TokenId == pair.clean_target;
        if !clean_ok {
            return Ok((false, false));
        }
        let corrupt = model.forward(&pair.corrupt_tokens, &opts)?;
        let flips = corrupt.logits[pair.clean_target as usize] < corrupt.logits[pair.corrupt_target as usize];
        Ok((true, flips))
    })?;
    let strict: Vec<PromptPair> = pairs
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| v.0 && v.1)
        .map(|(p, _)| p.clone())
        .collect();
    if !strict.is_empty() {
        return Ok(FilteredPairs {
            pairs: strict,
            relaxed: false,
            candidates: pairs.len(),
        });
    }
    let loose: Vec<PromptPair> = pairs
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| v.0)
        .map(|(p, _)| p.clone())
        .collect();
    Ok(FilteredPairs {
        relaxed: !loose.is_empty(),
        pairs: loose,
        candidates: pairs.len(),
    })
}

/// `½[(P_p(r') − P_c(r'))/P_c(r') + (P_c(r) − P_p(r))/P_p(r)]`, or `None`
/// when a denominator is zero.
pub fn effect_score(p_clean: &[f64], p_patched: &[f64], r: TokenId, r_prime: TokenId) -> Option<f64> {
    let (r, rp) = (r as usize, r_prime as usize);
    if p_clean[rp] == 0.0 || p_patched[r] == 0.0 {
        return None;
    }
    Some(0.5 * ((p_patched[rp] - p_clean[rp]) / p_clean[rp] + (p_clean[r] - p_patched[r]) / p_patched[r]))
}

/// Clean and counterfactual traces of one pair.
pub struct PairRuns {
    pub clean: Trace,
    pub corrupt: Trace,
    pub clean_probs: Vec<f64>,
}

impl PairRuns {
    pub fn new(model: &Model, pair: &PromptPair) -> Result<Self> {
        let full = ForwardOptions::capture(Capture::Full);
        let clean = model.forward(&pair.clean.tokens, &full)?;
        let corrupt = model.forward(&pair.corrupt_tokens, &full)?;
        Ok(Self {
            clean_probs: softmax_f64(&clean.logits),
            clean,
            corrupt,
        })
    }

    fn corrupt_head(&self, pair: &PromptPair, head: ComponentId, q: usize) -> Result<&[f32]> {
        self.corrupt.head_output(head.layer(), head.index(), pair.corrupt_position(q))
    }
}

/// Effect of patching `head` at clean position `q` with its counterfactual
/// output.
pub fn patch_effect(model: &Model, runs: &PairRuns, pair: &PromptPair, head: ComponentId, q: usize) -> Result<Option<f64>> {
    let corrupt = runs.corrupt_head(pair, head, q)?;
    if corrupt == runs.clean.head_output(head.layer(), head.index(), q)? {
        // identical activation: the patched run is the clean run
        return Ok(Some(0.0));
    }
    let mut patch = ActivationPatch::new();
    patch.insert(head, q, corrupt.to_vec());
    let opts = ForwardOptions::capture(Capture::Minimal)
        .with_patch(&patch)
        .resuming(&runs.clean);
    let patched = model.forward(&pair.clean.tokens, &opts)?;
    Ok(effect_score(
        &runs.clean_probs,
        &softmax_f64(&patched.logits),
        pair.clean_target,
        pair.corrupt_target,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub head: ComponentId,
    /// Position counted from the end of the prompt; 0 is the final token.
    pub offset: usize,
    pub mean_effect: f64,
    pub defined: usize,
    pub undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub task: TaskId,
    pub pairs: usize,
    pub entries: Vec<EffectEntry>,
}

impl EffectTable {
    pub fn final_position(&self, head: ComponentId) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.head == head && e.offset == 0)
            .map(|e| e.mean_effect)
    }

    /// (head, offset) entries by mean effect, descending; ties by
    /// (layer, head, offset).
    pub fn ranked_entries(&self) -> Vec<(ComponentId, usize)> {
        let mut v: Vec<&EffectEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| {
            b.mean_effect
                .total_cmp(&a.mean_effect)
                .then((a.head.layer(), a.head.index(), a.offset).cmp(&(b.head.layer(), b.head.index(), b.offset)))
        });
        v.into_iter().map(|e| (e.head, e.offset)).collect()
    }

    /// Heads by their best entry, descending.
    pub fn ranked_heads(&self) -> Vec<ComponentId> {
        let mut seen = HashSet::new();
        self.ranked_entries()
            .into_iter()
            .filter_map(|(h, _)| seen.insert(h).then_some(h))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["task", "head", "layer", "index", "offset_from_end", "mean_effect", "defined", "undefined"])?;
        for e in &self.entries {
            out.write_record([
                self.task.to_string(),
                e.head.to_string(),
                e.head.layer().to_string(),
                e.head.index().to_string(),
                e.offset.to_string(),
                format!("{:.9}", e.mean_effect),
                e.defined.to_string(),
                e.undefined.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Effects of every (head, position) averaged over `pairs`.
pub fn effect_table(model: &Model, task: TaskId, pairs: &[PromptPair]) -> Result<EffectTable> {
    let heads = ComponentId::all_heads(model.config());
    let mut sums: BTreeMap<(ComponentId, usize), (f64, usize, usize)> = BTreeMap::new();
    for pair in pairs {
        let runs = PairRuns::new(model, pair)?;
        let n = pair.clean.tokens.len();
        let cells: Vec<(ComponentId, usize)> = heads
            .iter()
            .flat_map(|&h| (0..n).map(move |q| (h, q)))
            .collect();
        let effects = par::try_map(&cells, |&(h, q)| patch_effect(model, &runs, pair, h, q))?;
        for ((h, q), e) in cells.into_iter().zip(effects) {
            let slot = sums.entry((h, n - 1 - q)).or_insert((0.0, 0, 0));
            match e {
                Some(v) => {
                    slot.0 += v;
                    slot.1 += 1;
                }
                None => slot.2 += 1,
            }
        }
    }
    Ok(EffectTable {
        task,
        pairs: pairs.len(),
        entries: sums
            .into_iter()
            .map(|((head, offset), (sum, defined, undefined))| EffectEntry {
                head,
                offset,
                mean_effect: if defined == 0 { 0.0 } else { sum / defined as f64 },
                defined,
                undefined,
            })
            .collect(),
    })
}

/// Heads by final-position effect averaged over the tables.
pub fn rank_heads_by_effect(tables: &[EffectTable]) -> Result<RankedList> {
    if tables.is_empty() {
        return Err(Error::Config("no effect tables".into()));
    }
    let mut heads: Vec<ComponentId> = tables
        .iter()
        .flat_map(|t| t.entries.iter().map(|e| e.head))
        .collect();
    heads.sort();
    heads.dedup();
    let entries = heads
        .into_iter()
        .map(|h| RankedEntry {
            component: h,
            generalizability: 0,
            score: tables.iter().map(|t| t.final_position(h).unwrap_or(0.0)).sum::<f64>() / tables.len() as f64,
        })
        .collect();
    Ok(RankedList::from_entries(Criterion::PatchingEffect, entries))
}

/// Heads kept unpatched, either at every position or at specific offsets
/// from the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Circuit {
    Heads(Vec<ComponentId>),
    Entries(Vec<(ComponentId, usize)>),
}

impl Circuit {
    fn keeps(&self, head: ComponentId, offset: usize, heads: &HashSet<ComponentId>, entries: &HashSet<(ComponentId, usize)>) -> bool {
        match self {
            Circuit::Heads(_) => heads.contains(&head),
            Circuit::Entries(_) => entries.contains(&(head, offset)),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Circuit::Heads(h) => h.len(),
            Circuit::Entries(e) => e.len(),
        }
    }
}

fn normalized_logit(logits: &[f32], target: TokenId) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    logits[target as usize] as f64 / max
}

/// Per-pair quantities that do not depend on the circuit.
pub struct FaithfulnessContext<'m> {
    model: &'m Model,
    pairs: Vec<PromptPair>,
    runs: Vec<PairRuns>,
    nl_model: Vec<f64>,
    /// All heads patched from the counterfactual run, FF layers recomputed.
    nl_patched_corrupt: Vec<f64>,
    /// The counterfactual run itself.
    nl_corrupt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessResult {
    pub size: usize,
    /// Mean over pairs with a usable denominator.
    pub mean: f64,
    /// Same, with the unpatched counterfactual run as the corrupt reference.
    pub mean_literal_corrupt: f64,
    pub excluded: usize,
    pub per_pair: Vec<Option<f64>>,
}

const DENOM_EPS: f64 = 1e-9;

impl<'m> FaithfulnessContext<'m> {
    pub fn new(model: &'m Model, pairs: Vec<PromptPair>) -> Result<Self> {
        let runs = par::try_map(&pairs, |p| PairRuns::new(model, p))?;
        let mut ctx = Self {
            model,
            nl_model: runs
                .iter()
                .zip(&pairs)
                .map(|(r, p)| normalized_logit(&r.clean.logits, p.clean_target))
                .collect(),
            nl_corrupt: runs
                .iter()
                .zip(&pairs)
                .map(|(r, p)| normalized_logit(&r.corrupt.logits, p.clean_target))
                .collect(),
            nl_patched_corrupt: Vec::new(),
            pairs,
            runs,
        };
        ctx.nl_patched_corrupt = ctx.circuit_logits(&Circuit::Heads(Vec::new()))?;
        Ok(ctx)
    }

    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    fn circuit_logits(&self, circuit: &Circuit) -> Result<Vec<f64>> {
        let heads: HashSet<ComponentId> = match circuit {
            Circuit::Heads(h) => h.iter().copied().collect(),
            Circuit::Entries(_) => HashSet::new(),
        };
        let entries: HashSet<(ComponentId, usize)> = match circuit {
            Circuit::Entries(e) => e.iter().copied().collect(),
            Circuit::Heads(_) => HashSet::new(),
        };
        let all = ComponentId::all_heads(self.model.config());
        let idx: Vec<usize> = (0..self.pairs.len()).collect();
        par::try_map(&idx, |&i| {
            let pair = &self.pairs[i];
            let runs = &self.runs[i];
            let n = pair.clean.tokens.len();
            let mut patch = ActivationPatch::new();
            for &h in &all {
                for q in 0..n {
                    if !circuit.keeps(h, n - 1 - q, &heads, &entries) {
                        patch.insert(h, q, runs.corrupt_head(pair, h, q)?.to_vec());
                    }
                }
            }
            let logits = if patch.is_empty() {
                runs.clean.logits.clone()
            } else {
                let opts = ForwardOptions::capture(Capture::Minimal)
                    .with_patch(&patch)
                    .resuming(&runs.clean);
                self.model.forward(&pair.clean.tokens, &opts)?.logits
            };
            Ok(normalized_logit(&logits, pair.clean_target))
        })
    }

    /// `(NL_circuit − NL_corrupt) / (NL_model − NL_corrupt)` averaged over
    /// pairs; pairs with a vanishing denominator are excluded.
    pub fn evaluate(&self, circuit: &Circuit) -> Result<FaithfulnessResult> {
        let nl_circuit = self.circuit_logits(circuit)?;
        let score = |reference: &[f64]| -> Vec<Option<f64>> {
            (0..self.pairs.len())
                .map(|i| {
                    let denom = self.nl_model[i] - reference[i];
                    (denom.abs() > DENOM_EPS).then(|| (nl_circuit[i] - reference[i]) / denom)
                })
                .collect()
        };
        let mean = |v: &[Option<f64>]| {
            let d: Vec<f64> = v.iter().flatten().copied().collect();
            if d.is_empty() {
                0.0
            } else {
                d.iter().sum::<f64>() / d.len() as f64
            }
        };
        let per_pair = score(&self.nl_patched_corrupt);
        let literal = score(&self.nl_corrupt);
        Ok(FaithfulnessResult {
            size: circuit.size(),
            mean: mean(&per_pair),
            mean_literal_corrupt: mean(&literal),
            excluded: per_pair.iter().filter(|x| x.is_none()).count(),
            per_pair,
        })
    }
}

/// Circuit sizes tried when searching for the smallest faithful circuit:
/// 1..=10, then growing by a quarter each step, always ending at `max`.
pub fn size_schedule(max: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=max.min(10)).collect();
    let mut k = 10usize;
    while k < max {
        k = (k + k.div_ceil(4)).min(max);
        v.push(k);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSearch {
    pub granularity: String,
    pub curve: Vec<FaithfulnessResult>,
    /// Smallest evaluated size reaching the threshold.
    pub smallest_faithful: Option<usize>,
}

/// Grows a circuit along `order` and records faithfulness at each scheduled
/// size, stopping once `threshold` is reached. Between the last failing and
/// the first passing size the exact smallest size is found by bisection.
pub fn search_circuit<T: Clone>(
    ctx: &FaithfulnessContext<'_>,
    order: &[T],
    make: impl Fn(Vec<T>) -> Circuit,
    threshold: f64,
    granularity: &str,
) -> Result<CircuitSearch> {
    let mut curve = Vec::new();
    let mut last_fail = 0;
    let mut found = None;
    for k in size_schedule(order.len()) {
        let r = ctx.evaluate(&make(order[..k].to_vec()))?;
        let pass = r.mean >= threshold;
        curve.push(r);
        if pass {
            found = Some(k);
            break;
        }
        last_fail = k;
    }
    if let Some(mut hi) = found {
        let mut lo = last_fail;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let r = ctx.evaluate(&make(order[..mid].to_vec()))?;
            let pass = r.mean >= threshold;
            curve.push(r);
            if pass {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        found = Some(hi);
    }
    curve.sort_by_key(|r| r.size);
    Ok(CircuitSearch {
        granularity: granularity.to_string(),
        curve,
        smallest_faithful: found,
    })
}

pub fn write_faithfulness_csv<W: Write>(w: W, task: TaskId, searches: &[CircuitSearch]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "granularity", "k", "faithfulness", "faithfulness_literal_corrupt", "excluded_pairs"])?;
    for s in searches {
        for r in &s.curve {
            out.write_record([
                task.to_string(),
                s.granularity.clone(),
                r.size.to_string(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.mean_literal_corrupt),
                r.excluded.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// At most `limit` pairs, taking clean prompts in order and at most one pair
/// per clean prompt first, so the sample spans many numbers.
pub fn sample_pairs(pairs: &[PromptPair], limit: usize) -> Vec<PromptPair> {
    let mut by_prompt: HashMap<&str, Vec<&PromptPair>> = HashMap::new();
    let mut order = Vec::new();
    for p in pairs {
        let key = p.clean.prompt.as_str();
        if !by_prompt.contains_key(key) {
            order.push(key);
        }
        by_prompt.entry(key).or_default().push(p);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < limit {
        let mut added = false;
        for key in &order {
            if let Some(p) = by_prompt[key].get(round) {
                out.push((*p).clone());
                added = true;
                if out.len() == limit {
                    break;
                }
            }
        }
        if !added {
            break;
        }
        round += 1;
    }
    out
}
