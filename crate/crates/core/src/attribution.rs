//! Logit-lens scoring of individual heads and FF neurons.
//!
//! A component's final-position contribution `h_c` is read as vocabulary
//! logits `l_c = h_c W_U` (no LayerNorm). Two verdicts are computed from it:
//! task correctness (the ground-truth token is at least as large as every
//! distractor) and promotion (the ground-truth token reaches `τ` times the
//! maximal logit). Accuracy, precision, recall and F1 aggregate these
//! verdicts over datasets.
//!
//! For a neuron `l_c = m_i (v_i W_U)`, so its vocabulary projection is
//! computed once per neuron and rescaled by the coefficient of each prompt.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{ComponentId, ForwardOptions, Model, Trace};
use crate::error::{Error, Result};
use crate::par;
use crate::tasks::{BalancedSet, Example, SubTask, TaskId, TaskSpec};
use crate::tokenizer::{AnswerTokenSet, TokenId, Tokenizer};
use crate::weights::Weights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionConfig {
    /// Fraction of the maximal logit the target must reach to count as
    /// promoted.
    pub tau: f32,
    /// Minimum accuracy for a sub-task to count towards generalizability.
    pub accuracy_threshold: f64,
    /// Depth of the top/bottom token lists used by the neuron prefilter.
    pub prefilter_k: usize,
}

impl Default for PromotionConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            accuracy_threshold: 0.7,
            prefilter_k: 50,
        }
    }
}

impl PromotionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "accuracy threshold {} outside (0, 1]",
                self.accuracy_threshold
            )));
        }
        if self.prefilter_k == 0 {
            return Err(Error::Config("prefilter depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// `h W_U` for a single `d`-vector.
pub fn project_logits(weights: &Weights, h: &[f32]) -> Result<Vec<f32>> {
    if h.len() != weights.config.d_model {
        return Err(Error::Dimension(format!(
            "activation has {} values, model width is {}",
            h.len(),
            weights.config.d_model
        )));
    }
    Ok(weights.project_rows(h)?.into_vec())
}

fn correct_from(target: f32, distractor_max: f32) -> bool {
    target >= distractor_max
}

fn promotes_from(target: f32, max: f32, tau: f32) -> bool {
    target >= tau * max
}

/// True when the target logit is at least the largest distractor logit.
pub fn task_correct(logits: &[f32], target: TokenId, negatives: &[TokenId]) -> Result<bool> {
    if negatives.is_empty() {
        return Err(Error::Config("distractor set is empty".into()));
    }
    if negatives.contains(&target) {
        return Err(Error::Config(format!("target {target} is also a distractor")));
    }
    let get = |t: TokenId| {
        logits
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Token(format!("id {t} outside logits")))
    };
    let mut neg_max = f32::NEG_INFINITY;
    for &n in negatives {
        neg_max = neg_max.max(get(n)?);
    }
    Ok(correct_from(get(target)?, neg_max))
}

/// True when the target logit is at least `tau` times the maximal logit.
/// A non-positive maximum is compared literally.
pub fn promotes(logits: &[f32], target: TokenId, tau: f32) -> bool {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    promotes_from(logits[target as usize], max, tau)
}

/// The parts of a component's logit vector the verdicts need: its maximum
/// and its values at a fixed list of probe tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSummary {
    pub max: f32,
    pub probes: Vec<f32>,
}

impl LogitSummary {
    pub fn from_logits(logits: &[f32], probes: &[TokenId]) -> Self {
        Self {
            max: logits.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            probes: probes.iter().map(|&t| logits[t as usize]).collect(),
        }
    }

    /// Verdict of the task-correctness test with probe `target` against the
    /// probes in `negatives`.
    pub fn correct(&self, target: usize, negatives: &[usize]) -> bool {
        let neg = negatives
            .iter()
            .map(|&i| self.probes[i])
            .fold(f32::NEG_INFINITY, f32::max);
        correct_from(self.probes[target], neg)
    }

    pub fn promotes(&self, target: usize, tau: f32) -> bool {
        promotes_from(self.probes[target], self.max, tau)
    }

    pub fn nonpositive_max(&self) -> bool {
        self.max <= 0.0
    }
}

/// Input-independent projection `v_i W_U` of one neuron, reduced to what the
/// verdicts and the prefilter need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronProjection {
    pub component: ComponentId,
    pub max: f32,
    pub min: f32,
    /// Values at the probe tokens.
    pub probes: Vec<f32>,
    /// 0-based rank of each probe from the top (ties: lower id first).
    pub rank_top: Vec<usize>,
    /// 0-based rank of each probe from the bottom.
    pub rank_bottom: Vec<usize>,
}

impl NeuronProjection {
    fn from_row(component: ComponentId, row: &[f32], probes: &[TokenId]) -> Self {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let min = row.iter().copied().fold(f32::INFINITY, f32::min);
        let mut rank_top = Vec::with_capacity(probes.len());
        let mut rank_bottom = Vec::with_capacity(probes.len());
        for &t in probes {
            let v = row[t as usize];
            let t = t as usize;
            let mut above = 0;
            let mut below = 0;
            for (j, &u) in row.iter().enumerate() {
                if u > v || (u == v && j < t) {
                    above += 1;
                }
                if u < v || (u == v && j < t) {
                    below += 1;
                }
            }
            rank_top.push(above);
            rank_bottom.push(below);
        }
        Self {
            component,
            max,
            min,
            probes: probes.iter().map(|&t| row[t as usize]).collect(),
            rank_top,
            rank_bottom,
        }
    }

    /// Whether any probe token lies in the top-`k` or bottom-`k` list.
    pub fn retained(&self, k: usize) -> bool {
        self.rank_top.iter().chain(&self.rank_bottom).any(|&r| r < k)
    }

    /// Summary of `m · (v_i W_U)`.
    pub fn scaled(&self, m: f32) -> LogitSummary {
        LogitSummary {
            max: if m >= 0.0 { m * self.max } else { m * self.min },
            probes: self.probes.iter().map(|p| m * p).collect(),
        }
    }
}

const NEURON_CHUNK: usize = 256;

/// Projects every neuron of the model onto the vocabulary.
pub fn project_all_neurons(weights: &Weights, probes: &[TokenId]) -> Result<Vec<NeuronProjection>> {
    let cfg = &weights.config;
    let chunks: Vec<(usize, usize)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.d_mlp).step_by(NEURON_CHUNK).map(move |s| (l, s)))
        .collect();
    let parts = par::try_map(&chunks, |&(l, start)| {
        let end = (start + NEURON_CHUNK).min(cfg.d_mlp);
        let w = &weights.layers[l].w_ff_out;
        let rows = &w.as_slice()[start * cfg.d_model..end * cfg.d_model];
        let logits = weights.project_rows(rows)?;
        Ok((start..end)
            .map(|i| NeuronProjection::from_row(ComponentId::neuron(l, i), logits.row(i - start), probes))
            .collect::<Vec<_>>())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Neurons whose projection ranks any of the four closing-paren tokens within
/// its top-`k` or bottom-`k`.
pub fn prefilter_neurons(projections: &[NeuronProjection], k: usize) -> Vec<ComponentId> {
    projections
        .iter()
        .filter(|p| p.retained(k))
        .map(|p| p.component)
        .collect()
}

/// Final-position activations of one prompt, reduced to logit summaries.
#[derive(Clone, Debug)]
pub struct PromptActivations {
    /// Heads in (layer, head) order.
    pub heads: Vec<LogitSummary>,
    /// Coefficients of the requested neurons, in request order.
    pub neuron_coefficients: Vec<f32>,
    /// The model's own final logits.
    pub model: LogitSummary,
}

/// Runs every example and keeps the final-position head summaries (probed at
/// `probes(example)`) and the coefficients of `neurons`.
pub fn collect_activations<P>(
    model: &Model,
    examples: &[Example],
    probes: P,
    neurons: &[ComponentId],
) -> Result<Vec<PromptActivations>>
where
    P: Fn(&Example) -> Vec<TokenId> + Sync + Send,
{
    par::try_map(examples, |ex| {
        let trace = model.forward(&ex.tokens, &ForwardOptions::default())?;
        let probe = probes(ex);
        let heads = head_summaries(model, &trace, &probe)?;
        let last = trace.last_position();
        let coeffs = neurons
            .iter()
            .map(|c| trace.neuron_coefficient(c.layer(), c.index(), last))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptActivations {
            heads,
            neuron_coefficients: coeffs,
            model: LogitSummary::from_logits(&trace.logits, &probe),
        })
    })
}

/// Logit summaries of every head at the final position.
pub fn head_summaries(model: &Model, trace: &Trace, probes: &[TokenId]) -> Result<Vec<LogitSummary>> {
    let cfg = model.config();
    let last = trace.last_position();
    let mut rows = Vec::with_capacity(cfg.n_attention_heads() * cfg.d_model);
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            rows.extend_from_slice(trace.head_output(l, h, last)?);
        }
    }
    let logits = model.weights.project_rows(&rows)?;
    Ok((0..logits.rows())
        .map(|r| LogitSummary::from_logits(logits.row(r), probes))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskId,
    /// Absent when the task has no distractor set.
    pub accuracy: Option<f64>,
    pub recall: f64,
    /// Absent when no negatives were scored.
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: ComponentId,
    pub tasks: Vec<TaskMetrics>,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_f1: f64,
    pub generalizability: usize,
    /// Promotion verdicts taken with a non-positive maximal logit.
    pub nonpositive_max: usize,
}

impl ComponentReport {
    fn assemble(component: ComponentId, tasks: Vec<TaskMetrics>, threshold: f64, nonpositive_max: usize) -> Self {
        let mean = |f: &dyn Fn(&TaskMetrics) -> Option<f64>| {
            let v: Vec<f64> = tasks.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Self {
            component,
            mean_recall: mean(&|t| Some(t.recall)),
            mean_precision: mean(&|t| t.precision),
            mean_f1: mean(&|t| t.f1),
            generalizability: tasks
                .iter()
                .filter(|t| t.accuracy.is_some_and(|a| a >= threshold))
                .count(),
            tasks,
            nonpositive_max,
        }
    }

    pub fn accuracy(&self, task: TaskId) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).and_then(|t| t.accuracy)
    }
}

/// Precision, recall and F1 from promotion counts; zero denominators give 0.
pub fn precision_recall_f1(true_pos: usize, positives: usize, false_pos: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall = ratio(true_pos, positives);
    let precision = ratio(true_pos, true_pos + false_pos);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Everything collected for the bracket sub-tasks.
pub struct ParenActivations {
    pub answers: AnswerTokenSet,
    /// Train examples of all four sub-tasks.
    pub examples: Vec<Example>,
    pub activations: Vec<PromptActivations>,
    pub neurons: Vec<NeuronProjection>,
    index: HashMap<String, usize>,
}

impl ParenActivations {
    /// Runs all `train` examples, probing the four answer tokens, and keeps
    /// the coefficients of the `neurons` projections.
    pub fn collect(
        model: &Model,
        answers: AnswerTokenSet,
        train: Vec<Example>,
        neurons: Vec<NeuronProjection>,
    ) -> Result<Self> {
        let ids: Vec<ComponentId> = neurons.iter().map(|n| n.component).collect();
        let probes = answers.ids.to_vec();
        let activations = collect_activations(model, &train, |_| probes.clone(), &ids)?;
        let index = train
            .iter()
            .enumerate()
            .map(|(i, e)| (e.prompt.clone(), i))
            .collect();
        Ok(Self {
            answers,
            examples: train,
            activations,
            neurons,
            index,
        })
    }

    fn lookup(&self, ex: &Example) -> Result<usize> {
        self.index
            .get(&ex.prompt)
            .copied()
            .ok_or_else(|| Error::Config(format!("no activations for {:?}", ex.prompt)))
    }

    /// Summary of component slot `k` (heads first, then neurons) on prompt `i`.
    fn summary(&self, k: usize, i: usize) -> LogitSummary {
        let a = &self.activations[i];
        if k < a.heads.len() {
            a.heads[k].clone()
        } else {
            let n = k - a.heads.len();
            self.neurons[n].scaled(a.neuron_coefficients[n])
        }
    }

    /// Reports for every head and every collected neuron.
    pub fn reports(
        &self,
        config: &PromotionConfig,
        n_layers: usize,
        n_heads: usize,
        balanced: &[BalancedSet],
    ) -> Result<Vec<ComponentReport>> {
        config.validate()?;
        let mut components: Vec<ComponentId> = (0..n_layers)
            .flat_map(|l| (0..n_heads).map(move |h| ComponentId::head(l, h)))
            .collect();
        components.extend(self.neurons.iter().map(|n| n.component));

        let by_task: Vec<(SubTask, Vec<usize>)> = SubTask::ALL
            .iter()
            .map(|&s| {
                let idx = self
                    .examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.task == TaskId::Paren(s))
                    .map(|(i, _)| i)
                    .collect();
                (s, idx)
            })
            .collect();
        let mut pr_sets = Vec::new();
        for set in balanced {
            let pos = set.positives.iter().map(|e| self.lookup(e)).collect::<Result<Vec<_>>>()?;
            let neg = set.negatives.iter().map(|e| self.lookup(e)).collect::<Result<Vec<_>>>()?;
            pr_sets.push((set.subtask, pos, neg));
        }

        let slots: Vec<usize> = (0..components.len()).collect();
        let reports = par::map(&slots, |&k| {
            let mut tasks = Vec::new();
            let mut nonpositive = 0;
            for (s, idx) in &by_task {
                let t = s.depth() - 1;
                let negs: Vec<usize> = (0..4).filter(|&j| j != t).collect();
                let correct = idx.iter().filter(|&&i| self.summary(k, i).correct(t, &negs)).count();
                let accuracy = (!idx.is_empty()).then(|| correct as f64 / idx.len() as f64);
                let (recall, precision, f1) = match pr_sets.iter().find(|(ps, _, _)| ps == s) {
                    Some((_, pos, neg)) => {
                        let mut tp = 0;
                        let mut fp = 0;
                        for &i in pos {
                            let sm = self.summary(k, i);
                            nonpositive += usize::from(sm.nonpositive_max());
                            tp += usize::from(sm.promotes(t, config.tau));
                        }
                        for &i in neg {
                            let sm = self.summary(k, i);
                            nonpositive += usize::from(sm.nonpositive_max());
                            fp += usize::from(sm.promotes(t, config.tau));
                        }
                        let (p, r, f) = precision_recall_f1(tp, pos.len(), fp);
                        (r, Some(p), Some(f))
                    }
                    None => (0.0, None, None),
                };
                tasks.push(TaskMetrics {
                    task: TaskId::Paren(*s),
                    accuracy,
                    recall,
                    precision,
                    f1,
                });
            }
            ComponentReport::assemble(components[k], tasks, config.accuracy_threshold, nonpositive)
        });
        Ok(reports)
    }

    /// Accuracy of the model's own logits restricted to the four answer
    /// tokens, per sub-task.
    pub fn model_accuracy(&self) -> Vec<(TaskId, f64)> {
        SubTask::ALL
            .iter()
            .map(|&s| {
                let t = s.depth() - 1;
                let negs: Vec<usize> = (0..4).filter(|&j| j != t).collect();
                let idx: Vec<usize> = self
                    .examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.task == TaskId::Paren(s))
                    .map(|(i, _)| i)
                    .collect();
                let c = idx.iter().filter(|&&i| self.activations[i].model.correct(t, &negs)).count();
                (TaskId::Paren(s), c as f64 / idx.len().max(1) as f64)
            })
            .collect()
    }
}

/// Fraction of `examples` on which `activation(example)` is task-correct.
pub fn component_accuracy<F>(weights: &Weights, spec: &TaskSpec, examples: &[Example], activation: F) -> Result<f64>
where
    F: Fn(&Example) -> Result<Vec<f32>>,
{
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for ex in examples {
        let logits = project_logits(weights, &activation(ex)?)?;
        correct += usize::from(task_correct(&logits, spec.target, &spec.negatives)?);
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Head reports for arithmetic: recall of each head on each operator's train
/// split, where the target is the example's own answer token. Accuracy and
/// precision are left empty.
pub fn arithmetic_head_reports(
    model: &Model,
    train: &[(TaskId, Vec<Example>)],
    config: &PromotionConfig,
) -> Result<Vec<ComponentReport>> {
    config.validate()?;
    let cfg = model.config();
    let n = cfg.n_attention_heads();
    let mut recalls = vec![Vec::new(); n];
    let mut nonpositive = vec![0usize; n];
    for (task, examples) in train {
        let acts = collect_activations(model, examples, |e| vec![e.target_token_id], &[])?;
        for k in 0..n {
            let hits = acts
                .iter()
                .filter(|a| {
                    nonpositive[k] += usize::from(a.heads[k].nonpositive_max());
                    a.heads[k].promotes(0, config.tau)
                })
                .count();
            let recall = if acts.is_empty() { 0.0 } else { hits as f64 / acts.len() as f64 };
            recalls[k].push(TaskMetrics {
                task: *task,
                accuracy: None,
                recall,
                precision: None,
                f1: None,
            });
        }
    }
    Ok(ComponentId::all_heads(cfg)
        .into_iter()
        .zip(recalls)
        .zip(nonpositive)
        .map(|((c, tasks), np)| ComponentReport::assemble(c, tasks, config.accuracy_threshold, np))
        .collect())
}

/// Top and bottom tokens of a neuron's projection plus its mean coefficient
/// per sub-task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronExtremes {
    pub component: ComponentId,
    pub top: Vec<(TokenId, f32)>,
    pub bottom: Vec<(TokenId, f32)>,
    pub mean_coefficient: Vec<(TaskId, f64)>,
}

pub fn neuron_extremes(
    weights: &Weights,
    layer: usize,
    neuron: usize,
    k: usize,
    mean_coefficient: Vec<(TaskId, f64)>,
) -> Result<NeuronExtremes> {
    let v = weights.neuron_value(layer, neuron)?;
    let logits = project_logits(weights, v)?;
    let top = crate::engine::top_k_indices(&logits, k);
    let neg: Vec<f32> = logits.iter().map(|x| -x).collect();
    let bottom = crate::engine::top_k_indices(&neg, k);
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| (i as TokenId, logits[i])).collect();
    Ok(NeuronExtremes {
        component: ComponentId::neuron(layer, neuron),
        top: pick(top),
        bottom: pick(bottom),
        mean_coefficient,
    })
}

/// Mean final-position coefficient of each neuron in `neurons`, per task.
pub fn mean_coefficients(acts: &ParenActivations, neurons: &[ComponentId]) -> Result<Vec<Vec<(TaskId, f64)>>> {
    let slot = |c: &ComponentId| {
        acts.neurons
            .iter()
            .position(|n| n.component == *c)
            .ok_or_else(|| Error::Index(format!("{c} was not collected")))
    };
    neurons
        .iter()
        .map(|c| {
            let k = slot(c)?;
            Ok(SubTask::ALL
                .iter()
                .map(|&s| {
                    let vals: Vec<f64> = acts
                        .examples
                        .iter()
                        .zip(&acts.activations)
                        .filter(|(e, _)| e.task == TaskId::Paren(s))
                        .map(|(_, a)| a.neuron_coefficients[k] as f64)
                        .collect();
                    (TaskId::Paren(s), vals.iter().sum::<f64>() / vals.len().max(1) as f64)
                })
                .collect())
        })
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per component: accuracy per task, averaged metrics,
/// generalizability.
pub fn write_report_csv<W: Write>(w: W, reports: &[ComponentReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let tasks: Vec<TaskId> = reports
        .first()
        .map(|r| r.tasks.iter().map(|t| t.task).collect())
        .unwrap_or_default();
    let mut header = vec!["component".to_string(), "kind".into(), "layer".into(), "index".into()];
    for t in &tasks {
        for m in ["accuracy", "recall", "precision", "f1"] {
            header.push(format!("{t}_{m}"));
        }
    }
    header.extend(
        ["mean_recall", "mean_precision", "mean_f1", "generalizability", "nonpositive_max"].map(String::from),
    );
    out.write_record(&header)?;
    for r in reports {
        let c = r.component;
        let mut row = vec![
            c.to_string(),
            if c.is_head() { "head" } else { "neuron" }.to_string(),
            c.layer().to_string(),
            c.index().to_string(),
        ];
        for t in &r.tasks {
            row.push(fmt_opt(t.accuracy));
            row.push(format!("{:.6}", t.recall));
            row.push(fmt_opt(t.precision));
            row.push(fmt_opt(t.f1));
        }
        row.push(format!("{:.6}", r.mean_recall));
        row.push(format!("{:.6}", r.mean_precision));
        row.push(format!("{:.6}", r.mean_f1));
        row.push(r.generalizability.to_string());
        row.push(r.nonpositive_max.to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub const HISTOGRAM_FLOOR: f64 = 0.01;

/// Accuracy histogram per task and component kind, 10 bins over
/// `[0.01, 1]`; components below 0.01 are left out.
pub fn write_accuracy_histogram<W: Write>(w: W, reports: &[ComponentReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "kind", "bin_low", "bin_high", "count"])?;
    let tasks: Vec<TaskId> = reports
        .first()
        .map(|r| r.tasks.iter().map(|t| t.task).collect())
        .unwrap_or_default();
    for task in tasks {
        for (kind, head) in [("head", true), ("neuron", false)] {
            let mut bins = [0usize; 10];
            for r in reports.iter().filter(|r| r.component.is_head() == head) {
                let Some(a) = r.accuracy(task) else { continue };
                if a < HISTOGRAM_FLOOR {
                    continue;
                }
                bins[((a * 10.0) as usize).min(9)] += 1;
            }
            for (b, count) in bins.iter().enumerate() {
                let lo = if b == 0 { HISTOGRAM_FLOOR } else { b as f64 / 10.0 };
                out.write_record([
                    task.to_string(),
                    kind.to_string(),
                    format!("{lo:.2}"),
                    format!("{:.2}", (b + 1) as f64 / 10.0),
                    count.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Long-format precision/recall/F1 per (component, task).
pub fn write_promotion_scatter<W: Write>(w: W, reports: &[ComponentReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["component", "kind", "task", "precision", "recall", "f1"])?;
    for r in reports {
        for t in &r.tasks {
            out.write_record([
                r.component.to_string(),
                if r.component.is_head() { "head" } else { "neuron" }.to_string(),
                t.task.to_string(),
                fmt_opt(t.precision),
                format!("{:.6}", t.recall),
                fmt_opt(t.f1),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Token lists and mean coefficients of inspected neurons.
pub fn write_neuron_extremes<W: Write>(w: W, items: &[NeuronExtremes], tok: Option<&Tokenizer>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["component", "side", "rank", "token_id", "token", "logit"])?;
    for n in items {
        for (side, list) in [("top", &n.top), ("bottom", &n.bottom)] {
            for (rank, (id, logit)) in list.iter().enumerate() {
                let text = tok.and_then(|t| t.token_text(*id).ok()).unwrap_or_default();
                out.write_record([
                    n.component.to_string(),
                    side.to_string(),
                    (rank + 1).to_string(),
                    id.to_string(),
                    text,
                    format!("{logit:.6}"),
                ])?;
            }
        }
        for (task, m) in &n.mean_coefficient {
            out.write_record([
                n.component.to_string(),
                format!("mean_coefficient:{task}"),
                String::new(),
                String::new(),
                String::new(),
                format!("{m:.6}"),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_correct_contract() {
        let l = [0.0, 3.0, 1.0, 2.0, 9.0];
        assert!(task_correct(&l, 1, &[2, 3]).unwrap());
        assert!(!task_correct(&l, 2, &[1, 3]).unwrap());
        // token 4 dominates the vocabulary but is not a distractor
        assert!(task_correct(&l, 1, &[0, 2]).unwrap());
        let tie = [2.0, 2.0, 1.0];
        assert!(task_correct(&tie, 0, &[1, 2]).unwrap());
        assert!(matches!(task_correct(&l, 1, &[]), Err(Error::Config(_))));
        assert!(task_correct(&l, 1, &[1]).is_err());
    }

    #[test]
    fn promotes_contract() {
        let l = [1.0, 4.0, 2.0];
        assert!(promotes(&l, 1, 1.0));
        assert!(promotes(&l, 2, 0.5));
        assert!(!promotes(&l, 0, 0.5));
        assert!(!promotes(&[-1.0, 5.0], 0, 0.0));
        // negative maximum compared literally: -3 >= 0.5 * -2 is false
        assert!(!promotes(&[-2.0, -3.0], 1, 0.5));
        assert!(promotes(&[-2.0, -3.0], 1, 1.6));
    }

    #[test]
    fn prf_conventions() {
        assert_eq!(precision_recall_f1(0, 350, 0), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(350, 350, 350), (0.5, 1.0, 2.0 / 3.0));
        assert_eq!(precision_recall_f1(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn summary_matches_full_vector() {
        let l = [0.5, -1.0, 3.0, 2.5, 0.0, 7.0];
        let probes = [1, 2, 3, 0];
        let s = LogitSummary::from_logits(&l, &probes);
        for t in 0..4 {
            let negs: Vec<usize> = (0..4).filter(|&j| j != t).collect();
            let neg_ids: Vec<TokenId> = negs.iter().map(|&j| probes[j]).collect();
            assert_eq!(s.correct(t, &negs), task_correct(&l, probes[t], &neg_ids).unwrap());
            for tau in [0.0, 0.3, 0.5, 1.0] {
                assert_eq!(s.promotes(t, tau), promotes(&l, probes[t], tau));
            }
        }
    }

    #[test]
    fn neuron_projection_ranks() {
        let row = [0.1, 5.0, -3.0, 2.0, 2.0, 0.0];
        let p = NeuronProjection::from_row(ComponentId::neuron(0, 0), &row, &[1, 2, 4]);
        assert_eq!(p.rank_top, vec![0, 5, 2]);
        assert_eq!(p.rank_bottom, vec![5, 0, 4]);
        assert!(p.retained(1));
        let q = NeuronProjection::from_row(ComponentId::neuron(0, 1), &row, &[0]);
        assert!(!q.retained(2));
        assert!(q.retained(3));
        let neg = p.scaled(-2.0);
        assert_eq!(neg.max, 6.0);
        assert_eq!(neg.probes, vec![-10.0, 6.0, -4.0]);
    }

    #[test]
    fn report_aggregation() {
        let tasks = vec![
            TaskMetrics { task: TaskId::Paren(SubTask::OneParen), accuracy: Some(0.9), recall: 0.4, precision: Some(0.5), f1: Some(0.2) },
            TaskMetrics { task: TaskId::Paren(SubTask::TwoParen), accuracy: Some(0.7), recall: 0.2, precision: Some(0.1), f1: Some(0.4) },
            TaskMetrics { task: TaskId::Paren(SubTask::ThreeParen), accuracy: Some(0.69), recall: 0.0, precision: None, f1: None },
        ];
        let r = ComponentReport::assemble(ComponentId::head(0, 0), tasks, 0.7, 0);
        assert_eq!(r.generalizability, 2);
        assert!((r.mean_recall - 0.2).abs() < 1e-12);
        assert!((r.mean_precision - 0.3).abs() < 1e-12);
        assert!((r.mean_f1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PromotionConfig::default().validate().is_ok());
        assert!(PromotionConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(PromotionConfig { accuracy_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(PromotionConfig { prefilter_k: 0, ..Default::default() }.validate().is_err());
    }
}
