//! End-to-end flows shared by the command-line driver and the acceptance
//! suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    arithmetic_head_reports, project_all_neurons, ComponentReport, ParenActivations, PromotionConfig,
};
use crate::engine::{ComponentId, Model, SteerPlan};
use crate::error::{Error, Result};
use crate::harness::F1Distribution;
use crate::patching::{
    effect_table, filter_counterfactuals, gen_counterfactuals, sample_pairs, search_circuit, Circuit,
    CircuitSearch, EffectTable, FaithfulnessContext, FilteredPairs,
};
use crate::ranking::{rank_by_recall_only, rank_components, Metric, RankedList};
use crate::steering::{search_alpha, steer_and_evaluate, AlphaSearchResult, SteeringOutcome};
use crate::tasks::{gen_arith_dataset, gen_balanced_pr_dataset, gen_paren_dataset, ArithOp, Dataset, Example, Split, SubTask, TaskId};
use crate::tokenizer::Tokenizer;

pub fn paren_suite(tok: &Tokenizer, seed: u64) -> Result<Vec<Dataset>> {
    SubTask::ALL.iter().map(|&s| gen_paren_dataset(s, seed, tok)).collect()
}

pub fn arith_suite(tok: &Tokenizer, seed: u64) -> Result<Vec<Dataset>> {
    ArithOp::ALL.iter().map(|&op| gen_arith_dataset(op, seed, tok)).collect()
}

pub fn task_sets(datasets: &[Dataset], split: Split) -> Vec<(TaskId, Vec<Example>)> {
    datasets.iter().map(|d| (d.task, d.split_vec(split))).collect()
}

/// Which component kinds to score or steer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentSelection {
    Heads,
    Neurons,
    Both,
}

impl ComponentSelection {
    pub fn heads(self) -> bool {
        self != ComponentSelection::Neurons
    }

    pub fn neurons(self) -> bool {
        self != ComponentSelection::Heads
    }
}

impl fmt::Display for ComponentSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentSelection::Heads => "heads",
            ComponentSelection::Neurons => "neurons",
            ComponentSelection::Both => "both",
        })
    }
}

impl FromStr for ComponentSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(ComponentSelection::Heads),
            "neurons" => Ok(ComponentSelection::Neurons),
            "both" => Ok(ComponentSelection::Both),
            _ => Err(Error::Config(format!("unknown component selection {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParenAttribution {
    pub reports: Vec<ComponentReport>,
    /// Model accuracy on each train split, restricted to the answer tokens.
    pub model_accuracy: Vec<(TaskId, f64)>,
    pub total_neurons: usize,
    pub prefiltered_neurons: usize,
}

/// Scores every head and (optionally) every prefiltered neuron on the four
/// bracket sub-tasks' train splits.
pub fn attribute_paren(
    model: &Model,
    tok: &Tokenizer,
    datasets: &[Dataset],
    config: &PromotionConfig,
    seed: u64,
    with_neurons: bool,
) -> Result<(ParenAttribution, ParenActivations)> {
    config.validate()?;
    let answers = tok.answer_tokens()?;
    let neurons = if with_neurons {
        project_all_neurons(&model.weights, &answers.ids)?
            .into_iter()
            .filter(|p| p.retained(config.prefilter_k))
            .collect()
    } else {
        Vec::new()
    };
    let prefiltered = neurons.len();
    let train: Vec<Example> = datasets.iter().flat_map(|d| d.split_vec(Split::Train)).collect();
    let acts = ParenActivations::collect(model, answers, train, neurons)?;
    let balanced = SubTask::ALL
        .iter()
        .map(|&s| gen_balanced_pr_dataset(s, datasets, seed))
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config();
    let reports = acts.reports(config, cfg.n_layers, cfg.n_heads, &balanced)?;
    Ok((
        ParenAttribution {
            reports,
            model_accuracy: acts.model_accuracy(),
            total_neurons: cfg.n_neurons(),
            prefiltered_neurons: prefiltered,
        },
        acts,
    ))
}

/// Recall of every head on the arithmetic train splits.
pub fn attribute_arith(model: &Model, datasets: &[Dataset], config: &PromotionConfig) -> Result<Vec<ComponentReport>> {
    arithmetic_head_reports(model, &task_sets(datasets, Split::Train), config)
}

/// Separate head and neuron rankings.
pub fn rank_paren(reports: &[ComponentReport], metric: Metric) -> Result<(RankedList, RankedList)> {
    let heads: Vec<ComponentReport> = reports.iter().filter(|r| r.component.is_head()).cloned().collect();
    let neurons: Vec<ComponentReport> = reports.iter().filter(|r| !r.component.is_head()).cloned().collect();
    let rh = rank_components(&heads, metric)?;
    let rn = if neurons.is_empty() {
        RankedList { criterion: rh.criterion, entries: Vec::new() }
    } else {
        rank_components(&neurons, metric)?
    };
    Ok((rh, rn))
}

pub fn rank_arith(reports: &[ComponentReport]) -> RankedList {
    rank_by_recall_only(reports)
}

/// Components steered for a given `k`.
pub fn select_components(
    heads: &RankedList,
    neurons: &RankedList,
    selection: ComponentSelection,
    k: usize,
) -> Result<Vec<ComponentId>> {
    let mut out = Vec::new();
    if selection.heads() {
        out.extend(heads.top(k)?);
    }
    if selection.neurons() {
        out.extend(neurons.top(k)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaChoice {
    Fixed(f32),
    Search,
}

impl FromStr for AlphaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "search" {
            return Ok(AlphaChoice::Search);
        }
        let a: f32 = s
            .parse()
            .map_err(|_| Error::Config(format!("alpha must be a number or `search`, got {s:?}")))?;
        if !(a > 0.0) {
            return Err(Error::Config(format!("alpha {a} must be > 0")));
        }
        Ok(AlphaChoice::Fixed(a))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteerRun {
    pub alpha: f32,
    pub alpha_search: Option<AlphaSearchResult>,
    pub outcome: SteeringOutcome,
}

/// Picks `α` (on dev, if asked) and evaluates baseline and steered accuracy
/// on test.
pub fn steer(
    model: &Model,
    components: &[ComponentId],
    alpha: AlphaChoice,
    grid: &[f32],
    dev: &[(TaskId, Vec<Example>)],
    test: &[(TaskId, Vec<Example>)],
) -> Result<SteerRun> {
    let (alpha, search) = match alpha {
        AlphaChoice::Fixed(a) => (a, None),
        AlphaChoice::Search => {
            let r = search_alpha(model, components, dev, grid)?;
            (r.selected, Some(r))
        }
    };
    let plan = SteerPlan::uniform(components.iter().copied(), alpha);
    Ok(SteerRun {
        alpha,
        alpha_search: search,
        outcome: steer_and_evaluate(model, plan, test)?,
    })
}

/// F1 of the top-`k` ranked components against the rest, per sub-task.
pub fn f1_distribution(reports: &[ComponentReport], ranked: &RankedList, k: usize) -> Result<Vec<F1Distribution>> {
    let top = ranked.top(k)?;
    let tasks: Vec<TaskId> = reports
        .first()
        .map(|r| r.tasks.iter().map(|t| t.task).collect())
        .unwrap_or_default();
    Ok(tasks
        .into_iter()
        .map(|task| {
            let mut d = F1Distribution {
                task: task.to_string(),
                top_k: k,
                top: Vec::new(),
                rest: Vec::new(),
            };
            for r in reports.iter().filter(|r| ranked.entries.iter().any(|e| e.component == r.component)) {
                let f1 = r.tasks.iter().find(|t| t.task == task).and_then(|t| t.f1).unwrap_or(0.0);
                if top.contains(&r.component) {
                    d.top.push(f1);
                } else {
                    d.rest.push(f1);
                }
            }
            d
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchRun {
    pub task: TaskId,
    pub train_candidates: usize,
    pub train_pairs: usize,
    pub train_relaxed: bool,
    pub test_pairs: usize,
    pub test_relaxed: bool,
    pub flagged_pairs: usize,
    pub table: EffectTable,
    pub searches: Vec<CircuitSearch>,
}

fn pairs_for(model: &Model, tok: &Tokenizer, examples: &[Example], limit: usize) -> Result<FilteredPairs> {
    let mut candidates = Vec::new();
    for ex in examples {
        candidates.extend(gen_counterfactuals(ex, tok)?);
    }
    let mut f = filter_counterfactuals(model, &candidates)?;
    f.pairs = sample_pairs(&f.pairs, limit);
    Ok(f)
}

/// Effect table on train pairs, then the smallest faithful circuit on test
/// pairs at head and at (head, position) granularity.
pub fn patch_task(
    model: &Model,
    tok: &Tokenizer,
    dataset: &Dataset,
    max_pairs: usize,
    threshold: f64,
) -> Result<PatchRun> {
    let train = pairs_for(model, tok, &dataset.split_vec(Split::Train), max_pairs)?;
    let test = pairs_for(model, tok, &dataset.split_vec(Split::Test), max_pairs)?;
    if train.pairs.is_empty() || test.pairs.is_empty() {
        return Err(Error::Config(format!(
            "the model answers no {} prompt correctly; nothing to patch",
            dataset.task
        )));
    }
    let table = effect_table(model, dataset.task, &train.pairs)?;
    let ctx = FaithfulnessContext::new(model, test.pairs.clone())?;
    let heads = search_circuit(&ctx, &table.ranked_heads(), Circuit::Heads, threshold, "heads")?;
    let entries = search_circuit(&ctx, &table.ranked_entries(), Circuit::Entries, threshold, "head_positions")?;
    Ok(PatchRun {
        task: dataset.task,
        train_candidates: train.candidates,
        train_pairs: train.pairs.len(),
        train_relaxed: train.relaxed,
        test_pairs: test.pairs.len(),
        test_relaxed: test.relaxed,
        flagged_pairs: train.pairs.iter().chain(&test.pairs).filter(|p| p.is_flagged()).count(),
        table,
        searches: vec![heads, entries],
    })
}
