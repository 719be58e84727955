//! Amplifying the top-ranked components and measuring task accuracy.

use serde::{Deserialize, Serialize};

use crate::engine::{ComponentId, Model, SteerPlan};
use crate::error::{Error, Result};
use crate::par;
use crate::ranking::RankedList;
use crate::tasks::{Example, TaskId};

pub const DEFAULT_K_GRID: [usize; 6] = [0, 5, 10, 20, 40, 60];

/// Multipliers 1.1, 1.2, ..., 2.0.
pub fn alpha_grid() -> Vec<f32> {
    (11..=20).map(|i| i as f32 / 10.0).collect()
}

/// The top `k` components of `ranked`, each scaled by `alpha`.
pub fn build_plan(ranked: &RankedList, k: usize, alpha: f32) -> Result<SteerPlan> {
    Ok(SteerPlan::uniform(ranked.top(k)?, alpha))
}

/// Top `k` heads and top `k` neurons, taken from separate rankings.
pub fn build_joint_plan(heads: &RankedList, neurons: &RankedList, k: usize, alpha: f32) -> Result<SteerPlan> {
    let mut plan = build_plan(heads, k, alpha)?;
    for c in neurons.top(k)? {
        plan.insert(c, alpha);
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Fraction of examples whose greedy next token equals the target.
pub fn evaluate_steered(model: &Model, plan: Option<&SteerPlan>, examples: &[Example]) -> Result<Accuracy> {
    let hits = par::try_map(examples, |ex| {
        Ok(model.predict_next(&ex.tokens, plan)? == ex.target_token_id)
    })?;
    Ok(Accuracy {
        correct: hits.iter().filter(|&&h| h).count(),
        total: examples.len(),
    })
}

/// Labelled example sets, one per sub-task.
pub type TaskSets = [(TaskId, Vec<Example>)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: TaskId,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

fn evaluate_tasks(model: &Model, plan: Option<&SteerPlan>, sets: &TaskSets) -> Result<Vec<TaskAccuracy>> {
    sets.iter()
        .map(|(task, ex)| {
            let a = evaluate_steered(model, plan, ex)?;
            Ok(TaskAccuracy {
                task: *task,
                accuracy: a.value(),
                correct: a.correct,
                total: a.total,
            })
        })
        .collect()
}

fn mean(per_task: &[TaskAccuracy]) -> f64 {
    if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f32,
    pub mean_accuracy: f64,
    pub per_task: Vec<TaskAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearchResult {
    pub components: Vec<ComponentId>,
    pub grid: Vec<AlphaPoint>,
    pub selected: f32,
}

/// Evaluates every `alpha` in `grid` on the dev sets and picks the one with
/// the highest mean accuracy across sub-tasks; ties go to the smallest.
pub fn search_alpha(model: &Model, components: &[ComponentId], dev: &TaskSets, grid: &[f32]) -> Result<AlphaSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty alpha grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let plan = SteerPlan::uniform(components.iter().copied(), alpha);
        let per_task = evaluate_tasks(model, Some(&plan), dev)?;
        points.push(AlphaPoint {
            alpha,
            mean_accuracy: mean(&per_task),
            per_task,
        });
    }
    let best = points
        .iter()
        .fold(None::<&AlphaPoint>, |best, p| match best {
            Some(b) if b.mean_accuracy > p.mean_accuracy => Some(b),
            Some(b) if b.mean_accuracy == p.mean_accuracy && b.alpha <= p.alpha => Some(b),
            _ => Some(p),
        })
        .expect("non-empty grid");
    Ok(AlphaSearchResult {
        components: components.to_vec(),
        selected: best.alpha,
        grid: points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub alpha: f32,
    pub per_task: Vec<TaskAccuracy>,
}

/// Accuracy with the top `k` components steered, for each `k`. `select`
/// turns a `k` into the steered component set.
pub fn sweep_k<F>(model: &Model, ks: &[usize], alpha: f32, test: &TaskSets, select: F) -> Result<Vec<SweepPoint>>
where
    F: Fn(usize) -> Result<Vec<ComponentId>>,
{
    ks.iter()
        .map(|&k| {
            let components = select(k)?;
            let plan = SteerPlan::uniform(components, alpha);
            Ok(SweepPoint {
                k,
                alpha,
                per_task: evaluate_tasks(model, (!plan.is_empty()).then_some(&plan), test)?,
            })
        })
        .collect()
}

/// Accuracy before and after steering on each test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringOutcome {
    pub plan: SteerPlan,
    pub baseline: Vec<TaskAccuracy>,
    pub steered: Vec<TaskAccuracy>,
}

pub fn steer_and_evaluate(model: &Model, plan: SteerPlan, test: &TaskSets) -> Result<SteeringOutcome> {
    Ok(SteeringOutcome {
        baseline: evaluate_tasks(model, None, test)?,
        steered: evaluate_tasks(model, Some(&plan), test)?,
        plan,
    })
}

pub fn baseline_accuracy(model: &Model, test: &TaskSets) -> Result<Vec<TaskAccuracy>> {
    evaluate_tasks(model, None, test)
}
