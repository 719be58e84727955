mod common;

use std::collections::HashSet;

use steerlab::attribution::{project_all_neurons, ComponentReport, ParenActivations, PromotionConfig};
use steerlab::engine::{Capture, ComponentId, ForwardOptions};
use steerlab::tasks::{gen_balanced_pr_dataset, gen_paren_dataset, is_balanced, Dataset, Example, Split, SubTask};
use steerlab::weights::Weights;

use common::{oracle_correct, oracle_promotes};

const PER_TASK: usize = 40;

/// `x W_U` over the whole vocabulary, in f64 from the embedding rows.
fn full_logits(w: &Weights, x: &[f64]) -> Vec<f32> {
    (0..w.config.vocab_size)
        .map(|v| w.wte.row(v).iter().zip(x).map(|(&e, &a)| e as f64 * a).sum::<f64>() as f32)
        .collect()
}

fn truncated(datasets: &[Dataset]) -> Vec<Dataset> {
    datasets
        .iter()
        .map(|d| Dataset {
            task: d.task,
            examples: d.split(Split::Train).take(PER_TASK).cloned().collect(),
        })
        .collect()
}

#[test]
fn reports_match_full_vocabulary_recompute() {
    let (model, tok) = common::tiny();
    let w = &model.weights;
    let answers = tok.answer_tokens().unwrap();
    let data: Vec<Dataset> = SubTask::ALL.iter().map(|&s| gen_paren_dataset(s, 3, &tok).unwrap()).collect();
    let data = truncated(&data);
    let train: Vec<Example> = data.iter().flat_map(|d| d.examples.clone()).collect();

    // a handful of neurons, whether or not the prefilter would keep them
    let neurons: Vec<_> = project_all_neurons(w, &answers.ids).unwrap().into_iter().step_by(37).collect();
    let neuron_ids: Vec<ComponentId> = neurons.iter().map(|n| n.component).collect();
    let acts = ParenActivations::collect(&model, answers, train.clone(), neurons).unwrap();
    let balanced: Vec<_> = SubTask::ALL.iter().map(|&s| gen_balanced_pr_dataset(s, &data, 3).unwrap()).collect();
    let config = PromotionConfig::default();
    let cfg = model.config();
    let reports = acts.reports(&config, cfg.n_layers, cfg.n_heads, &balanced).unwrap();
    assert_eq!(reports.len(), cfg.n_attention_heads() + neuron_ids.len());

    // full logit vector of every component on every prompt
    let mut components = ComponentId::all_heads(cfg);
    components.extend(&neuron_ids);
    let logits_of = |ex: &Example| -> Vec<Vec<f32>> {
        let t = model.forward(&ex.tokens, &ForwardOptions::capture(Capture::LastPosition)).unwrap();
        let last = t.last_position();
        components
            .iter()
            .map(|c| {
                let x: Vec<f64> = if c.is_head() {
                    t.head_output(c.layer(), c.index(), last).unwrap().iter().map(|&v| v as f64).collect()
                } else {
                    let m = t.neuron_coefficient(c.layer(), c.index(), last).unwrap() as f64;
                    w.layers[c.layer()].w_ff_out.row(c.index()).iter().map(|&v| m * v as f64).collect()
                };
                full_logits(w, &x)
            })
            .collect()
    };
    let all: Vec<Vec<Vec<f32>>> = train.iter().map(logits_of).collect();
    let slot = |ex: &Example| train.iter().position(|e| e.prompt == ex.prompt).unwrap();

    for (k, c) in components.iter().enumerate() {
        let report: &ComponentReport = reports.iter().find(|r| r.component == *c).unwrap();
        let mut general = 0;
        for (s, set) in SubTask::ALL.iter().zip(&balanced) {
            let target = answers.closing(s.depth()) as usize;
            let negs: Vec<usize> = (1..=4).filter(|&n| n != s.depth()).map(|n| answers.closing(n) as usize).collect();
            let idx: Vec<usize> = train.iter().enumerate().filter(|(_, e)| e.task == set.positives[0].task).map(|(i, _)| i).collect();
            let correct = idx.iter().filter(|&&i| oracle_correct(&all[i][k], target, &negs)).count();
            let accuracy = correct as f64 / idx.len() as f64;
            let tp = set.positives.iter().filter(|e| oracle_promotes(&all[slot(e)][k], target, config.tau)).count();
            let fp = set.negatives.iter().filter(|e| oracle_promotes(&all[slot(e)][k], target, config.tau)).count();
            let recall = tp as f64 / set.positives.len() as f64;
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };

            let m = report.tasks.iter().find(|t| t.task == set.positives[0].task).unwrap();
            assert_eq!(m.accuracy, Some(accuracy), "{c} {s:?} accuracy");
            assert_eq!(m.recall, recall, "{c} {s:?} recall");
            assert_eq!(m.precision, Some(precision), "{c} {s:?} precision");
            assert!((m.f1.unwrap() - f1).abs() < 1e-12, "{c} {s:?} f1");
            general += usize::from(accuracy >= config.accuracy_threshold);
        }
        assert_eq!(report.generalizability, general, "{c}");
    }
}

#[test]
fn balanced_negatives_are_even_and_disjoint() {
    let (_, tok) = common::tiny();
    let data: Vec<Dataset> = SubTask::ALL.iter().map(|&s| gen_paren_dataset(s, 0, &tok).unwrap()).collect();
    for s in SubTask::ALL {
        let set = gen_balanced_pr_dataset(s, &data, 0).unwrap();
        assert_eq!(set.positives.len(), 350);
        assert_eq!(set.negatives.len(), 350);
        let mut others: Vec<SubTask> = SubTask::ALL.into_iter().filter(|&o| o != s).collect();
        others.sort_by_key(|o| o.name());
        let counts: Vec<usize> = others
            .iter()
            .map(|o| set.negatives.iter().filter(|e| e.task == steerlab::tasks::TaskId::Paren(*o)).count())
            .collect();
        assert_eq!(counts, vec![117, 117, 116], "{s:?}");
        let prompts: HashSet<&str> = set.negatives.iter().map(|e| e.prompt.as_str()).collect();
        assert_eq!(prompts.len(), 350);
        assert!(set.negatives.iter().all(|e| e.split == Split::Train));
        assert_eq!(set, gen_balanced_pr_dataset(s, &data, 0).unwrap());
    }
}

#[test]
fn paren_datasets_are_well_formed() {
    let (_, tok) = common::tiny();
    let answers = tok.answer_tokens().unwrap();
    for s in SubTask::ALL {
        let d = gen_paren_dataset(s, 11, &tok).unwrap();
        let nums: HashSet<u32> = d.examples.iter().map(|e| e.num.unwrap()).collect();
        assert_eq!(nums.len(), 650, "numbers repeat across splits");
        assert!(nums.iter().all(|n| (100..=999).contains(n)));
        for e in &d.examples {
            assert_eq!(e.target_token_id, answers.closing(s.depth()));
            assert_eq!(tok.encode(&e.prompt), e.tokens);
            assert!(is_balanced(&format!("{}{}", e.prompt, e.target_text)));
            assert!(!is_balanced(&e.prompt));
        }
        let other = gen_paren_dataset(s, 12, &tok).unwrap();
        assert_ne!(d, other);
    }
}
