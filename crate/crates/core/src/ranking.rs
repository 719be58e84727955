//! Orderings of components for steering and comparison.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::ComponentReport;
use crate::engine::ComponentId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Precision,
    F1,
}

impl Metric {
    pub fn of(self, r: &ComponentReport) -> f64 {
        match self {
            Metric::Recall => r.mean_recall,
            Metric::Precision => r.mean_precision,
            Metric::F1 => r.mean_f1,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Recall => "recall",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Metric::Recall),
            "precision" => Ok(Metric::Precision),
            "f1" => Ok(Metric::F1),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

/// How a list was ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    /// Generalizability count, then the averaged metric.
    Grouped { metric: Metric },
    /// Averaged recall alone.
    RecallOnly,
    /// Mean activation-patching effect.
    PatchingEffect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub component: ComponentId,
    pub generalizability: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub criterion: Criterion,
    pub entries: Vec<RankedEntry>,
}

fn tie_break(a: &ComponentId, b: &ComponentId) -> Ordering {
    (a.layer(), a.index()).cmp(&(b.layer(), b.index()))
}

impl RankedList {
    /// Sorts by (`generalizability` desc, `score` desc, (layer, index) asc)
    /// when grouped, else by (`score` desc, (layer, index) asc).
    pub fn from_entries(criterion: Criterion, mut entries: Vec<RankedEntry>) -> Self {
        let grouped = matches!(criterion, Criterion::Grouped { .. });
        entries.sort_by(|a, b| {
            let g = if grouped {
                b.generalizability.cmp(&a.generalizability)
            } else {
                Ordering::Equal
            };
            g.then(b.score.total_cmp(&a.score))
                .then(tie_break(&a.component, &b.component))
        });
        Self { criterion, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn components(&self) -> Vec<ComponentId> {
        self.entries.iter().map(|e| e.component).collect()
    }

    pub fn top(&self, k: usize) -> Result<Vec<ComponentId>> {
        if k > self.entries.len() {
            return Err(Error::Index(format!(
                "k = {k} exceeds the {} ranked components",
                self.entries.len()
            )));
        }
        Ok(self.entries[..k].iter().map(|e| e.component).collect())
    }

    /// The sub-list of heads or of neurons, order preserved.
    pub fn only(&self, heads: bool) -> RankedList {
        RankedList {
            criterion: self.criterion,
            entries: self
                .entries
                .iter()
                .filter(|e| e.component.is_head() == heads)
                .cloned()
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Generalizability groups first, then `metric` averaged over sub-tasks.
pub fn rank_components(reports: &[ComponentReport], metric: Metric) -> Result<RankedList> {
    if reports.is_empty() {
        return Err(Error::Config("no component reports to rank".into()));
    }
    Ok(RankedList::from_entries(
        Criterion::Grouped { metric },
        reports
            .iter()
            .map(|r| RankedEntry {
                component: r.component,
                generalizability: r.generalizability,
                score: metric.of(r),
            })
            .collect(),
    ))
}

/// Averaged recall alone, for tasks without distractor sets.
pub fn rank_by_recall_only(reports: &[ComponentReport]) -> RankedList {
    RankedList::from_entries(
        Criterion::RecallOnly,
        reports
            .iter()
            .map(|r| RankedEntry {
                component: r.component,
                generalizability: r.generalizability,
                score: r.mean_recall,
            })
            .collect(),
    )
}

/// `|top-k_a(a) ∩ top-k_b(b)| / k_a`.
pub fn overlap(a: &RankedList, k_a: usize, b: &RankedList, k_b: usize) -> Result<f64> {
    if k_a == 0 {
        return Err(Error::Index("k_a must be at least 1".into()));
    }
    let top_a = a.top(k_a)?;
    let top_b = b.top(k_b)?;
    let shared = top_a.iter().filter(|c| top_b.contains(c)).count();
    Ok(shared as f64 / k_a as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(c: ComponentId, g: usize, recall: f64, f1: f64) -> ComponentReport {
        ComponentReport {
            component: c,
            tasks: Vec::new(),
            mean_recall: recall,
            mean_precision: 0.0,
            mean_f1: f1,
            generalizability: g,
            nonpositive_max: 0,
        }
    }

    #[test]
    fn grouping_dominates_metric() {
        let reports = vec![
            report(ComponentId::head(0, 0), 1, 0.9, 0.9),
            report(ComponentId::head(3, 1), 2, 0.1, 0.1),
            report(ComponentId::head(1, 0), 1, 0.5, 0.95),
            report(ComponentId::head(2, 2), 0, 1.0, 1.0),
        ];
        let r = rank_components(&reports, Metric::F1).unwrap();
        assert_eq!(
            r.components(),
            vec![
                ComponentId::head(3, 1),
                ComponentId::head(1, 0),
                ComponentId::head(0, 0),
                ComponentId::head(2, 2)
            ]
        );
        let rec = rank_components(&reports, Metric::Recall).unwrap();
        assert_eq!(rec.entries[1].component, ComponentId::head(0, 0));
        assert!(rank_components(&[], Metric::F1).is_err());
    }

    #[test]
    fn ties_break_by_position() {
        let reports: Vec<_> = [(2, 0), (0, 5), (0, 1), (1, 3)]
            .iter()
            .map(|&(l, h)| report(ComponentId::head(l, h), 0, 0.3, 0.3))
            .collect();
        let r = rank_by_recall_only(&reports);
        assert_eq!(
            r.components(),
            vec![
                ComponentId::head(0, 1),
                ComponentId::head(0, 5),
                ComponentId::head(1, 3),
                ComponentId::head(2, 0)
            ]
        );
    }

    #[test]
    fn recall_only_ignores_grouping() {
        let reports = vec![
            report(ComponentId::head(0, 0), 3, 0.1, 0.0),
            report(ComponentId::head(5, 5), 0, 0.2, 0.0),
        ];
        assert_eq!(rank_by_recall_only(&reports).entries[0].component, ComponentId::head(5, 5));
    }

    #[test]
    fn top_k_and_overlap() {
        let a = RankedList::from_entries(
            Criterion::RecallOnly,
            (0..5)
                .map(|i| RankedEntry {
                    component: ComponentId::head(0, i),
                    generalizability: 0,
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
        );
        assert!(a.top(6).is_err());
        assert!(a.top(0).unwrap().is_empty());
        assert_eq!(overlap(&a, 5, &a, 5).unwrap(), 1.0);
        let mut b = a.clone();
        for e in &mut b.entries {
            e.component = ComponentId::head(1, e.component.index());
        }
        assert_eq!(overlap(&a, 5, &b, 5).unwrap(), 0.0);
        b.entries[3].component = ComponentId::head(0, 2);
        assert!((overlap(&a, 5, &b, 5).unwrap() - 0.2).abs() < 1e-12);
        assert!(overlap(&a, 0, &b, 5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let reports = vec![report(ComponentId::neuron(19, 11), 1, 0.4, 0.2)];
        let r = rank_components(&reports, Metric::F1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ranking.json");
        r.save(&p).unwrap();
        assert_eq!(RankedList::load(&p).unwrap(), r);
    }
}
