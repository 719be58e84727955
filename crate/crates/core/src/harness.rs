//! Run directories: a `run.json` record next to the artifacts a command
//! wrote, and a consolidated report built from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::steering::{AlphaSearchResult, SteeringOutcome, SweepPoint, TaskAccuracy};

pub const RUN_FILE: &str = "run.json";
pub const STEERING_FILE: &str = "steering.json";
pub const ALPHA_FILE: &str = "alpha_search.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const OVERLAP_FILE: &str = "overlap.json";
pub const F1_FILE: &str = "f1_distribution.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub bundle_hash: Option<String>,
    /// Everything needed to reproduce the run.
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl RunRecord {
    /// The id is derived from the command, bundle hash and configuration, so
    /// an identical invocation gets the same id.
    pub fn new(command: &str, bundle_hash: Option<String>, config: serde_json::Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(bundle_hash.as_deref().unwrap_or("").as_bytes());
        h.update(config.to_string().as_bytes());
        let run_id = hex::encode(&h.finalize()[..6]);
        Self {
            run_id,
            command: command.to_string(),
            bundle_hash,
            config,
            artifacts: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn add_artifact(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.artifacts.contains(&name) {
            self.artifacts.push(name);
        }
    }

    pub fn time(&mut self, stage: impl Into<String>, seconds: f64) {
        self.timings.push((stage.into(), seconds));
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        if !path.exists() {
            return Err(Error::Config(format!("no run recorded in {}", dir.display())));
        }
        read_json(&path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_optional<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<Option<T>> {
    if path.exists() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub k_a: usize,
    pub k_b: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapTable {
    pub task: String,
    pub list_a: String,
    pub list_b: String,
    pub rows: Vec<OverlapRow>,
}

/// F1 of the top-ranked components versus the rest, for one sub-task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Distribution {
    pub task: String,
    pub top_k: usize,
    pub top: Vec<f64>,
    pub rest: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run: RunRecord,
    pub baseline: Option<Vec<TaskAccuracy>>,
    pub steering: Option<SteeringOutcome>,
    pub alpha_search: Option<AlphaSearchResult>,
    pub sweep: Option<Vec<SweepPoint>>,
    pub overlap: Option<Vec<OverlapTable>>,
    pub f1_distribution: Option<Vec<F1Distribution>>,
}

impl Report {
    pub fn collect(dir: &Path) -> Result<Self> {
        let run = RunRecord::load(dir)?;
        let steering: Option<SteeringOutcome> = read_optional(dir.join(STEERING_FILE))?;
        let sweep: Option<Vec<SweepPoint>> = read_optional(dir.join(SWEEP_FILE))?;
        let baseline = steering
            .as_ref()
            .map(|s| s.baseline.clone())
            .or_else(|| sweep.as_ref().and_then(|s| s.iter().find(|p| p.k == 0)).map(|p| p.per_task.clone()));
        Ok(Self {
            run,
            baseline,
            steering,
            alpha_search: read_optional(dir.join(ALPHA_FILE))?,
            sweep,
            overlap: read_optional(dir.join(OVERLAP_FILE))?,
            f1_distribution: read_optional(dir.join(F1_FILE))?,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {} ({})", self.run.run_id, self.run.command);
        if let Some(h) = &self.run.bundle_hash {
            let _ = writeln!(s, "bundle {h}");
        }
        for key in ["metric", "component", "k", "alpha", "seed"] {
            if let Some(v) = self.run.config.get(key) {
                let _ = writeln!(s, "{key}: {v}");
            }
        }
        if let Some(a) = &self.alpha_search {
            let _ = writeln!(s, "selected alpha: {:.1}", a.selected);
        }
        if let Some(base) = &self.baseline {
            let _ = writeln!(s, "\n{:<12} {:>9} {:>9}", "task", "baseline", "steered");
            for b in base {
                let steered = self
                    .steering
                    .as_ref()
                    .and_then(|st| st.steered.iter().find(|t| t.task == b.task))
                    .map(|t| format!("{:>8.2}%", 100.0 * t.accuracy))
                    .unwrap_or_else(|| format!("{:>9}", "-"));
                let _ = writeln!(s, "{:<12} {:>8.2}% {steered}", b.task.to_string(), 100.0 * b.accuracy);
            }
        }
        if let Some(sweep) = &self.sweep {
            let _ = writeln!(s, "\nk sweep (alpha {:.1})", sweep.first().map_or(0.0, |p| p.alpha));
            for p in sweep {
                let cells: Vec<String> = p
                    .per_task
                    .iter()
                    .map(|t| format!("{}={:.2}%", t.task, 100.0 * t.accuracy))
                    .collect();
                let _ = writeln!(s, "  k={:<3} {}", p.k, cells.join(" "));
            }
        }
        if let Some(tables) = &self.overlap {
            for t in tables {
                let _ = writeln!(s, "\noverlap {} vs {} ({})", t.list_a, t.list_b, t.task);
                for r in &t.rows {
                    let _ = writeln!(s, "  k_a={:<3} k_b={:<3} {:.2}", r.k_a, r.k_b, r.overlap);
                }
            }
        }
        if let Some(dists) = &self.f1_distribution {
            for d in dists {
                let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
                let _ = writeln!(
                    s,
                    "\nF1 {}: top-{} mean {:.3}, others mean {:.3}",
                    d.task,
                    d.top_k,
                    mean(&d.top),
                    mean(&d.rest)
                );
            }
        }
        s
    }

    /// Writes `report.json` and `report.txt` into the run directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(REPORT_JSON), self)?;
        std::fs::write(dir.join(REPORT_TEXT), self.render())?;
        Ok(())
    }
}
