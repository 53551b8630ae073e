use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{aggregate_task, overall_average, RawMetrics};
use crate::error::{Error, Result};
use crate::synthbench::TaskKind;

/// Resource counters of one method's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub method: String,
    pub trainable: usize,
    /// Optimizer state entries; Adam keeps two moments per trainable value.
    pub optimizer_state: usize,
    /// Wall-clock seconds keyed by stage name.
    pub seconds: BTreeMap<String, f64>,
}

impl CostEntry {
    pub fn adam(method: &str, trainable: usize, seconds: BTreeMap<String, f64>) -> Self {
        Self {
            method: method.to_string(),
            trainable,
            optimizer_state: 2 * trainable,
            seconds,
        }
    }

    pub fn memory(&self) -> usize {
        self.trainable + self.optimizer_state
    }

    pub fn total_seconds(&self) -> f64 {
        self.seconds.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub trainable: usize,
    pub optimizer_state: usize,
    pub seconds: BTreeMap<String, f64>,
    pub memory_norm: f64,
    pub time_norm: f64,
    /// Equal-weight mix of max-normalized memory and time.
    pub composite: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn row(&self, method: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn normalized(v: f64, max: f64) -> f64 {
    if max > 0.0 {
        v / max
    } else {
        0.0
    }
}

/// Max-normalizes memory and time across `entries` and mixes them evenly.
pub fn cost_report(entries: &[CostEntry]) -> Result<CostTable> {
    if entries.is_empty() {
        return Err(Error::Data("no cost entries".into()));
    }
    for e in entries {
        if e.method.is_empty() {
            return Err(Error::Data("cost entry without a method name".into()));
        }
        if e.seconds.values().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Data(format!("invalid timing for {}", e.method)));
        }
    }
    let max_mem = entries.iter().map(|e| e.memory()).max().unwrap_or(0) as f64;
    let max_time = entries.iter().map(|e| e.total_seconds()).fold(0.0, f64::max);
    let rows = entries
        .iter()
        .map(|e| {
            let memory_norm = normalized(e.memory() as f64, max_mem);
            let time_norm = normalized(e.total_seconds(), max_time);
            CostRow {
                method: e.method.clone(),
                trainable: e.trainable,
                optimizer_state: e.optimizer_state,
                seconds: e.seconds.clone(),
                memory_norm,
                time_norm,
                composite: 0.5 * memory_norm + 0.5 * time_norm,
            }
        })
        .collect();
    Ok(CostTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub kind: TaskKind,
    pub raw: RawMetrics,
    pub score: f64,
}

/// Scores of one run plus the counters needed to compare its cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub tasks: Vec<TaskReport>,
    pub average: f64,
    pub trainable: BTreeMap<String, usize>,
    pub seconds: BTreeMap<String, f64>,
    pub grad_norms: BTreeMap<String, f64>,
    pub config_hash: String,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(method: &str, raw: Vec<(String, RawMetrics)>) -> Result<Self> {
        let tasks = raw
            .into_iter()
            .map(|(task, raw)| {
                let kind = raw.kind();
                Ok(TaskReport {
                    task,
                    kind,
                    score: aggregate_task(kind, &raw)?,
                    raw,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = tasks.iter().map(|t| t.score).collect();
        Ok(Self {
            method: method.to_string(),
            average: overall_average(&scores)?,
            tasks,
            trainable: BTreeMap::new(),
            seconds: BTreeMap::new(),
            grad_norms: BTreeMap::new(),
            config_hash: String::new(),
            notes: Vec::new(),
        })
    }

    pub fn score_of(&self, kind: TaskKind) -> Option<f64> {
        self.tasks.iter().find(|t| t.kind == kind).map(|t| t.score)
    }

    /// Checks that stored scores and the average follow from the raw pairs.
    pub fn verify(&self) -> Result<()> {
        let mut scores = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let s = aggregate_task(t.kind, &t.raw)?;
            if s.to_bits() != t.score.to_bits() {
                return Err(Error::Data(format!("score of {} does not match its metrics", t.task)));
            }
            scores.push(s);
        }
        if overall_average(&scores)?.to_bits() != self.average.to_bits() {
            return Err(Error::Data("average does not match task scores".into()));
        }
        Ok(())
    }

    /// Plain-text rendering for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("method: {}\n", self.method);
        out.push_str(&format!(
            "{:<24} {:<15} {:>9} {:>9} {:>9}\n",
            "task", "kind", "m1", "m2", "score"
        ));
        for t in &self.tasks {
            let (a, b) = t.raw.pair();
            out.push_str(&format!(
                "{:<24} {:<15} {:>9.4} {:>9.4} {:>9.4}\n",
                t.task,
                t.kind.name(),
                a,
                b,
                t.score
            ));
        }
        out.push_str(&format!(
            "{:<24} {:<15} {:>9} {:>9} {:>9.4}\n",
            "average", "", "", "", self.average
        ));
        for (k, v) in &self.trainable {
            out.push_str(&format!("trainable[{k}] = {v}\n"));
        }
        for (k, v) in &self.seconds {
            out.push_str(&format!("seconds[{k}] = {v:.3}\n"));
        }
        for (k, v) in &self.grad_norms {
            out.push_str(&format!("grad_norm[{k}] = {v:.6}\n"));
        }
        out
    }
}
