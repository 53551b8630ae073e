//! Task metrics, per-task aggregation, adaptability and cost accounting.

mod fixture;
mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthbench::TaskKind;

pub use fixture::{PrintedRow, PrintedTable, PrintedTables, FIXTURE_JSON};
pub use report::{cost_report, CostEntry, CostRow, CostTable, MetricReport, TaskReport};

/// Rating substituted for an unparsable ordinal prediction.
pub const ORDINAL_FALLBACK: i64 = 3;

/// Raw metric pair of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RawMetrics {
    Classification { accuracy: f64, f1: f64 },
    Ordinal { mae: f64, rmse: f64 },
    Generation { rouge1: f64, rouge_l: f64 },
}

impl RawMetrics {
    pub fn kind(&self) -> TaskKind {
        match self {
            RawMetrics::Classification { .. } => TaskKind::Classification,
            RawMetrics::Ordinal { .. } => TaskKind::Ordinal,
            RawMetrics::Generation { .. } => TaskKind::Generation,
        }
    }

    pub fn pair(&self) -> (f64, f64) {
        match *self {
            RawMetrics::Classification { accuracy, f1 } => (accuracy, f1),
            RawMetrics::Ordinal { mae, rmse } => (mae, rmse),
            RawMetrics::Generation { rouge1, rouge_l } => (rouge1, rouge_l),
        }
    }

    pub fn from_pair(kind: TaskKind, a: f64, b: f64) -> Self {
        match kind {
            TaskKind::Classification => RawMetrics::Classification { accuracy: a, f1: b },
            TaskKind::Ordinal => RawMetrics::Ordinal { mae: a, rmse: b },
            TaskKind::Generation => RawMetrics::Generation { rouge1: a, rouge_l: b },
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("{a} predictions for {b} references")));
    }
    Ok(())
}

/// Accuracy and macro-F1 over `labels`. Predictions outside the label
/// space are wrong and count as a miss for the gold label only. Labels with
/// no gold and no prediction contribute an F1 of 0.
pub fn classify_score(preds: &[String], golds: &[String], labels: &[String]) -> Result<(f64, f64)> {
    check_len(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let k = labels.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut correct = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        let gi = *index
            .get(g.as_str())
            .ok_or_else(|| Error::Data(format!("gold label {g:?} outside the label space")))?;
        match index.get(p.as_str()) {
            Some(&pi) if pi == gi => {
                tp[gi] += 1;
                correct += 1;
            }
            Some(&pi) => {
                fp[pi] += 1;
                fn_[gi] += 1;
            }
            None => fn_[gi] += 1,
        }
    }
    let f1_sum: f64 = (0..k)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fn_[i];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[i] as f64 / denom as f64
            }
        })
        .sum();
    Ok((correct as f64 / preds.len() as f64, f1_sum / k as f64))
}

pub fn parse_rating(s: &str) -> Option<i64> {
    s.trim().parse::<i64>().ok().filter(|v| (1..=5).contains(v))
}

/// MAE and RMSE of integer ratings; unparsable predictions count as 3.
pub fn ordinal_score(preds: &[String], golds: &[String]) -> Result<(f64, f64)> {
    check_len(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let gv = parse_rating(g).ok_or_else(|| Error::Data(format!("gold rating {g:?}")))?;
        let pv = parse_rating(p).unwrap_or(ORDINAL_FALLBACK);
        let d = (pv - gv) as f64;
        abs += d.abs();
        sq += d * d;
    }
    let n = preds.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1 and ROUGE-L F-measures over lowercased whitespace tokens.
pub fn rouge(candidate: &str, reference: &str) -> (f64, f64) {
    let c = tokens(candidate);
    let r = tokens(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return (1.0, 1.0),
        (true, false) | (false, true) => return (0.0, 0.0),
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    let r1 = f_measure(overlap, c.len(), r.len());
    let rl = f_measure(lcs_len(&c, &r), c.len(), r.len());
    (r1, rl)
}

/// Mean ROUGE-1 and ROUGE-L over a corpus.
pub fn rouge_corpus(preds: &[String], refs: &[String]) -> Result<(f64, f64)> {
    check_len(preds.len(), refs.len())?;
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let (mut a, mut b) = (0.0, 0.0);
    for (p, r) in preds.iter().zip(refs) {
        let (x, y) = rouge(p, r);
        a += x;
        b += y;
    }
    let n = preds.len() as f64;
    Ok((a / n, b / n))
}

/// Single higher-is-better score per task: mean of the pair for
/// classification and generation, one minus the mean error for ordinal.
pub fn aggregate_task(kind: TaskKind, raw: &RawMetrics) -> Result<f64> {
    if raw.kind() != kind {
        return Err(Error::Data(format!("{} metrics given for a {kind} task", raw.kind())));
    }
    let (a, b) = raw.pair();
    Ok(match kind {
        TaskKind::Ordinal => 1.0 - (a + b) / 2.0,
        _ => (a + b) / 2.0,
    })
}

pub fn overall_average(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("no task scores to average".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Share of target-task performance retained by adapting from another task.
pub fn adaptability(source_on_target: f64, target_on_target: f64) -> Result<f64> {
    if !(target_on_target > 0.0) {
        return Err(Error::Data(format!(
            "adaptability needs a positive reference score, got {target_on_target}"
        )));
    }
    Ok(source_on_target / target_on_target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptabilityResult {
    pub source: String,
    pub target: String,
    pub source_on_target: f64,
    pub target_on_target: f64,
    pub ratio: f64,
}

impl AdaptabilityResult {
    pub fn new(source: &str, target: &str, source_on_target: f64, target_on_target: f64) -> Result<Self> {
        let ratio = if source == target {
            1.0
        } else {
            adaptability(source_on_target, target_on_target)?
        };
        Ok(Self {
            source: source.to_string(),
            target: target.to_string(),
            source_on_target,
            target_on_target,
            ratio,
        })
    }
}

#[cfg(test)]
mod tests;
