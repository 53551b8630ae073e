use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{run_method, LabConfig, Method, MethodRun};
use crate::adapters::{AdapterSet, Variant};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::hypernet::{Hypernet, PretrainTask};
use crate::metrics::{AdaptabilityResult, CostEntry, MetricReport};
use crate::personalize::{refine_anchor, stage1_anchor, TrainConfig};
use crate::synthbench::{gen_task, Dataset, DescriptionVariant, TaskKind, TaskSpec};
use crate::Real;

/// Shot counts of the data-size sweep.
pub const SHOT_SWEEP: [usize; 5] = [1, 5, 10, 30, 50];

/// `n` tasks whose kinds cycle classification, ordinal, generation, with
/// task seeds `base_seed..base_seed + n`.
pub fn task_family(n: usize, base_seed: u64) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| gen_task(TaskKind::ALL[i % TaskKind::ALL.len()], base_seed + i as u64))
        .collect()
}

/// Pretraining data drawn from each task's global rule.
pub fn pretrain_tasks(specs: &[TaskSpec], n_train: usize, n_val: usize, seed: u64) -> Vec<PretrainTask> {
    specs
        .iter()
        .map(|s| PretrainTask {
            name: s.id.clone(),
            description: s.description.clone(),
            train: s.sample_examples(n_train, seed),
            val: s.sample_examples(n_val, seed.wrapping_add(1)),
        })
        .collect()
}

/// Anchor for a dataset's canonical description, optionally refined on its
/// task-level samples.
pub fn dataset_anchor(
    model: &Backbone,
    h: &Hypernet,
    ds: &Dataset,
    refine: Option<&TrainConfig>,
    seed: u64,
) -> Result<AdapterSet> {
    let anchor = stage1_anchor(h, &ds.spec.description, model)?;
    match refine {
        Some(cfg) => {
            let rng = crate::numerics::Rng::new(seed).split(&format!("refine/{}", ds.spec.id));
            refine_anchor(model, &anchor, &ds.task_examples(), cfg, &rng)
        }
        None => Ok(anchor),
    }
}

/// One method over several tasks, folded into a report.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub report: MetricReport,
    pub runs: Vec<MethodRun>,
}

pub fn pipeline(
    model: &Backbone,
    h: &Hypernet,
    datasets: &[Dataset],
    method: Method,
    cfg: &LabConfig,
    refine: Option<&TrainConfig>,
) -> Result<PipelineResult> {
    if datasets.is_empty() {
        return Err(Error::Config("pipeline needs at least one dataset".into()));
    }
    let mut runs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let anchor = dataset_anchor(model, h, ds, refine, cfg.personalize.shuffle_seed)?;
        runs.push(run_method(model, &anchor, ds, method, cfg)?);
    }
    let report = report_for(method.name(), &runs)?;
    Ok(PipelineResult { report, runs })
}

/// Deterministic report body for a set of runs of one method. Wall-clock
/// figures are left out.
pub fn report_for(name: &str, runs: &[MethodRun]) -> Result<MetricReport> {
    let mut report = MetricReport::new(name, runs.iter().map(|r| (r.task.clone(), r.raw)).collect())?;
    for r in runs {
        report.trainable.insert(r.task.clone(), r.trainable);
        let norms: Vec<Real> = r.users.iter().filter_map(|u| u.mean_grad_b).collect();
        if !norms.is_empty() {
            report
                .grad_norms
                .insert(r.task.clone(), norms.iter().sum::<Real>() / norms.len() as Real);
        }
        for u in &r.users {
            if let Some(w) = &u.warning {
                report.notes.push(w.clone());
            }
        }
    }
    Ok(report)
}

/// Wall-clock and parameter figures for the cost table.
pub fn cost_entries(runs: &[MethodRun]) -> Vec<CostEntry> {
    let mut by_method: BTreeMap<&str, (usize, Real)> = BTreeMap::new();
    for r in runs {
        let e = by_method.entry(r.method.name()).or_insert((0, 0.0));
        e.0 = e.0.max(r.trainable);
        e.1 += r.train_seconds;
    }
    by_method
        .into_iter()
        .map(|(m, (n, s))| CostEntry::adam(m, n, BTreeMap::from([("train".to_string(), s)])))
        .collect()
}

/// All bridge ablations and the fresh-LoRA baseline under one config, so
/// every method sees the same shots in the same order.
pub fn ablate(model: &Backbone, anchor: &AdapterSet, ds: &Dataset, cfg: &LabConfig) -> Result<Vec<MethodRun>> {
    Method::ABLATION
        .iter()
        .map(|&m| run_method(model, anchor, ds, m, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub shots: usize,
    pub method: String,
    pub score: Real,
    pub seed: u64,
}

pub fn sweep_shots(
    model: &Backbone,
    anchor: &AdapterSet,
    ds: &Dataset,
    methods: &[Method],
    shots: &[usize],
    cfg: &LabConfig,
) -> Result<Vec<SweepPoint>> {
    let most = shots.iter().copied().max().unwrap_or(0);
    if let Some(u) = ds.target_users().find(|u| u.history.len() < most) {
        return Err(Error::Config(format!(
            "user {} has {} history items, the sweep needs {most}",
            u.id,
            u.history.len()
        )));
    }
    let mut out = Vec::new();
    for &n in shots {
        let mut c = *cfg;
        c.personalize.shots = n;
        for &m in methods {
            let run = run_method(model, anchor, ds, m, &c)?;
            out.push(SweepPoint {
                shots: n,
                method: m.name().to_string(),
                score: run.score,
                seed: cfg.personalize.shuffle_seed,
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("shot,variant,score,seed\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.shots, p.method, p.score, p.seed));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptabilityMatrix {
    pub tasks: Vec<String>,
    /// Anchors regenerated from each target's own description.
    pub prisp: Vec<Vec<AdaptabilityResult>>,
    /// Stage 2 on target users, started from the source task's anchor.
    pub sharer: Vec<Vec<AdaptabilityResult>>,
}

impl AdaptabilityMatrix {
    /// Mean ratio of the sharer rows off the diagonal.
    pub fn sharer_off_diagonal_mean(&self) -> Real {
        let vals: Vec<Real> = self
            .sharer
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != i)
                    .map(|(_, r)| r.ratio)
            })
            .collect();
        vals.iter().sum::<Real>() / vals.len() as Real
    }
}

pub fn adaptability_matrix(
    model: &Backbone,
    h: &Hypernet,
    datasets: &[Dataset],
    cfg: &LabConfig,
) -> Result<AdaptabilityMatrix> {
    if datasets.len() < 2 {
        return Err(Error::Config("adaptability needs at least two tasks".into()));
    }
    let method = Method::Personalized(cfg.personalize.variant);
    let anchors = datasets
        .iter()
        .map(|ds| stage1_anchor(h, &ds.spec.description, model))
        .collect::<Result<Vec<_>>>()?;
    let own: Vec<Real> = datasets
        .iter()
        .zip(&anchors)
        .map(|(ds, a)| Ok(run_method(model, a, ds, method, cfg)?.score))
        .collect::<Result<_>>()?;
    let names: Vec<String> = datasets.iter().map(|d| d.spec.id.clone()).collect();
    let mut prisp = Vec::new();
    let mut sharer = Vec::new();
    for (s, src) in names.iter().enumerate() {
        let mut prow = Vec::new();
        let mut srow = Vec::new();
        for (t, tgt) in names.iter().enumerate() {
            // the target anchor is regenerated from its own description
            prow.push(AdaptabilityResult {
                source: src.clone(),
                target: tgt.clone(),
                source_on_target: own[t],
                target_on_target: own[t],
                ratio: 1.0,
            });
            let reused = if s == t {
                own[t]
            } else {
                run_method(model, &anchors[s], &datasets[t], method, cfg)?.score
            };
            srow.push(AdaptabilityResult::new(src, tgt, reused, own[t])?);
        }
        prisp.push(prow);
        sharer.push(srow);
    }
    Ok(AdaptabilityMatrix {
        tasks: names,
        prisp,
        sharer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub description: String,
    pub text: String,
    pub stage1: Real,
    pub stage2: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub task: String,
    pub rows: Vec<RobustnessRow>,
    pub stage1_spread: Real,
    pub stage2_spread: Real,
}

fn spread(v: impl Iterator<Item = Real> + Clone) -> Real {
    let max = v.clone().fold(Real::NEG_INFINITY, Real::max);
    let min = v.fold(Real::INFINITY, Real::min);
    max - min
}

/// Anchor-only and personalized scores for each description variant.
pub fn robustness(
    model: &Backbone,
    h: &Hypernet,
    ds: &Dataset,
    variants: &[DescriptionVariant],
    cfg: &LabConfig,
) -> Result<RobustnessTable> {
    if variants.is_empty() {
        return Err(Error::Config("no description variants given".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let text = ds.description(v);
        let anchor = stage1_anchor(h, &text, model)?;
        let stage1 = run_method(model, &anchor, ds, Method::Anchor, cfg)?.score;
        let stage2 = run_method(model, &anchor, ds, Method::Personalized(Variant::Ours), cfg)?.score;
        rows.push(RobustnessRow {
            description: v.name().to_string(),
            text,
            stage1,
            stage2,
        });
    }
    Ok(RobustnessTable {
        task: ds.spec.id.clone(),
        stage1_spread: spread(rows.iter().map(|r| r.stage1)),
        stage2_spread: spread(rows.iter().map(|r| r.stage2)),
        rows,
    })
}
