//! Evaluation and experiment harnesses.

mod experiments;
mod predict;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experiments::{
    ablate, adaptability_matrix, cost_entries, dataset_anchor, pipeline, pretrain_tasks, report_for, robustness,
    sweep_csv, sweep_shots, task_family, AdaptabilityMatrix, PipelineResult, RobustnessRow, RobustnessTable,
    SweepPoint, SHOT_SWEEP,
};
pub use predict::{predict, rank_candidates};

use crate::adapters::{AdapterSet, Variant, DEFAULT_RANK};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_task, classify_score, ordinal_score, rouge_corpus, RawMetrics};
use crate::personalize::{
    frozen_intact, oppu_baseline, personalize_user, OppuBase, PersonalizeConfig, UserHistory, UserRun,
};
use crate::synthbench::{Dataset, Example, SynthUser, TaskKind, TaskSpec};
use crate::Real;

/// Raw metrics of `adapters` on `examples`.
pub fn evaluate_examples(
    model: &Backbone,
    adapters: Option<&AdapterSet>,
    spec: &TaskSpec,
    examples: &[Example],
) -> Result<RawMetrics> {
    let preds = examples
        .iter()
        .map(|e| predict(model, adapters, spec, &e.input))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<String> = examples.iter().map(|e| e.output.clone()).collect();
    score_predictions(spec, &preds, &golds)
}

pub fn score_predictions(spec: &TaskSpec, preds: &[String], golds: &[String]) -> Result<RawMetrics> {
    Ok(match spec.kind {
        TaskKind::Classification => {
            let labels = spec
                .label_space()
                .ok_or_else(|| Error::Internal("classification task without labels".into()))?;
            let (accuracy, f1) = classify_score(preds, golds, &labels)?;
            RawMetrics::Classification { accuracy, f1 }
        }
        TaskKind::Ordinal => {
            let (mae, rmse) = ordinal_score(preds, golds)?;
            RawMetrics::Ordinal { mae, rmse }
        }
        TaskKind::Generation => {
            let (rouge1, rouge_l) = rouge_corpus(preds, golds)?;
            RawMetrics::Generation { rouge1, rouge_l }
        }
    })
}

/// How the per-user model is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Backbone alone.
    Base,
    /// Task anchor, no user training.
    Anchor,
    /// Anchor plus Stage-2 training of the variant's factors.
    Personalized(Variant),
    /// Fresh per-user LoRA.
    Oppu,
}

impl Method {
    /// The four bridge ablations followed by the fresh-LoRA baseline.
    pub const ABLATION: [Method; 5] = [
        Method::Personalized(Variant::FullLora),
        Method::Personalized(Variant::NoBridge),
        Method::Personalized(Variant::BridgeOnly),
        Method::Personalized(Variant::Ours),
        Method::Oppu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Anchor => "anchor",
            Method::Personalized(v) => v.name(),
            Method::Oppu => "oppu",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Method::Base),
            "anchor" => Ok(Method::Anchor),
            "oppu" => Ok(Method::Oppu),
            other => other.parse::<Variant>().map(|v| match v {
                Variant::OppuFresh => Method::Oppu,
                v => Method::Personalized(v),
            }),
        }
    }
}

/// Everything a method run needs besides the model, anchor and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub personalize: PersonalizeConfig,
    pub oppu_base: OppuBase,
    pub rank: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            personalize: PersonalizeConfig::default(),
            oppu_base: OppuBase::Anchored,
            rank: DEFAULT_RANK,
        }
    }
}

impl LabConfig {
    pub fn desk() -> Self {
        Self {
            personalize: PersonalizeConfig::desk(),
            ..Self::default()
        }
    }
}

/// One user's share of a method run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: String,
    pub steps: usize,
    pub shots_used: usize,
    pub mean_grad_b: Option<Real>,
    pub mean_grad_c: Option<Real>,
    pub warning: Option<String>,
    /// Every factor outside the trainable mask still equals its start.
    pub frozen_intact: bool,
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub task: String,
    pub raw: RawMetrics,
    pub score: Real,
    /// Trainable entries of one user's adapters.
    pub trainable: usize,
    pub train_seconds: Real,
    pub users: Vec<UserOutcome>,
    pub adapters: Vec<(String, AdapterSet)>,
}

impl MethodRun {
    pub fn total_steps(&self) -> usize {
        self.users.iter().map(|u| u.steps).sum()
    }
}

struct UserJob {
    outcome: UserOutcome,
    adapters: Option<AdapterSet>,
    preds: Vec<String>,
    golds: Vec<String>,
    seconds: Real,
    trainable: usize,
}

fn outcome(user: &SynthUser, run: &UserRun, intact: bool) -> UserOutcome {
    UserOutcome {
        user: user.id.clone(),
        steps: run.log.steps,
        shots_used: run.shots_used,
        mean_grad_b: run.log.trace.mean_b(),
        mean_grad_c: run.log.trace.mean_c(),
        warning: run.warning.clone(),
        frozen_intact: intact,
    }
}

fn run_user(
    model: &Backbone,
    anchor: &AdapterSet,
    spec: &TaskSpec,
    user: &SynthUser,
    method: Method,
    cfg: &LabConfig,
) -> Result<UserJob> {
    let history = UserHistory::from(user);
    let start = Instant::now();
    let (host, adapters, out, trainable): (Cow<'_, Backbone>, Option<AdapterSet>, UserOutcome, usize) = match method {
        Method::Base | Method::Anchor => {
            let set = (method == Method::Anchor).then(|| anchor.clone());
            let out = UserOutcome {
                user: user.id.clone(),
                steps: 0,
                shots_used: 0,
                mean_grad_b: None,
                mean_grad_c: None,
                warning: None,
                frozen_intact: true,
            };
            (Cow::Borrowed(model), set, out, 0)
        }
        Method::Personalized(variant) => {
            let pcfg = cfg.personalize.with_variant(variant);
            let run = personalize_user(model, anchor, &history, &pcfg)?;
            let intact = frozen_intact(anchor, &run.adapters);
            let n = run.adapters.trainable_param_count();
            let out = outcome(user, &run, intact);
            (Cow::Borrowed(model), Some(run.adapters), out, n)
        }
        Method::Oppu => {
            let base = (cfg.oppu_base == OppuBase::Anchored).then_some(anchor);
            let pcfg = cfg.personalize.with_variant(Variant::OppuFresh);
            let res = oppu_baseline(model, base, &history, &pcfg, cfg.rank)?;
            let n = res.run.adapters.trainable_param_count();
            let out = outcome(user, &res.run, true);
            (Cow::Owned(res.model), Some(res.run.adapters), out, n)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let preds = user
        .eval
        .iter()
        .map(|e| predict(&host, adapters.as_ref(), spec, &e.input))
        .collect::<Result<Vec<_>>>()?;
    let golds = user.eval.iter().map(|e| e.output.clone()).collect();
    Ok(UserJob {
        outcome: out,
        adapters,
        preds,
        golds,
        seconds,
        trainable,
    })
}

/// Runs `method` for every target user of `ds` and scores the pooled eval
/// predictions.
pub fn run_method(
    model: &Backbone,
    anchor: &AdapterSet,
    ds: &Dataset,
    method: Method,
    cfg: &LabConfig,
) -> Result<MethodRun> {
    let users: Vec<&SynthUser> = ds.target_users().collect();
    if users.is_empty() {
        return Err(Error::Data("dataset has no target users".into()));
    }
    let jobs = users
        .par_iter()
        .map(|u| run_user(model, anchor, &ds.spec, u, method, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut out = Vec::with_capacity(jobs.len());
    let mut adapters = Vec::new();
    let mut seconds = 0.0;
    let mut trainable = 0;
    for job in jobs {
        preds.extend(job.preds);
        golds.extend(job.golds);
        seconds += job.seconds;
        trainable = job.trainable;
        if let (Some(set), Method::Personalized(_) | Method::Oppu) = (job.adapters, method) {
            adapters.push((job.outcome.user.clone(), set));
        }
        out.push(job.outcome);
    }
    let raw = score_predictions(&ds.spec, &preds, &golds)?;
    let score = aggregate_task(ds.spec.kind, &raw)?;
    Ok(MethodRun {
        method,
        task: ds.spec.id.clone(),
        raw,
        score,
        trainable,
        train_seconds: seconds,
        users: out,
        adapters,
    })
}

#[cfg(test)]
mod tests;
