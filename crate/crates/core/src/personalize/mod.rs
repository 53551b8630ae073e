mod train;

use serde::{Deserialize, Serialize};

pub use train::{batch_gradients, train_adapters, GradTrace, TrainConfig, TrainLog};

use crate::adapters::{AdapterSet, Variant};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::numerics::{OptimizerConfig, Rng};
use crate::synthbench::{Example, SynthUser};
use crate::{Matrix, Real};

/// Stage-2 schedule for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizeConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub shots: usize,
    pub shuffle_seed: u64,
    /// Apply adapter input dropout while training.
    pub dropout: bool,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ours,
            epochs: 1,
            batch_size: 16,
            lr: 1e-4,
            shots: 10,
            shuffle_seed: 0,
            dropout: true,
        }
    }
}

impl PersonalizeConfig {
    /// Schedule tuned for the toy backbone: the default one-step run at
    /// lr 1e-4 barely moves a 64-wide model, so this takes one example per
    /// step and a larger step size.
    pub fn desk() -> Self {
        Self {
            batch_size: 1,
            lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig::adamw(self.lr),
            dropout: self.dropout,
        }
    }

    /// Per-user stream: shuffling and dropout for user `id` never depend on
    /// which other users run.
    pub fn user_rng(&self, id: &str) -> Rng {
        Rng::new(self.shuffle_seed).split(&format!("user/{id}"))
    }
}

/// A user's interaction log, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub id: String,
    pub items: Vec<Example>,
}

impl UserHistory {
    pub fn new(id: impl Into<String>, items: Vec<Example>) -> Self {
        Self { id: id.into(), items }
    }

    /// The `shots` most recent items, in order.
    pub fn suffix(&self, shots: usize) -> &[Example] {
        let n = self.items.len();
        &self.items[n - shots.min(n)..]
    }
}

impl From<&SynthUser> for UserHistory {
    fn from(u: &SynthUser) -> Self {
        Self::new(u.id.clone(), u.history.clone())
    }
}

/// Outcome of one user's Stage-2 run.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRun {
    pub adapters: AdapterSet,
    pub log: TrainLog,
    pub shots_used: usize,
    pub warning: Option<String>,
}

/// Task-level anchor for `description`.
pub fn stage1_anchor(h: &Hypernet, description: &str, model: &Backbone) -> Result<AdapterSet> {
    h.generate_anchor(description, model.config())
}

/// Further trains the raw pair of `anchor` on task data; the result is
/// again an anchor.
pub fn refine_anchor(
    model: &Backbone,
    anchor: &AdapterSet,
    task_data: &[Example],
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<AdapterSet> {
    if task_data.is_empty() {
        return Err(Error::Data("anchor refinement needs task data".into()));
    }
    if cfg.epochs == 0 {
        return Ok(anchor.clone());
    }
    let mut set = anchor.to_anchor().with_variant(Variant::FullLora);
    train_adapters(model, &mut set, task_data, cfg, &rng.split("refine"))?;
    Ok(set.to_anchor())
}

fn select_shots<'h>(history: &'h UserHistory, cfg: &PersonalizeConfig) -> Result<(&'h [Example], Option<String>)> {
    cfg.validate()?;
    if history.items.is_empty() {
        return Err(Error::Data(format!("user {} has an empty history", history.id)));
    }
    let warning = (cfg.shots > history.items.len()).then(|| {
        format!(
            "user {} has {} items, fewer than the {} shots requested; using all",
            history.id,
            history.items.len(),
            cfg.shots
        )
    });
    Ok((history.suffix(cfg.shots), warning))
}

/// Stage 2: wraps the anchor for `cfg.variant` and trains it on the user's
/// most recent items.
pub fn personalize_user(
    model: &Backbone,
    anchor: &AdapterSet,
    history: &UserHistory,
    cfg: &PersonalizeConfig,
) -> Result<UserRun> {
    let (shots, warning) = select_shots(history, cfg)?;
    anchor.check_against(model.config())?;
    let mut set = anchor.to_anchor().with_variant(cfg.variant);
    let log = if cfg.epochs == 0 {
        TrainLog::default()
    } else {
        train_adapters(model, &mut set, shots, &cfg.train_config(), &cfg.user_rng(&history.id))?.0
    };
    Ok(UserRun {
        adapters: set,
        log,
        shots_used: shots.len(),
        warning,
    })
}

/// True when every factor of `trained` outside its mask still equals the
/// start point derived from `anchor` (bridges start at identity).
pub fn frozen_intact(anchor: &AdapterSet, trained: &AdapterSet) -> bool {
    let start = anchor.to_anchor();
    if start.len() != trained.len() {
        return false;
    }
    trained.iter().all(|(&(layer, site), m)| {
        let Some(s) = start.get(layer, site) else {
            return false;
        };
        let a_ok = m.mask.a || m.pair.a.bits_eq(&s.pair.a);
        let b_ok = m.mask.b || m.pair.b.bits_eq(&s.pair.b);
        let c_ok = m.mask.c || m.c.as_ref().is_none_or(|c| c.bits_eq(&Matrix::identity(c.rows())));
        a_ok && b_ok && c_ok
    })
}

/// Which model the per-user fresh LoRA trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OppuBase {
    Base,
    Anchored,
}

impl std::str::FromStr for OppuBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "anchored" => Ok(Self::Anchored),
            other => Err(Error::Config(format!("unknown OPPU base {other:?}"))),
        }
    }
}

/// Fresh per-user LoRA and the backbone it runs on.
#[derive(Debug, Clone)]
pub struct OppuRun {
    pub model: Backbone,
    pub run: UserRun,
}

/// Independent per-user LoRA trained from a fresh init on the same shots
/// and schedule. With `anchor`, the anchor is first folded into the
/// backbone weights.
pub fn oppu_baseline(
    model: &Backbone,
    anchor: Option<&AdapterSet>,
    history: &UserHistory,
    cfg: &PersonalizeConfig,
    rank: usize,
) -> Result<OppuRun> {
    let (shots, warning) = select_shots(history, cfg)?;
    let host = match anchor {
        Some(a) => model.merged(a)?,
        None => model.clone(),
    };
    let rng = cfg.user_rng(&history.id);
    let mut set = AdapterSet::fresh(model.config(), rank, &rng.split("oppu-init"))?;
    let log = if cfg.epochs == 0 {
        TrainLog::default()
    } else {
        train_adapters(&host, &mut set, shots, &cfg.train_config(), &rng)?.0
    };
    Ok(OppuRun {
        model: host,
        run: UserRun {
            adapters: set,
            log,
            shots_used: shots.len(),
            warning,
        },
    })
}

/// Paired B-gradient traces for the bridged and bridge-free variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    pub ours: GradTrace,
    pub no_bridge: GradTrace,
    pub mean_ours: Real,
    pub mean_no_bridge: Real,
    pub ratio: Real,
}

/// Runs Ours and NoBridge with batch size 1 and identical seeds.
pub fn grad_norm_compare(
    model: &Backbone,
    anchor: &AdapterSet,
    history: &UserHistory,
    cfg: &PersonalizeConfig,
) -> Result<GradComparison> {
    let base = PersonalizeConfig { batch_size: 1, ..*cfg };
    let ours = personalize_user(model, anchor, history, &base.with_variant(Variant::Ours))?;
    let plain = personalize_user(model, anchor, history, &base.with_variant(Variant::NoBridge))?;
    let (ours, no_bridge) = (ours.log.trace, plain.log.trace);
    if ours.len() != no_bridge.len() {
        return Err(Error::Internal(format!(
            "trace lengths differ: {} vs {}",
            ours.len(),
            no_bridge.len()
        )));
    }
    let missing = || Error::Data("no optimizer steps were taken".into());
    let mean_ours = ours.mean_b().ok_or_else(missing)?;
    let mean_no_bridge = no_bridge.mean_b().ok_or_else(missing)?;
    Ok(GradComparison {
        ratio: mean_ours / mean_no_bridge,
        ours,
        no_bridge,
        mean_ours,
        mean_no_bridge,
    })
}

#[cfg(test)]
mod tests;
