use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use prisp_core::adapters::DEFAULT_RANK;
use prisp_core::backbone::BackboneConfig;
use prisp_core::hypernet::{HypernetConfig, PretrainConfig, D_TASK, HIDDEN};
use prisp_core::lab::LabConfig;
use prisp_core::personalize::{OppuBase, PersonalizeConfig, TrainConfig};
use prisp_core::synthbench::{SplitPlan, TaskKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PRISP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetSection {
    pub rank: usize,
    pub d_task: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for HypernetSection {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            d_task: D_TASK,
            hidden: HIDDEN,
            seed: 3,
        }
    }
}

/// The synthetic task family used for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySection {
    pub tasks: usize,
    /// Trailing tasks kept out of pretraining.
    pub held_out: usize,
    pub base_seed: u64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub data_seed: u64,
}

impl Default for FamilySection {
    fn default() -> Self {
        Self {
            tasks: 8,
            held_out: 2,
            base_seed: 100,
            train_examples: 200,
            val_examples: 40,
            data_seed: 1,
        }
    }
}

/// Everything besides input files that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub hypernet: HypernetSection,
    pub family: FamilySection,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
    pub plan: SplitPlan,
    pub history_len: usize,
    pub eval_len: usize,
    pub personalize: PersonalizeConfig,
    /// Per-kind learning rates that replace `personalize.lr`.
    pub lr_by_kind: BTreeMap<TaskKind, f64>,
    pub oppu_base: OppuBase,
    /// Anchor refinement on task-level samples before Stage 2.
    pub refine: Option<TrainConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            backbone_seed: 7,
            hypernet: HypernetSection::default(),
            family: FamilySection::default(),
            pretrain: PretrainConfig::default(),
            pretrain_seed: 4,
            plan: SplitPlan::default(),
            history_len: 50,
            eval_len: 10,
            personalize: PersonalizeConfig::default(),
            lr_by_kind: BTreeMap::new(),
            oppu_base: OppuBase::Anchored,
            refine: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(prisp_core::Error::from)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| prisp_core::Error::Config(format!("{}: {e}", p.display())))?;
                Ok(cfg)
            }
        }
    }

    /// Applies `PRISP_SEED` when set; an explicit seed flag wins over both.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| prisp_core::Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        self.personalize.shuffle_seed = self.seed;
        Ok(())
    }

    pub fn hypernet_config(&self) -> HypernetConfig {
        HypernetConfig {
            backbone: self.backbone,
            rank: self.hypernet.rank,
            d_task: self.hypernet.d_task,
            hidden: self.hypernet.hidden,
        }
    }

    /// Lab settings for one task kind.
    pub fn lab(&self, kind: TaskKind) -> LabConfig {
        let mut personalize = self.personalize;
        if let Some(&lr) = self.lr_by_kind.get(&kind) {
            personalize.lr = lr;
        }
        LabConfig {
            personalize,
            oppu_base: self.oppu_base,
            rank: self.hypernet.rank,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(body))
    }
}

/// Stage-2 presets selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Batch 16, lr 1e-4.
    Standard,
    /// Batch 1, lr 1e-2; sized for the toy backbone.
    Desk,
}

impl Profile {
    pub fn apply(self, p: &mut PersonalizeConfig) {
        let preset = match self {
            Profile::Standard => PersonalizeConfig::default(),
            Profile::Desk => PersonalizeConfig::desk(),
        };
        p.batch_size = preset.batch_size;
        p.lr = preset.lr;
    }
}
