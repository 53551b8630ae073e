use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    gen_task_with_classes, gen_users_with_eval, make_splits, DescriptionVariant, Example, SplitPlan, Splits, SynthUser,
    TaskKind, TaskRule, TaskSpec,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub id: String,
    pub user: String,
    pub input: String,
    pub output: String,
    pub split: String,
}

/// Everything needed to regenerate a task instance, plus the derived
/// description variants and index lists for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_id: String,
    pub kind: TaskKind,
    pub task_seed: u64,
    pub classes: Option<usize>,
    pub n_users: usize,
    pub history_len: usize,
    pub eval_len: usize,
    pub user_seed: u64,
    pub split_seed: u64,
    pub plan: SplitPlan,
    pub description: String,
    pub descriptions: BTreeMap<String, String>,
    pub rule: TaskRule,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub spec: TaskSpec,
    pub users: Vec<SynthUser>,
    pub splits: Splits,
}

/// Parameters of [`Dataset::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub kind: TaskKind,
    pub task_seed: u64,
    pub classes: Option<usize>,
    pub history_len: usize,
    pub eval_len: usize,
    pub user_seed: u64,
    pub split_seed: u64,
    pub plan: SplitPlan,
}

impl Dataset {
    pub fn generate(p: &DatasetParams) -> Result<Self> {
        let spec = match (p.kind, p.classes) {
            (TaskKind::Classification, Some(k)) => gen_task_with_classes(p.kind, p.task_seed, k)?,
            _ => super::gen_task(p.kind, p.task_seed),
        };
        let users = gen_users_with_eval(&spec, p.plan.total_users(), p.history_len, p.eval_len, p.user_seed)?;
        let splits = make_splits(&users, &p.plan, p.split_seed)?;
        let descriptions = [DescriptionVariant::GeneratedStyle, DescriptionVariant::Imprecise]
            .into_iter()
            .map(|v| (v.name().to_string(), spec.perturb_description(v, p.task_seed)))
            .collect();
        let manifest = DatasetManifest {
            task_id: spec.id.clone(),
            kind: p.kind,
            task_seed: p.task_seed,
            classes: p.classes,
            n_users: users.len(),
            history_len: p.history_len,
            eval_len: p.eval_len,
            user_seed: p.user_seed,
            split_seed: p.split_seed,
            plan: p.plan,
            description: spec.description.clone(),
            descriptions,
            rule: spec.rule.clone(),
            splits: splits.clone(),
        };
        Ok(Self {
            manifest,
            spec,
            users,
            splits,
        })
    }

    pub fn params(&self) -> DatasetParams {
        let m = &self.manifest;
        DatasetParams {
            kind: m.kind,
            task_seed: m.task_seed,
            classes: m.classes,
            history_len: m.history_len,
            eval_len: m.eval_len,
            user_seed: m.user_seed,
            split_seed: m.split_seed,
            plan: m.plan,
        }
    }

    pub fn description(&self, variant: DescriptionVariant) -> String {
        self.spec.perturb_description(variant, self.manifest.task_seed)
    }

    pub fn target_users(&self) -> impl Iterator<Item = &SynthUser> {
        self.splits.target_users.iter().map(|&u| &self.users[u])
    }

    pub fn task_examples(&self) -> Vec<Example> {
        self.splits.task_examples(&self.users).into_iter().cloned().collect()
    }

    /// JSONL rows: task samples, then each target user's history and eval.
    pub fn records(&self) -> Vec<JsonlRecord> {
        let mut out = Vec::new();
        for &(u, i) in &self.splits.task {
            let user = &self.users[u];
            let e = &user.history[i];
            out.push(JsonlRecord {
                id: format!("{}-h{i:03}", user.id),
                user: user.id.clone(),
                input: e.input.clone(),
                output: e.output.clone(),
                split: "task".into(),
            });
        }
        for user in self.target_users() {
            for (i, e) in user.history.iter().enumerate() {
                out.push(JsonlRecord {
                    id: format!("{}-h{i:03}", user.id),
                    user: user.id.clone(),
                    input: e.input.clone(),
                    output: e.output.clone(),
                    split: "history".into(),
                });
            }
            for (i, e) in user.eval.iter().enumerate() {
                out.push(JsonlRecord {
                    id: format!("{}-e{i:03}", user.id),
                    user: user.id.clone(),
                    input: e.input.clone(),
                    output: e.output.clone(),
                    split: "eval".into(),
                });
            }
        }
        out
    }

    pub fn jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("records serialize"));
            s.push('\n');
        }
        s
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)? + "\n";
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(DATA_FILE), ds.jsonl())?;
    Ok(())
}

/// Regenerates a dataset from its manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    let p = DatasetParams {
        kind: m.kind,
        task_seed: m.task_seed,
        classes: m.classes,
        history_len: m.history_len,
        eval_len: m.eval_len,
        user_seed: m.user_seed,
        split_seed: m.split_seed,
        plan: m.plan,
    };
    let ds = Dataset::generate(&p)?;
    if ds.manifest != m {
        return Err(Error::Data(format!(
            "manifest in {} does not match its regenerated content",
            dir.display()
        )));
    }
    Ok(ds)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<JsonlRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Groups `history` and `eval` rows by user, keeping file order.
pub fn users_from_records(records: &[JsonlRecord]) -> Vec<(String, Vec<Example>, Vec<Example>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, (Vec<Example>, Vec<Example>)> = BTreeMap::new();
    for r in records {
        let slot = match r.split.as_str() {
            "history" | "eval" => map.entry(r.user.clone()).or_insert_with(|| {
                order.push(r.user.clone());
                Default::default()
            }),
            _ => continue,
        };
        let e = Example {
            input: r.input.clone(),
            output: r.output.clone(),
        };
        if r.split == "history" {
            slot.0.push(e);
        } else {
            slot.1.push(e);
        }
    }
    order
        .into_iter()
        .map(|u| {
            let (h, e) = map.remove(&u).expect("inserted above");
            (u, h, e)
        })
        .collect()
}

/// Schema and consistency check of a generated task directory. Returns the
/// number of JSONL rows.
pub fn validate_dir(dir: &Path) -> Result<usize> {
    let ds = read_dataset(dir)?;
    let records = read_jsonl(&dir.join(DATA_FILE))?;
    for r in &records {
        if !matches!(r.split.as_str(), "task" | "history" | "eval") {
            return Err(Error::Data(format!("record {} has split {:?}", r.id, r.split)));
        }
        for text in [&r.input, &r.output] {
            for c in text.chars() {
                crate::backbone::char_to_id(c)?;
            }
        }
    }
    if records != ds.records() {
        return Err(Error::Data(format!(
            "{} differs from the data regenerated from the manifest",
            dir.join(DATA_FILE).display()
        )));
    }
    for user in ds.target_users() {
        let hist: std::collections::BTreeSet<&str> = user.history.iter().map(|e| e.input.as_str()).collect();
        if user.eval.iter().any(|e| hist.contains(e.input.as_str())) {
            return Err(Error::Data(format!("user {} eval overlaps history", user.id)));
        }
    }
    Ok(records.len())
}
