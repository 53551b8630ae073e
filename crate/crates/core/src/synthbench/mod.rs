//! Synthetic few-shot personalization tasks with biased users.

mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub use io::{
    read_dataset, read_jsonl, users_from_records, validate_dir, write_dataset, Dataset, DatasetManifest, DatasetParams,
    JsonlRecord, DATA_FILE, MANIFEST_FILE,
};

/// Minimum history length so every shot count in the sweep is available.
pub const MIN_HISTORY: usize = 50;
pub const DEFAULT_EVAL_PER_USER: usize = 10;
/// Largest classification label space.
pub const MAX_CLASSES: usize = 15;

const CLASS_INPUT_LEN: usize = 9;
const ORDINAL_INPUT_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Ordinal,
    Generation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Classification, TaskKind::Ordinal, TaskKind::Generation];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Ordinal => "ordinal",
            TaskKind::Generation => "generation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "class" | "c" => Ok(TaskKind::Classification),
            "ordinal" | "rating" | "o" => Ok(TaskKind::Ordinal),
            "generation" | "gen" | "g" => Ok(TaskKind::Generation),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Global rule shared by every user of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TaskRule {
    /// Label is the uppercase form of the majority letter.
    Classification { classes: Vec<char> },
    /// Score is `clip(count(target) + 1, 1, 5)`.
    Ordinal { pool: Vec<char>, target: char },
    /// Output is the uppercased letters, reversed or in input order.
    Generation { pool: Vec<char>, reverse: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptionVariant {
    Canonical,
    GeneratedStyle,
    Imprecise,
}

impl DescriptionVariant {
    pub const ALL: [DescriptionVariant; 3] = [
        DescriptionVariant::Canonical,
        DescriptionVariant::GeneratedStyle,
        DescriptionVariant::Imprecise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DescriptionVariant::Canonical => "canonical",
            DescriptionVariant::GeneratedStyle => "generated-style",
            DescriptionVariant::Imprecise => "imprecise",
        }
    }
}

impl FromStr for DescriptionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "generated-style" | "generated" => Ok(Self::GeneratedStyle),
            "imprecise" => Ok(Self::Imprecise),
            other => Err(Error::Config(format!("unknown description variant {other:?}"))),
        }
    }
}

/// Description split into clauses; the first word of the first clause is
/// the task verb.
#[derive(Debug, Clone)]
struct Clauses {
    parts: Vec<String>,
    /// Words that identify the rule.
    rule_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub rule: TaskRule,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
}

fn letters(pool: &[char]) -> String {
    pool.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

fn lowercase_pool(rng: &mut Rng, n: usize, exclude: &[char]) -> Vec<char> {
    let avail: Vec<char> = ('a'..='z').filter(|c| !exclude.contains(c)).collect();
    let mut idx = rng.sample_indices(avail.len(), n);
    idx.sort_unstable();
    idx.into_iter().map(|i| avail[i]).collect()
}

/// Task with `K` classes for classification (ignored for other kinds).
pub fn gen_task_with_classes(kind: TaskKind, seed: u64, classes: usize) -> Result<TaskSpec> {
    let mut rng = Rng::new(seed).split(&format!("task/{kind}"));
    let rule = match kind {
        TaskKind::Classification => {
            if !(2..=MAX_CLASSES).contains(&classes) {
                return Err(Error::Config(format!(
                    "class count {classes} outside 2..={MAX_CLASSES}"
                )));
            }
            TaskRule::Classification {
                classes: lowercase_pool(&mut rng, classes, &[]),
            }
        }
        TaskKind::Ordinal => {
            let pool = lowercase_pool(&mut rng, 4, &[]);
            let target = pool[rng.below(pool.len())];
            TaskRule::Ordinal { pool, target }
        }
        TaskKind::Generation => TaskRule::Generation {
            pool: lowercase_pool(&mut rng, 6, &[]),
            reverse: rng.bernoulli(0.5),
        },
    };
    let mut spec = TaskSpec {
        id: format!("{}-{seed}", kind.name()),
        kind,
        seed,
        rule,
        description: String::new(),
    };
    spec.description = spec.clauses().parts.join(" ");
    Ok(spec)
}

/// Deterministic task for `(kind, seed)`; classification draws 3 to 5 classes.
pub fn gen_task(kind: TaskKind, seed: u64) -> TaskSpec {
    let classes = 3 + Rng::new(seed).split("task/classes").below(3);
    gen_task_with_classes(kind, seed, classes).expect("class count in range")
}

impl TaskSpec {
    fn clauses(&self) -> Clauses {
        match &self.rule {
            TaskRule::Classification { classes } => {
                let ls = letters(classes);
                let mut rule_tokens = vec!["classify".to_string(), "majority".to_string()];
                rule_tokens.extend(classes.iter().map(|c| c.to_string()));
                Clauses {
                    parts: vec![
                        "classify each string".into(),
                        format!("by its majority letter among {ls}"),
                        "and answer with that letter in uppercase".into(),
                    ],
                    rule_tokens,
                }
            }
            TaskRule::Ordinal { pool, target } => Clauses {
                parts: vec![
                    "rate each string from 1 to 5".into(),
                    format!("by counting the letter {target} plus one"),
                    format!("over letters {}", letters(pool)),
                ],
                rule_tokens: vec!["rate".into(), "counting".into(), target.to_string()],
            },
            TaskRule::Generation { pool, reverse } => {
                let order = if *reverse { "reverse" } else { "same" };
                Clauses {
                    parts: vec![
                        "rewrite each list of letters".into(),
                        format!("in {order} order"),
                        format!("as uppercase letters from {}", letters(pool)),
                    ],
                    rule_tokens: vec!["rewrite".into(), order.into(), "uppercase".into()],
                }
            }
        }
    }

    /// Words that pin down the global rule.
    pub fn rule_tokens(&self) -> Vec<String> {
        self.clauses().rule_tokens
    }

    /// Candidate outputs for tasks scored by label, in label order.
    pub fn label_space(&self) -> Option<Vec<String>> {
        match &self.rule {
            TaskRule::Classification { classes } => {
                Some(classes.iter().map(|c| c.to_ascii_uppercase().to_string()).collect())
            }
            TaskRule::Ordinal { .. } => Some((1..=5).map(|s| s.to_string()).collect()),
            TaskRule::Generation { .. } => None,
        }
    }

    /// Longest output the rule can produce, in characters.
    pub fn max_output_len(&self) -> usize {
        match &self.rule {
            TaskRule::Generation { .. } => 2 * 6 + 1,
            _ => 1,
        }
    }

    fn random_input(&self, rng: &mut Rng) -> String {
        match &self.rule {
            TaskRule::Classification { classes } => loop {
                let s: Vec<char> = (0..CLASS_INPUT_LEN)
                    .map(|_| classes[rng.below(classes.len())])
                    .collect();
                let counts = class_counts(classes, &s);
                let max = *counts.iter().max().expect("nonempty");
                if counts.iter().filter(|&&c| c == max).count() == 1 {
                    break s.into_iter().collect();
                }
            },
            TaskRule::Ordinal { pool, .. } => (0..ORDINAL_INPUT_LEN).map(|_| pool[rng.below(pool.len())]).collect(),
            TaskRule::Generation { pool, .. } => {
                let n = 3 + rng.below(3);
                let picks: Vec<String> = (0..n).map(|_| pool[rng.below(pool.len())].to_string()).collect();
                picks.join(" ")
            }
        }
    }

    /// `n` fresh inputs labeled by the global rule.
    pub fn sample_examples(&self, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = Rng::new(seed).split(&format!("global/{}", self.id));
        (0..n)
            .map(|_| {
                let input = self.random_input(&mut rng);
                Example {
                    output: self.global_output(&input),
                    input,
                }
            })
            .collect()
    }

    /// Output of the global rule.
    pub fn global_output(&self, input: &str) -> String {
        self.user_output(input, &UserBias::Neutral)
    }

    /// Output of the global rule composed with a user bias.
    pub fn user_output(&self, input: &str, bias: &UserBias) -> String {
        match (&self.rule, bias) {
            (TaskRule::Classification { classes }, bias) => {
                let chars: Vec<char> = input.chars().collect();
                let counts = class_counts(classes, &chars);
                let max = *counts.iter().max().unwrap_or(&0);
                let mut pick = counts.iter().position(|&c| c == max).unwrap_or(0);
                if let UserBias::Tilt { favored, strength } = bias {
                    if counts[*favored] + strength >= max {
                        pick = *favored;
                    }
                }
                classes[pick].to_ascii_uppercase().to_string()
            }
            (TaskRule::Ordinal { target, .. }, bias) => {
                let count = input.chars().filter(|c| c == target).count() as i64;
                let offset = match bias {
                    UserBias::Offset(o) => *o as i64,
                    _ => 0,
                };
                (count + 1 + offset).clamp(1, 5).to_string()
            }
            (TaskRule::Generation { reverse, .. }, bias) => {
                let mut toks: Vec<char> = input.split(' ').filter_map(|t| t.chars().next()).collect();
                if *reverse {
                    toks.reverse();
                }
                let mut out: Vec<String> = Vec::with_capacity(toks.len() + 1);
                if let UserBias::Style { tag, swap } = bias {
                    out.push(tag.to_string());
                    for t in &mut toks {
                        if let Some((from, to)) = swap {
                            if t == from {
                                *t = *to;
                            }
                        }
                    }
                }
                out.extend(toks.iter().map(|c| c.to_ascii_uppercase().to_string()));
                out.join(" ")
            }
        }
    }

    /// Canonical, paraphrased or degraded description.
    pub fn perturb_description(&self, variant: DescriptionVariant, seed: u64) -> String {
        let clauses = self.clauses();
        let mut rng = Rng::new(seed).split(&format!("describe/{}/{}", self.id, variant.name()));
        match variant {
            DescriptionVariant::Canonical => self.description.clone(),
            DescriptionVariant::GeneratedStyle => {
                // Reorder the trailing clauses and swap one filler word.
                let mut parts = clauses.parts.clone();
                let tail = &mut parts[1..];
                tail.rotate_left(1 + rng.below(tail.len().max(1)) % tail.len().max(1));
                let fillers = [("each", "every"), ("and ", ""), ("the ", "")];
                let (from, to) = fillers[rng.below(fillers.len())];
                let text = parts.join(" ");
                match text.find(from) {
                    Some(pos) => format!("{}{}{}", &text[..pos], to, &text[pos + from.len()..]),
                    None => text,
                }
            }
            DescriptionVariant::Imprecise => {
                // The task verb is the token the description hinges on.
                let verb = &clauses.rule_tokens[0];
                let vague = ["handle", "process", "treat"];
                let mut words: Vec<String> = self.description.split(' ').map(str::to_string).collect();
                let pos = words.iter().position(|w| w == verb).expect("verb present");
                if rng.bernoulli(0.5) {
                    words.remove(pos);
                } else {
                    words[pos] = vague[rng.below(vague.len())].to_string();
                }
                words.join(" ")
            }
        }
    }
}

fn class_counts(classes: &[char], s: &[char]) -> Vec<usize> {
    classes.iter().map(|c| s.iter().filter(|x| *x == c).count()).collect()
}

/// How a user departs from the global rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum UserBias {
    Neutral,
    /// Prefers class `favored` whenever it is within `strength` of the top.
    Tilt {
        favored: usize,
        strength: usize,
    },
    /// Shifts every rating.
    Offset(i32),
    /// Prefixes a tag letter and optionally substitutes one letter.
    Style {
        tag: char,
        swap: Option<(char, char)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthUser {
    pub id: String,
    pub bias: UserBias,
    /// Oldest first.
    pub history: Vec<Example>,
    pub eval: Vec<Example>,
}

impl SynthUser {
    /// The `shots` most recent history items, in order.
    pub fn shot_suffix(&self, shots: usize) -> &[Example] {
        let n = self.history.len();
        &self.history[n - shots.min(n)..]
    }
}

fn draw_bias(spec: &TaskSpec, rng: &mut Rng) -> UserBias {
    match &spec.rule {
        TaskRule::Classification { classes } => UserBias::Tilt {
            favored: rng.below(classes.len()),
            strength: 1 + rng.below(2),
        },
        TaskRule::Ordinal { .. } => UserBias::Offset(if rng.bernoulli(0.5) { 1 } else { -1 }),
        TaskRule::Generation { pool, .. } => {
            let upper: Vec<char> = pool.iter().map(|c| c.to_ascii_uppercase()).collect();
            let tags: Vec<char> = ('A'..='Z').filter(|c| !upper.contains(c)).collect();
            let tag = tags[rng.below(tags.len())];
            let swap = rng.bernoulli(0.5).then(|| {
                let i = rng.below(pool.len());
                let j = (i + 1 + rng.below(pool.len() - 1)) % pool.len();
                (pool[i], pool[j])
            });
            UserBias::Style { tag, swap }
        }
    }
}

/// Users with biased histories (oldest first) and disjoint eval queries.
pub fn gen_users_with_eval(
    spec: &TaskSpec,
    n_users: usize,
    history_len: usize,
    eval_len: usize,
    seed: u64,
) -> Result<Vec<SynthUser>> {
    if n_users == 0 {
        return Err(Error::Config("need at least one user".into()));
    }
    if history_len < MIN_HISTORY {
        return Err(Error::Config(format!(
            "history length {history_len} is below the minimum of {MIN_HISTORY}"
        )));
    }
    let root = Rng::new(seed).split(&format!("users/{}", spec.id));
    (0..n_users)
        .map(|u| {
            let mut bias_rng = root.split_indexed("bias", u as u64);
            let bias = draw_bias(spec, &mut bias_rng);
            let mut rng = root.split_indexed("data", u as u64);
            let history: Vec<Example> = (0..history_len)
                .map(|_| {
                    let input = spec.random_input(&mut rng);
                    Example {
                        output: spec.user_output(&input, &bias),
                        input,
                    }
                })
                .collect();
            let seen: BTreeSet<&str> = history.iter().map(|e| e.input.as_str()).collect();
            let mut eval = Vec::with_capacity(eval_len);
            let mut tries = 0;
            while eval.len() < eval_len {
                tries += 1;
                if tries > 1000 * eval_len.max(1) {
                    return Err(Error::Data("cannot draw enough unseen eval inputs".into()));
                }
                let input = spec.random_input(&mut rng);
                if seen.contains(input.as_str()) {
                    continue;
                }
                eval.push(Example {
                    output: spec.user_output(&input, &bias),
                    input,
                });
            }
            Ok(SynthUser {
                id: format!("u{u:03}"),
                bias,
                history,
                eval,
            })
        })
        .collect()
}

pub fn gen_users(spec: &TaskSpec, n_users: usize, history_len: usize, seed: u64) -> Result<Vec<SynthUser>> {
    gen_users_with_eval(spec, n_users, history_len, DEFAULT_EVAL_PER_USER, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    /// Task-level samples drawn from sharer users.
    pub task_samples: usize,
    /// Most recent history items per target user.
    pub shots: usize,
    pub target_users: usize,
    pub sharer_users: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            task_samples: 50,
            shots: 10,
            target_users: 8,
            sharer_users: 4,
        }
    }
}

impl SplitPlan {
    pub fn total_users(&self) -> usize {
        self.target_users + self.sharer_users
    }
}

/// Index lists that define one experiment's data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    /// `(user index, history index)` pairs drawn from sharer users.
    pub task: Vec<(usize, usize)>,
    pub target_users: Vec<usize>,
    /// Per target user, history indices of the shot suffix.
    pub shots: Vec<Vec<usize>>,
    /// Per target user, eval indices.
    pub eval: Vec<Vec<usize>>,
}

impl Splits {
    pub fn task_examples<'u>(&self, users: &'u [SynthUser]) -> Vec<&'u Example> {
        self.task.iter().map(|&(u, i)| &users[u].history[i]).collect()
    }
}

pub fn make_splits(users: &[SynthUser], plan: &SplitPlan, seed: u64) -> Result<Splits> {
    if plan.task_samples == 0 || plan.shots == 0 || plan.target_users == 0 {
        return Err(Error::Config("split budgets must be at least 1".into()));
    }
    if plan.total_users() > users.len() {
        return Err(Error::Config(format!(
            "plan needs {} users, only {} generated",
            plan.total_users(),
            users.len()
        )));
    }
    let target: Vec<usize> = (0..plan.target_users).collect();
    let sharers: Vec<usize> = (plan.target_users..plan.total_users()).collect();
    let pool: Vec<(usize, usize)> = sharers
        .iter()
        .flat_map(|&u| (0..users[u].history.len()).map(move |i| (u, i)))
        .collect();
    if plan.task_samples > pool.len() {
        return Err(Error::Config(format!(
            "task budget {} exceeds the {} sharer items",
            plan.task_samples,
            pool.len()
        )));
    }
    let mut rng = Rng::new(seed).split("splits/task");
    let mut picks = rng.sample_indices(pool.len(), plan.task_samples);
    picks.sort_unstable();
    let task = picks.into_iter().map(|k| pool[k]).collect();
    let mut shots = Vec::new();
    let mut eval = Vec::new();
    for &u in &target {
        let n = users[u].history.len();
        if plan.shots > n {
            return Err(Error::Config(format!(
                "{} shots requested but user {} has {n} items",
                plan.shots, users[u].id
            )));
        }
        shots.push((n - plan.shots..n).collect());
        eval.push((0..users[u].eval.len()).collect());
    }
    Ok(Splits {
        task,
        target_users: target,
        shots,
        eval,
    })
}
