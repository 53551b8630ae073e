use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};
use prisp_core::adapters::{AdapterSet, Role, Variant};
use prisp_core::backbone::Backbone;
use prisp_core::hypernet::{pretrain_hypernet, Hypernet};
use prisp_core::lab::{self, LabConfig, Method, MethodRun, UserOutcome};
use prisp_core::metrics::{cost_report, MetricReport, RawMetrics};
use prisp_core::numerics::Rng;
use prisp_core::personalize::{frozen_intact, personalize_user, stage1_anchor, GradTrace, UserHistory};
use prisp_core::synthbench::{
    self, read_dataset, read_jsonl, users_from_records, Dataset, DatasetParams, DescriptionVariant, SplitPlan,
    TaskKind, DATA_FILE, MANIFEST_FILE,
};
use prisp_core::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::RunDir;
use crate::{GlobalArgs, ModelArgs, ReportFormat, TrainArgs};

pub const BACKBONE_FILE: &str = "backbone.prsp";
pub const HYPERNET_FILE: &str = "hypernet.prsp";
pub const ANCHOR_FILE: &str = "anchor.prsp";
pub const REPORT_FILE: &str = "report.json";

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Config file, then seed sources, then profile, then per-flag overrides.
fn effective_config(g: &GlobalArgs, train: Option<&TrainArgs>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    cfg.apply_seed(g.seed)?;
    if let Some(p) = g.profile {
        p.apply(&mut cfg.personalize);
    }
    if let Some(t) = train {
        let p = &mut cfg.personalize;
        p.shots = t.shots.unwrap_or(p.shots);
        p.epochs = t.epochs.unwrap_or(p.epochs);
        p.lr = t.lr.unwrap_or(p.lr);
        p.batch_size = t.batch_size.unwrap_or(p.batch_size);
        p.validate()?;
    }
    Ok(cfg)
}

struct Model {
    backbone: Backbone,
    hypernet: Hypernet,
}

fn load_model(dir: &Path, cfg: &RunConfig, run: &mut RunDir) -> Result<Model> {
    let bp = dir.join(BACKBONE_FILE);
    let hp = dir.join(HYPERNET_FILE);
    let backbone = Backbone::load(&bp).with_context(|| format!("loading {}", bp.display()))?;
    let hypernet = Hypernet::load(&hp).with_context(|| format!("loading {}", hp.display()))?;
    if hypernet.config().backbone != *backbone.config() {
        return Err(config_err(
            "hypernetwork and backbone files disagree on the backbone shape",
        ));
    }
    if cfg.backbone != *backbone.config() {
        return Err(config_err(format!(
            "config backbone {:?} does not match the model in {}",
            cfg.backbone,
            dir.display()
        )));
    }
    run.input(BACKBONE_FILE, &bp)?;
    run.input(HYPERNET_FILE, &hp)?;
    Ok(Model { backbone, hypernet })
}

fn load_bench(dir: &Path, run: &mut RunDir) -> Result<Dataset> {
    let ds = read_dataset(dir).with_context(|| format!("reading benchmark {}", dir.display()))?;
    run.input(&format!("{}/{MANIFEST_FILE}", ds.spec.id), &dir.join(MANIFEST_FILE))?;
    Ok(ds)
}

fn load_benches(args: &ModelArgs, run: &mut RunDir) -> Result<Vec<Dataset>> {
    args.benches.iter().map(|b| load_bench(b, run)).collect()
}

fn anchor_for(m: &Model, ds: &Dataset, cfg: &RunConfig) -> Result<AdapterSet> {
    Ok(lab::dataset_anchor(
        &m.backbone,
        &m.hypernet,
        ds,
        cfg.refine.as_ref(),
        cfg.seed,
    )?)
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> Result<T> {
    Ok(s.parse::<T>()?)
}

pub fn gen_bench(
    g: &GlobalArgs,
    kind: &str,
    users: usize,
    task_seed: Option<u64>,
    classes: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = effective_config(g, None)?;
    let kind: TaskKind = parse(kind)?;
    if users < 2 {
        return Err(config_err("need at least 2 users: one target and one sharer"));
    }
    let sharers = (users / 3).max(1);
    let index = TaskKind::ALL.iter().position(|&k| k == kind).expect("kind is listed") as u64;
    let params = DatasetParams {
        kind,
        task_seed: task_seed.unwrap_or(cfg.family.base_seed + index),
        classes,
        history_len: cfg.history_len,
        eval_len: cfg.eval_len,
        user_seed: cfg.seed,
        split_seed: cfg.seed.wrapping_add(1),
        plan: SplitPlan {
            shots: cfg.personalize.shots,
            target_users: users - sharers,
            sharer_users: sharers,
            ..cfg.plan
        },
    };
    let ds = Dataset::generate(&params)?;
    let mut run = RunDir::create(out, "gen-bench")?;
    synthbench::write_dataset(&ds, out)?;
    run.record_output(MANIFEST_FILE)?;
    run.record_output(DATA_FILE)?;
    run.finish(&cfg)?;
    println!(
        "{}: {} users ({} target, {} sharer), {} task samples -> {}",
        ds.spec.id,
        users,
        users - sharers,
        sharers,
        ds.splits.task.len(),
        out.display()
    );
    Ok(())
}

pub fn validate(dir: &Path) -> Result<()> {
    let rows = synthbench::validate_dir(dir).with_context(|| format!("validating {}", dir.display()))?;
    println!("ok: {} ({rows} rows)", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    trained_on: Vec<&'a str>,
    held_out: Vec<&'a str>,
    log: &'a prisp_core::hypernet::PretrainLog,
}

pub fn pretrain(g: &GlobalArgs, epochs: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = effective_config(g, None)?;
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let fam = &cfg.family;
    if fam.held_out >= fam.tasks {
        return Err(config_err("held_out must leave at least one training task"));
    }
    let specs = lab::task_family(fam.tasks, fam.base_seed);
    let (train_specs, held) = specs.split_at(fam.tasks - fam.held_out);
    let tasks = lab::pretrain_tasks(train_specs, fam.train_examples, fam.val_examples, fam.data_seed);
    let backbone = Backbone::build(cfg.backbone, &Rng::new(cfg.backbone_seed))?;
    let h = Hypernet::new(cfg.hypernet_config(), &Rng::new(cfg.hypernet.seed))?;
    let start = Instant::now();
    let (h, log) = pretrain_hypernet(&backbone, h, &tasks, &cfg.pretrain, &Rng::new(cfg.pretrain_seed))?;
    let seconds = start.elapsed().as_secs_f64();

    let mut run = RunDir::create(out, "pretrain-hypernet")?;
    backbone.save(&run.path(BACKBONE_FILE))?;
    run.record_output(BACKBONE_FILE)?;
    h.save(&run.path(HYPERNET_FILE))?;
    run.record_output(HYPERNET_FILE)?;
    let summary = PretrainSummary {
        trained_on: train_specs.iter().map(|s| s.id.as_str()).collect(),
        held_out: held.iter().map(|s| s.id.as_str()).collect(),
        log: &log,
    };
    run.write_json("pretrain.json", &summary)?;
    run.timing("pretrain_seconds", seconds);
    run.finish(&cfg)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "pretrained on {} tasks in {} steps: val loss {:.4} (base) -> {:.4} (anchored)",
        tasks.len(),
        log.steps,
        mean(&log.val_base),
        mean(&log.val_anchored)
    );
    Ok(())
}

#[derive(Serialize)]
struct AnchorSummary {
    description: String,
    refined: bool,
    members: usize,
    entries: usize,
}

pub fn make_anchor(
    g: &GlobalArgs,
    model: &Path,
    bench: Option<&Path>,
    description: Option<&str>,
    out: &Path,
) -> Result<()> {
    let cfg = effective_config(g, None)?;
    let mut run = RunDir::create(out, "make-anchor")?;
    let m = load_model(model, &cfg, &mut run)?;
    let (anchor, text, refined) = match (bench, description) {
        (Some(b), _) => {
            let ds = load_bench(b, &mut run)?;
            (
                anchor_for(&m, &ds, &cfg)?,
                ds.spec.description.clone(),
                cfg.refine.is_some(),
            )
        }
        (None, Some(d)) => (stage1_anchor(&m.hypernet, d, &m.backbone)?, d.to_string(), false),
        (None, None) => return Err(config_err("give --bench or --description")),
    };
    anchor.save(&run.path(ANCHOR_FILE))?;
    run.record_output(ANCHOR_FILE)?;
    run.write_json(
        "anchor.json",
        &AnchorSummary {
            description: text,
            refined,
            members: anchor.len(),
            entries: anchor.flatten().len(),
        },
    )?;
    run.finish(&cfg)?;
    println!("anchor with {} adapted projections -> {}", anchor.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct UserTrace {
    user: String,
    file: String,
    steps: usize,
    shots_used: usize,
    trainable: usize,
    frozen_intact: bool,
    warning: Option<String>,
    losses: Vec<f64>,
    grad_norms: GradTrace,
}

fn safe_id(id: &str) -> Result<&str> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok && id != "." && id != ".." {
        Ok(id)
    } else {
        Err(Error::Data(format!("user id {id:?} cannot be used as a file name")).into())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn personalize(
    g: &GlobalArgs,
    model: &Path,
    anchor: &Path,
    bench: Option<&Path>,
    users: Option<&Path>,
    variant: Option<&str>,
    train: &TrainArgs,
    out: &Path,
) -> Result<()> {
    let mut cfg = effective_config(g, Some(train))?;
    if let Some(v) = variant {
        cfg.personalize.variant = parse(v)?;
    }
    if cfg.personalize.variant == Variant::OppuFresh {
        return Err(config_err(
            "personalize trains anchor variants; use pipeline for the fresh-LoRA baseline",
        ));
    }
    let mut run = RunDir::create(out, "personalize")?;
    let m = load_model(model, &cfg, &mut run)?;
    let start = AdapterSet::load(anchor).with_context(|| format!("loading {}", anchor.display()))?;
    run.input("anchor", anchor)?;
    let (histories, kind) = match (bench, users) {
        (Some(b), _) => {
            let ds = load_bench(b, &mut run)?;
            (
                ds.target_users().map(UserHistory::from).collect::<Vec<_>>(),
                Some(ds.spec.kind),
            )
        }
        (None, Some(p)) => {
            let records = read_jsonl(p)?;
            run.input("users", p)?;
            let hs = users_from_records(&records)
                .into_iter()
                .map(|(id, history, _)| UserHistory::new(id, history))
                .collect();
            (hs, None)
        }
        (None, None) => return Err(config_err("give --bench or --users")),
    };
    if histories.is_empty() {
        return Err(Error::Data("no users with history rows".into()).into());
    }
    let pcfg = match kind {
        Some(k) => cfg.lab(k).personalize,
        None => cfg.personalize,
    };
    for h in &histories {
        safe_id(&h.id)?;
    }
    let t0 = Instant::now();
    let runs = histories
        .par_iter()
        .map(|h| personalize_user(&m.backbone, &start, h, &pcfg))
        .collect::<prisp_core::Result<Vec<_>>>()?;
    let seconds = t0.elapsed().as_secs_f64();
    let mut traces = Vec::with_capacity(runs.len());
    for (h, r) in histories.iter().zip(runs) {
        let file = format!("users/{}.prsp", h.id);
        let path = run.path(&file);
        std::fs::create_dir_all(path.parent().expect("users dir")).map_err(Error::from)?;
        r.adapters.save(&path)?;
        run.record_output(&file)?;
        traces.push(UserTrace {
            user: h.id.clone(),
            file,
            steps: r.log.steps,
            shots_used: r.shots_used,
            trainable: r.adapters.trainable_param_count(),
            frozen_intact: frozen_intact(&start, &r.adapters),
            warning: r.warning,
            losses: r.log.losses,
            grad_norms: r.log.trace,
        });
    }
    run.write_json("personalize.json", &traces)?;
    run.timing("train_seconds", seconds);
    run.finish(&cfg)?;
    println!(
        "trained {} users with variant {} -> {}",
        traces.len(),
        pcfg.variant.name(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TaskUsers<'a> {
    task: &'a str,
    method: &'a str,
    users: &'a [UserOutcome],
}

fn user_traces(runs: &[MethodRun]) -> Vec<TaskUsers<'_>> {
    runs.iter()
        .map(|r| TaskUsers {
            task: &r.task,
            method: r.method.name(),
            users: &r.users,
        })
        .collect()
}

fn record_costs(run: &mut RunDir, runs: &[MethodRun]) -> Result<()> {
    let table = cost_report(&lab::cost_entries(runs))?;
    run.timing("cost", table);
    let per_task: std::collections::BTreeMap<String, f64> = runs
        .iter()
        .map(|r| (format!("{}/{}", r.task, r.method.name()), r.train_seconds))
        .collect();
    run.timing("train_seconds", per_task);
    Ok(())
}

pub fn pipeline(g: &GlobalArgs, args: &ModelArgs, variant: Option<&str>, train: &TrainArgs, out: &Path) -> Result<()> {
    let mut cfg = effective_config(g, Some(train))?;
    let method = match variant {
        Some(v) => parse::<Method>(v)?,
        None => Method::Personalized(cfg.personalize.variant),
    };
    if let Method::Personalized(v) = method {
        cfg.personalize.variant = v;
    }
    let mut run = RunDir::create(out, "pipeline")?;
    let m = load_model(&args.model, &cfg, &mut run)?;
    let datasets = load_benches(args, &mut run)?;
    let mut runs = Vec::with_capacity(datasets.len());
    for ds in &datasets {
        let anchor = anchor_for(&m, ds, &cfg)?;
        runs.push(lab::run_method(
            &m.backbone,
            &anchor,
            ds,
            method,
            &cfg.lab(ds.spec.kind),
        )?);
    }
    let mut report = lab::report_for(method.name(), &runs)?;
    report.config_hash = cfg.hash();
    run.write_json(REPORT_FILE, &report)?;
    run.write_json("users.json", &user_traces(&runs))?;
    record_costs(&mut run, &runs)?;
    run.finish(&cfg)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    method: String,
    raw: RawMetrics,
    score: f64,
    trainable: usize,
    steps: usize,
    /// Every user's factors outside the mask are bitwise unchanged.
    mask_audit: bool,
}

#[derive(Serialize)]
struct AblationTask {
    task: String,
    kind: TaskKind,
    rows: Vec<AblationRow>,
}

fn ablation_table(tasks: &[AblationTask]) -> String {
    let mut s = format!("{:<12}", "method");
    for t in tasks {
        s.push_str(&format!(" {:>14}", t.task));
    }
    s.push_str(&format!(" {:>9} {:>10}\n", "average", "trainable"));
    let methods: Vec<&str> = tasks[0].rows.iter().map(|r| r.method.as_str()).collect();
    for (i, name) in methods.iter().enumerate() {
        s.push_str(&format!("{name:<12}"));
        let mut sum = 0.0;
        for t in tasks {
            s.push_str(&format!(" {:>14.4}", t.rows[i].score));
            sum += t.rows[i].score;
        }
        s.push_str(&format!(
            " {:>9.4} {:>10}\n",
            sum / tasks.len() as f64,
            tasks[0].rows[i].trainable
        ));
    }
    s
}

pub fn ablate(g: &GlobalArgs, args: &ModelArgs, train: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = effective_config(g, Some(train))?;
    let mut run = RunDir::create(out, "ablate")?;
    let m = load_model(&args.model, &cfg, &mut run)?;
    let datasets = load_benches(args, &mut run)?;
    let mut tasks = Vec::new();
    let mut all = Vec::new();
    for ds in &datasets {
        let anchor = anchor_for(&m, ds, &cfg)?;
        let runs = lab::ablate(&m.backbone, &anchor, ds, &cfg.lab(ds.spec.kind))?;
        tasks.push(AblationTask {
            task: ds.spec.id.clone(),
            kind: ds.spec.kind,
            rows: runs
                .iter()
                .map(|r| AblationRow {
                    method: r.method.name().to_string(),
                    raw: r.raw,
                    score: r.score,
                    trainable: r.trainable,
                    steps: r.total_steps(),
                    mask_audit: r.users.iter().all(|u| u.frozen_intact),
                })
                .collect(),
        });
        all.extend(runs);
    }
    if let Some(bad) = tasks.iter().flat_map(|t| &t.rows).find(|r| !r.mask_audit) {
        return Err(Error::Internal(format!("{} changed a frozen factor", bad.method)).into());
    }
    let table = ablation_table(&tasks);
    run.write_json("ablation.json", &tasks)?;
    run.write_bytes("ablation.txt", table.as_bytes())?;
    run.write_json("users.json", &user_traces(&all))?;
    record_costs(&mut run, &all)?;
    run.finish(&cfg)?;
    print!("{table}");
    Ok(())
}

pub fn sweep(
    g: &GlobalArgs,
    args: &ModelArgs,
    methods: &[String],
    shot_set: &[usize],
    train: &TrainArgs,
    out: &Path,
) -> Result<()> {
    let cfg = effective_config(g, Some(train))?;
    let methods = methods.iter().map(|s| parse::<Method>(s)).collect::<Result<Vec<_>>>()?;
    if shot_set.is_empty() || shot_set.contains(&0) {
        return Err(config_err("shot set must be non-empty and positive"));
    }
    let mut run = RunDir::create(out, "sweep-shots")?;
    let m = load_model(&args.model, &cfg, &mut run)?;
    let datasets = load_benches(args, &mut run)?;
    let t0 = Instant::now();
    for ds in &datasets {
        let anchor = anchor_for(&m, ds, &cfg)?;
        let points = lab::sweep_shots(&m.backbone, &anchor, ds, &methods, shot_set, &cfg.lab(ds.spec.kind))?;
        let name = if datasets.len() == 1 {
            "curve.csv".to_string()
        } else {
            format!("curve-{}.csv", ds.spec.id)
        };
        let csv = lab::sweep_csv(&points);
        run.write_bytes(&name, csv.as_bytes())?;
        println!("{}:\n{csv}", ds.spec.id);
    }
    run.timing("seconds", t0.elapsed().as_secs_f64());
    run.finish(&cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct AdaptabilityOut<'a> {
    matrix: &'a lab::AdaptabilityMatrix,
    sharer_off_diagonal_mean: f64,
}

pub fn adaptability(g: &GlobalArgs, args: &ModelArgs, train: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = effective_config(g, Some(train))?;
    if args.benches.len() < 2 {
        return Err(config_err("adaptability needs at least two --bench directories"));
    }
    let mut run = RunDir::create(out, "adaptability")?;
    let m = load_model(&args.model, &cfg, &mut run)?;
    let datasets = load_benches(args, &mut run)?;
    let lab_cfg = LabConfig {
        personalize: cfg.personalize,
        oppu_base: cfg.oppu_base,
        rank: cfg.hypernet.rank,
    };
    let t0 = Instant::now();
    let matrix = lab::adaptability_matrix(&m.backbone, &m.hypernet, &datasets, &lab_cfg)?;
    let mean = matrix.sharer_off_diagonal_mean();
    run.write_json(
        "adaptability.json",
        &AdaptabilityOut {
            matrix: &matrix,
            sharer_off_diagonal_mean: mean,
        },
    )?;
    run.timing("seconds", t0.elapsed().as_secs_f64());
    run.finish(&cfg)?;
    println!("sharer reuse (rows: source anchor, columns: target task)");
    for (i, row) in matrix.sharer.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|r| format!("{:>8.3}", r.ratio)).collect();
        println!("{:<16} {}", matrix.tasks[i], cells.join(" "));
    }
    println!("off-diagonal mean: {mean:.4}");
    Ok(())
}

pub fn robustness(g: &GlobalArgs, args: &ModelArgs, variants: &[String], train: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = effective_config(g, Some(train))?;
    let variants = variants
        .iter()
        .map(|v| parse::<DescriptionVariant>(v))
        .collect::<Result<Vec<_>>>()?;
    let mut run = RunDir::create(out, "robustness")?;
    let m = load_model(&args.model, &cfg, &mut run)?;
    let datasets = load_benches(args, &mut run)?;
    let t0 = Instant::now();
    let tables = datasets
        .iter()
        .map(|ds| lab::robustness(&m.backbone, &m.hypernet, ds, &variants, &cfg.lab(ds.spec.kind)))
        .collect::<prisp_core::Result<Vec<_>>>()?;
    run.write_json("robustness.json", &tables)?;
    run.timing("seconds", t0.elapsed().as_secs_f64());
    run.finish(&cfg)?;
    for t in &tables {
        println!("{}", t.task);
        for r in &t.rows {
            println!(
                "  {:<16} stage1 {:>8.4}  stage2 {:>8.4}",
                r.description, r.stage1, r.stage2
            );
        }
        println!(
            "  spread           stage1 {:>8.4}  stage2 {:>8.4}",
            t.stage1_spread, t.stage2_spread
        );
    }
    Ok(())
}

pub fn report(input: &Path, format: ReportFormat) -> Result<()> {
    let path = if input.is_dir() {
        input.join(REPORT_FILE)
    } else {
        input.to_path_buf()
    };
    let text = std::fs::read_to_string(&path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let report: MetricReport = serde_json::from_str(&text).map_err(Error::from)?;
    report.verify()?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

#[derive(Serialize)]
struct MemberInfo {
    layer: usize,
    site: &'static str,
    rank: usize,
    d_in: usize,
    d_out: usize,
    bridge: bool,
    trainable_roles: Vec<&'static str>,
}

#[derive(Serialize)]
struct AdapterInfo {
    variant: Option<&'static str>,
    members: Vec<MemberInfo>,
    trainable: usize,
    entries: usize,
}

pub fn inspect(file: &Path) -> Result<()> {
    let set = AdapterSet::load(file).with_context(|| format!("loading {}", file.display()))?;
    let members = set
        .iter()
        .map(|(&(layer, site), m)| MemberInfo {
            layer,
            site: site.name(),
            rank: m.pair.rank(),
            d_in: m.pair.d_in(),
            d_out: m.pair.d_out(),
            bridge: m.c.is_some(),
            trainable_roles: [(Role::A, "A"), (Role::B, "B"), (Role::C, "C")]
                .into_iter()
                .filter(|(r, _)| m.mask.get(*r))
                .map(|(_, n)| n)
                .collect(),
        })
        .collect();
    let info = AdapterInfo {
        variant: set.variant().map(Variant::name),
        members,
        trainable: set.trainable_param_count(),
        entries: set.flatten().len(),
    };
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}
