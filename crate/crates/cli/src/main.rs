mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Profile;

#[derive(Debug, Parser)]
#[command(
    name = "prisp",
    version,
    about = "Two-stage LoRA personalization lab on synthetic tasks"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; beats both the config file and PRISP_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-user jobs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Stage-2 batch size and learning-rate preset.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
}

/// Stage-2 overrides shared by the training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Directory written by `pretrain-hypernet`.
    #[arg(long)]
    pub model: PathBuf,
    /// Benchmark directory written by `gen-bench`; repeat for several tasks.
    #[arg(long = "bench", required = true)]
    pub benches: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory.
    GenBench {
        #[arg(long)]
        kind: String,
        /// Target plus sharer users.
        #[arg(long, default_value_t = 12)]
        users: usize,
        /// Task seed; defaults to the family base seed plus the kind index.
        #[arg(long)]
        task_seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a benchmark directory against its manifest.
    Validate { dir: PathBuf },
    /// Build the backbone and pretrain the hypernetwork on the task family.
    PretrainHypernet {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the task anchor for a benchmark or a free-text description.
    MakeAnchor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "description", required_unless_present = "description")]
        bench: Option<PathBuf>,
        #[arg(long)]
        description: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 training for each user, one adapter file per user.
    Personalize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        /// Benchmark directory whose target users are trained.
        #[arg(long, conflicts_with = "users", required_unless_present = "users")]
        bench: Option<PathBuf>,
        /// JSONL with `history` rows per user.
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Anchor generation, per-user training and evaluation over benchmarks.
    Pipeline {
        #[command(flatten)]
        model: ModelArgs,
        /// ours, no-bridge, bridge-only, full-lora, oppu, anchor or base.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// All bridge variants plus the fresh-LoRA baseline on shared shots.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores as a function of the number of shots.
    SweepShots {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec!["ours".to_string(), "oppu".to_string()])]
        methods: Vec<String>,
        #[arg(long = "shot-set", value_delimiter = ',', default_values_t = prisp_core::lab::SHOT_SWEEP.to_vec())]
        shot_set: Vec<usize>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-task adaptability matrix.
    Adaptability {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Anchor-only and personalized scores under perturbed descriptions.
    Robustness {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![
            "canonical".to_string(), "generated-style".to_string(), "imprecise".to_string()
        ])]
        variants: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print and check a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
    /// Adapter file utilities.
    Adapters {
        #[command(subcommand)]
        action: AdaptersCommand,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum AdaptersCommand {
    /// Summarize an adapter file as JSON.
    Inspect { file: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<prisp_core::Error>() {
            use prisp_core::Error as E;
            return if e.is_numeric() {
                4
            } else if e.is_io() || matches!(e, E::Json(_) | E::Data(_)) {
                3
            } else if matches!(e, E::Internal(_)) {
                1
            } else {
                2
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| prisp_core::Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenBench {
            kind,
            users,
            task_seed,
            classes,
            out,
        } => c::gen_bench(g, &kind, users, task_seed, classes, &out),
        Command::Validate { dir } => c::validate(&dir),
        Command::PretrainHypernet { epochs, out } => c::pretrain(g, epochs, &out),
        Command::MakeAnchor {
            model,
            bench,
            description,
            out,
        } => c::make_anchor(g, &model, bench.as_deref(), description.as_deref(), &out),
        Command::Personalize {
            model,
            anchor,
            bench,
            users,
            variant,
            train,
            out,
        } => c::personalize(
            g,
            &model,
            &anchor,
            bench.as_deref(),
            users.as_deref(),
            variant.as_deref(),
            &train,
            &out,
        ),
        Command::Pipeline {
            model,
            variant,
            train,
            out,
        } => c::pipeline(g, &model, variant.as_deref(), &train, &out),
        Command::Ablate { model, train, out } => c::ablate(g, &model, &train, &out),
        Command::SweepShots {
            model,
            methods,
            shot_set,
            train,
            out,
        } => c::sweep(g, &model, &methods, &shot_set, &train, &out),
        Command::Adaptability { model, train, out } => c::adaptability(g, &model, &train, &out),
        Command::Robustness {
            model,
            variants,
            train,
            out,
        } => c::robustness(g, &model, &variants, &train, &out),
        Command::Report { input, format } => c::report(&input, format),
        Command::Adapters {
            action: AdaptersCommand::Inspect { file },
        } => c::inspect(&file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // wrapped errors often repeat their source's text; print each once
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let s = cause.to_string();
                if !parts.last().is_some_and(|p| p.ends_with(&s)) {
                    parts.push(s);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::from(exit_code(&e))
        }
    }
}
