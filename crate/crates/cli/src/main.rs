use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ttt_cli::{
    cmd_bench, cmd_eval, cmd_finetune, cmd_niah, cmd_sweep, cmd_toy, cmd_train, CommandOutcome,
    ExperimentConfig, RunContext, SweepAxis,
};
use ttt_core::experiment::parse_list;

#[derive(Parser)]
#[command(
    name = "ttt-e2e",
    version,
    about = "Test-time training experiments on byte-level language models"
)]
struct Cli {
    /// Flat `section.key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; sub-runs derive their own.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel sweep points. Capped by TTT_E2E_THREADS.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Five-method toy comparison with per-token loss breakdowns.
    Toy,
    /// Train the configured model from scratch.
    Train,
    /// Continue training saved parameters at the configured context.
    Finetune {
        #[arg(long)]
        params: PathBuf,
    },
    /// Token-level loss breakdown on the held-out split.
    Eval {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Needle-in-a-haystack retrieval accuracy.
    Niah {
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// One training run per value of a hyper-parameter.
    Sweep {
        /// window_k, batch_b or fast_fraction.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// FLOP and wall-clock table over context lengths.
    Bench {
        /// Comma-separated lengths; `eval.bench_t` when unset.
        #[arg(long)]
        t: Option<String>,
    },
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::Toy => "toy",
        Command::Train => "train",
        Command::Finetune { .. } => "finetune",
        Command::Eval { .. } => "eval",
        Command::Niah { .. } => "niah",
        Command::Sweep { .. } => "sweep",
        Command::Bench { .. } => "bench",
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var("TTT_E2E_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
}

fn run(cli: Cli) -> ttt_core::Result<CommandOutcome> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let cap = thread_cap();
    if let Some(n) = cap {
        // Only the first global pool build takes effect.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let workers = cap.map_or(cli.workers, |n| cli.workers.min(n)).max(1);
    let ctx = RunContext {
        command: name(&cli.command).to_string(),
        seed: cli.seed,
        out: cfg.output_dir.clone(),
        workers,
    };
    match &cli.command {
        Command::Toy => cmd_toy(&cfg, &ctx),
        Command::Train => cmd_train(&cfg, &ctx),
        Command::Finetune { params } => cmd_finetune(&cfg, &ctx, params),
        Command::Eval { params } => cmd_eval(&cfg, &ctx, params.as_deref()),
        Command::Niah { params } => cmd_niah(&cfg, &ctx, params.as_deref()),
        Command::Sweep { axis, values } => cmd_sweep(&cfg, &ctx, *axis, values),
        Command::Bench { t } => {
            let grid = match t {
                Some(s) => parse_list(s)?,
                None => cfg.eval.bench_t.clone(),
            };
            cmd_bench(&cfg, &ctx, &grid)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            for l in &out.lines {
                println!("{l}");
            }
            for f in &out.failures {
                eprintln!("failed: {f}");
            }
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
