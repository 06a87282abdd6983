//! `rnascl` pipeline runner. Each subcommand works inside a run directory
//! (`--out`, default `./<run_id>`); later phases read the config snapshot
//! the search phase wrote there, so a run stays self-consistent. The only
//! environment variable honored is RNASCL_THREADS (ablation parallelism).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnascl::commands;
use rnascl::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rnascl",
    version,
    about = "Robust architecture search pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config in TOML form.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to ./<run_id>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. --set search.epochs=10. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher (if the arm needs one) and search the supernet.
    Search(Common),
    /// Freeze the searched architecture into an arch description file.
    Derive(Common),
    /// Train the derived student from fresh weights.
    Train(Common),
    /// Evaluate the student clean and under FGSM / PGD / MI-FGSM.
    Attack(Common),
    /// Emit the accuracy curve, attention maps, histogram, and summary.
    Report(Common),
    /// Run all four arms over the configured seeds and compare.
    Ablate(Common),
    /// Convert CIFAR-10 binary batches into the native dataset format.
    Ingest(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Search(c)
            | Command::Derive(c)
            | Command::Train(c)
            | Command::Attack(c)
            | Command::Report(c)
            | Command::Ablate(c)
            | Command::Ingest(c) => c,
        }
    }

    /// Phases that consume an existing run prefer its config snapshot.
    fn prefers_snapshot(&self) -> bool {
        matches!(
            self,
            Command::Derive(_) | Command::Train(_) | Command::Attack(_) | Command::Report(_)
        )
    }
}

fn thread_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("RNASCL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(jobs.max(1))
}

fn run(cli: Cli) -> rnascl::Result<()> {
    let common = cli.command.common();
    // The default run directory is named after the config's run_id, so
    // resolve the user config first, then re-resolve against the run
    // directory's snapshot for phases that continue an existing run.
    let user_cfg: RunConfig = commands::load_run_config(
        &common.config,
        &PathBuf::new(),
        false,
        common.seed,
        &common.set,
    )?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&user_cfg.run_id));
    let cfg: RunConfig = if cli.command.prefers_snapshot() {
        commands::load_run_config(&common.config, &out, true, common.seed, &common.set)?
    } else {
        user_cfg
    };
    match cli.command {
        Command::Search(_) => {
            commands::cmd_search(&cfg, &out)?;
        }
        Command::Derive(_) => {
            commands::cmd_derive(&cfg, &out)?;
        }
        Command::Train(_) => {
            commands::cmd_train(&cfg, &out)?;
        }
        Command::Attack(_) => {
            commands::cmd_attack(&cfg, &out)?;
        }
        Command::Report(_) => {
            commands::cmd_report(&cfg, &out)?;
        }
        Command::Ablate(_) => {
            let jobs = 4 * cfg.ablate.seeds.len();
            commands::cmd_ablate(&cfg, &out, thread_count(jobs))?;
        }
        Command::Ingest(_) => {
            commands::cmd_ingest(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
