use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pimm_cli::commands::{cmd_compare, cmd_gen_data, cmd_train, Options, Report};
use pimm_cli::config::keys_help;
use pimm_cli::CliError;

/// Multi-task cascade models with label-guided premise selection.
#[derive(Parser)]
#[command(name = "pimm", version, after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file with [section] key = value entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of train.seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Runs trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override one key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as CSV plus summary.json.
    #[command(after_help = keys_help())]
    GenData,
    /// Train model.kind once per seed and report test AUC.
    #[command(after_help = keys_help())]
    Train,
    /// Train every model in compare.models on the same seeds and tabulate.
    #[command(after_help = keys_help())]
    Compare,
}

fn print_report(report: &Report) {
    print!(
        "{}",
        pimm_cli::commands::format_table(&report.tasks, &report.summaries)
    );
    for f in &report.files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
        set: cli.set,
    };
    match cli.command {
        Command::GenData => {
            for f in cmd_gen_data(&opts)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Train => print_report(&cmd_train(&opts)?),
        Command::Compare => print_report(&cmd_compare(&opts)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
