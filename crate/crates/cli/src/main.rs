use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ztt_cli::commands::{self, EvalArgs, GenerateArgs, RetrofitArgs, SweepArgs, TrainArgs};
use ztt_cli::CliError;
use ztt_core::model::Variant;

/// Parameter-cycling transformer laboratory.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Teacher-forced perplexity of a checkpoint on a byte file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stop cycling once zero attention reaches this value.
        #[arg(long)]
        exit_threshold: Option<f64>,
        /// One row per exit.
        #[arg(long)]
        per_exit: bool,
    },
    /// Continue a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_tokens: usize,
        #[arg(long)]
        exit_threshold: Option<f64>,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temp: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every layout with the same number of layer applications.
    Sweep {
        #[arg(long)]
        budget: usize,
        /// Comma-separated variants, e.g. `BC,HTC,ZTT`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a vanilla checkpoint into a three-layer cycled model.
    Retrofit {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        loop_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, resume, out, metrics } => {
            commands::train(&TrainArgs { config, resume, out, metrics }, stdout)
        }
        Command::Eval { ckpt, data, exit_threshold, per_exit } => {
            commands::eval(&EvalArgs { ckpt, data, exit_threshold, per_exit }, stdout)
        }
        Command::Generate { ckpt, prompt, max_tokens, exit_threshold, temp, seed } => commands::generate_text(
            &GenerateArgs { ckpt, prompt, max_tokens, exit_threshold, temperature: temp, seed },
            stdout,
        ),
        Command::Sweep { budget, variants, config, out } => {
            commands::sweep(&SweepArgs { budget, variants, config, out }, stdout)
        }
        Command::Retrofit { from, variant, loop_count, out } => {
            commands::retrofit(&RetrofitArgs { from, variant, loop_count, out }, stdout)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
