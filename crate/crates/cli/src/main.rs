use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use efsa_cli::{AblationKind, CliError, Command, Settings};

#[derive(Parser)]
#[command(
    name = "efsa",
    version,
    about = "Episodic few-shot adaptation for text-to-image retrieval"
)]
struct Cli {
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for per-query work.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark and pre-training pairs.
    Gen,
    /// Pre-train the base dual encoder.
    TrainBase,
    /// Encode the pool with the base vision tower, or import a stored pool.
    Index,
    /// Run the ZS / FT / T2T / EFSA suite and write recall reports.
    Eval,
    /// Run one ablation sweep.
    Ablate {
        #[arg(value_enum)]
        which: Which,
    },
    /// Print embedding versus caption storage.
    ReportStorage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Topk,
    Epochs,
    Loss,
    Lora,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Gen => Command::Gen,
        Cmd::TrainBase => Command::TrainBase,
        Cmd::Index => Command::Index,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate { which } => Command::Ablate(match which {
            Which::Topk => AblationKind::Topk,
            Which::Epochs => AblationKind::Epochs,
            Which::Loss => AblationKind::Loss,
            Which::Lora => AblationKind::Lora,
        }),
        Cmd::ReportStorage => Command::ReportStorage,
    };
    match execute(command, cli.config, &cli.set, cli.threads) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(
    command: Command,
    config: Option<PathBuf>,
    set: &[String],
    threads: Option<usize>,
) -> Result<Vec<String>, CliError> {
    let settings = Settings::load(config.as_deref(), set)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    pool.install(|| efsa_cli::run(command, &settings))
}
