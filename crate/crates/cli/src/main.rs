use std::path::PathBuf;
use std::process::ExitCode;

use altq_cli::commands;
use altq_cli::config::CONFIG_ENV;
use altq_cli::{CliError, RunConfig};
use altq_core::training::Variant;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "altq", version, about = "Train, evaluate and play the image-guessing questioner")]
struct Cli {
    /// TOML run config; unknown keys are rejected.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all inputs and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and the scripted dialog corpus.
    Datagen,
    /// Supervised pre-training.
    Pretrain {
        /// Continue from the latest epoch checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        variant: Variant,
        /// Defaults to the run's sl.ckpt.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Paired evaluation of one or more checkpoints (`tag=path` or path).
    Eval {
        models: Vec<String>,
        #[arg(long)]
        svg: bool,
    },
    /// Play one game in the terminal as the answerer.
    Play {
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Serve the game API (and a built web client if configured).
    Serve {
        models: Vec<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Redraw the PMR chart from an eval curves.csv.
    Plot {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the resolved config as TOML.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(cli.seed, cli.out);
    match cli.command {
        Command::Datagen => commands::datagen(&cfg),
        Command::Pretrain { resume } => commands::pretrain(&cfg, resume).map(|_| ()),
        Command::Finetune { variant, checkpoint } => commands::finetune(&cfg, variant, checkpoint.as_deref()).map(|_| ()),
        Command::Eval { models, svg } => {
            let report = commands::eval(&cfg, &models, svg)?;
            for r in &report.rows {
                println!(
                    "{:<8} pmr_final {:.4}  perplexity {:.3}  win_rate {:.3}",
                    r.tag,
                    r.final_pmr(),
                    r.perplexity,
                    r.win_rate
                );
            }
            Ok(())
        }
        Command::Play { checkpoint } => {
            let stdin = std::io::stdin();
            commands::play_cmd(&cfg, checkpoint.as_deref(), &mut stdin.lock(), &mut std::io::stdout()).map(|_| ())
        }
        Command::Serve { models, port } => {
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            commands::serve(&cfg, &models)
        }
        Command::Plot { input, output } => {
            let dir = cfg.out.join(commands::EVAL_DIR);
            let input = input.unwrap_or_else(|| dir.join("curves.csv"));
            let output = output.unwrap_or_else(|| dir.join("curves.svg"));
            commands::plot(&input, &output)
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("altq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
