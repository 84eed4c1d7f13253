use std::path::PathBuf;
use std::process::ExitCode;

use bitrap::Result;
use bitrap_cli::commands;
use bitrap_cli::config::RunConfig;
use bitrap_cli::exit_code;
use clap::{Args, Parser, Subcommand};

/// Bi-directional trajectory prediction.
#[derive(Parser, Debug)]
#[command(name = "bitrap", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed for data, initialization, training and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic branching-walkers scene in BEV text format.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint with its loss log.
    Train {
        /// Training scene.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validation scene.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Best-of-N and KDE-NLL metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report prefix; writes `<out>.md` and `<out>.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Also write the prediction dump used for the metrics.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Sample futures and write a prediction dump.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from a prediction dump.
    Plot {
        #[arg(long)]
        dump: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), &g.set, Some(g.seed))?;
    if g.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(bitrap::Error::Config(
            "no command given (synth, train, eval, predict, plot)".into(),
        ));
    };
    match command {
        Command::Synth { out } => {
            let s = commands::synth(&cfg, &out)?;
            println!(
                "wrote {}: {} agents, branch counts {:?}, {} windows available",
                out.display(),
                s.agents,
                s.branch_counts,
                s.windows
            );
        }
        Command::Train {
            data,
            out,
            resume,
            val,
        } => {
            let s = commands::train(&cfg, &data, &out, resume.as_deref(), val.as_deref())?;
            println!(
                "wrote {}: {} epochs on {} windows, final loss {:.5}, lr {:.6}",
                out.display(),
                s.epochs,
                s.windows,
                s.final_loss,
                s.final_lr
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            dump,
        } => {
            let r = commands::eval(&cfg, &checkpoint, &data, &out, dump.as_deref())?;
            print!("{}", bitrap::metrics::reports_to_markdown(&[r]));
        }
        Command::Predict {
            checkpoint,
            data,
            out,
        } => {
            let n = commands::predict(&cfg, &checkpoint, &data, &out)?;
            println!("wrote {}: {n} windows", out.display());
        }
        Command::Plot { dump, out } => {
            let s = commands::plot(&cfg, &dump, &out)?;
            for p in commands::list_figures(&s) {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
