use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcfl_cli::{cmd_compare, cmd_run, cmd_sweep_k, load, SweepOptions};

#[derive(Parser)]
#[command(name = "mcfl", version, about = "Multi-center federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over all its repeats.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Probe candidate cluster counts with short FeSEM runs.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long, default_value_t = 3)]
        probe_rounds: usize,
        /// Run the full experiment at the chosen K afterwards.
        #[arg(long)]
        run: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several algorithms on identical data and tabulate final metrics.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let loaded = load(&config, seed)?;
            let summary = cmd_run(&loaded, out.as_deref())?;
            let f = &summary.final_mean;
            println!(
                "{}: {} seed(s), {} rounds, macro_acc {:.4}, micro_acc {:.4}, macro_f1 {:.4}",
                summary.algorithm,
                summary.seeds.len(),
                summary.rounds,
                f.macro_acc,
                f.micro_acc,
                f.macro_f1
            );
        }
        Command::SweepK { config, candidates, sample_size, probe_rounds, run, out, seed } => {
            let loaded = load(&config, seed)?;
            let opts = SweepOptions { candidates, sample_size, probe_rounds, run };
            let chosen = cmd_sweep_k(&loaded, &opts, out.as_deref())?;
            println!("chosen K = {chosen}");
        }
        Command::Compare { configs, out, seed } => {
            let loaded = configs.iter().map(|p| load(p, seed)).collect::<anyhow::Result<Vec<_>>>()?;
            for row in cmd_compare(&loaded, out.as_deref())? {
                println!("{:<12} macro_acc {:.4}  micro_acc {:.4}  macro_f1 {:.4}", row.algorithm, row.macro_acc, row.micro_acc, row.macro_f1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
