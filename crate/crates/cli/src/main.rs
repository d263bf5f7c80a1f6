use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdebias_cli::commands::{self, AnalyzeArgs, OracleArgs, SimulateArgs};
use sdebias_cli::UsageError;

#[derive(Parser)]
#[command(name = "sdebias", version, about = "Surrogate-assisted debiased inference with missing outcomes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SDEBIAS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation scenarios in a config file.
    Simulate {
        #[arg(long, env = "SDEBIAS_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "SDEBIAS_OUT")]
        out: PathBuf,
        /// Derives every scenario's master seed.
        #[arg(long, env = "SDEBIAS_SEED")]
        seed: Option<u64>,
        /// 500 replicates and 500 bootstrap draws per scenario.
        #[arg(long)]
        full_scale: bool,
        /// `section.key=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Estimate coefficients on a CSV file.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = "SDEBIAS_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "SDEBIAS_OUT")]
        out: PathBuf,
        /// One-based coordinates separated by commas, or `all`.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compute or reuse the pseudo-true coefficients of each scenario.
    Oracle {
        #[arg(long, env = "SDEBIAS_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "SDEBIAS_OUT")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate { config, out, seed, full_scale, overrides } => {
            let m = commands::simulate(&SimulateArgs {
                config: config.clone(),
                out: out.clone(),
                seed: *seed,
                full_scale: *full_scale,
                overrides: overrides.clone(),
            })?;
            println!("wrote {} files to {}", m.files.len() + 1, out.display());
        }
        Command::Analyze { data, config, out, target, overrides } => {
            let (_, rows) = commands::analyze(&AnalyzeArgs {
                data: data.clone(),
                config: config.clone(),
                out: out.clone(),
                target: target.clone(),
                overrides: overrides.clone(),
            })?;
            for r in rows {
                println!("{:>12} {:>12.6} se {:>10.6} [{:.6}, {:.6}]", r.covariate, r.estimate, r.se, r.ci_low, r.ci_high);
            }
        }
        Command::Oracle { config, out, overrides } => {
            let (_, hits) = commands::oracle(&OracleArgs { config: config.clone(), out: out.clone(), overrides: overrides.clone() })?;
            for (label, hit) in hits {
                println!("{label}: {}", if hit { "cached" } else { "computed" });
            }
        }
    }
    Ok(())
}

fn out_dir(command: &Command) -> &PathBuf {
    match command {
        Command::Simulate { out, .. } | Command::Analyze { out, .. } | Command::Oracle { out, .. } => out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            let (kind, code) = if usage { ("usage", 2) } else { ("runtime", 1) };
            let message = format!("{e:#}");
            eprintln!("error: {message}");
            if let Err(w) = commands::write_error_file(out_dir(&cli.command), kind, &message) {
                eprintln!("error: could not write error file: {w}");
            }
            ExitCode::from(code)
        }
    }
}
