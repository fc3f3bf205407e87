use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclic_dp::config::{ExperimentConfig, Overrides, PRESETS};
use cyclic_dp::error::{CliError, Result};
use cyclic_dp::{report, runner};
use cyclic_dp_core::accountant::epsilon_for;

#[derive(Parser)]
#[command(name = "cyclic-dp", version, about = "Cyclical weight transfer with per-site DP-SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a TOML config or a bundled preset name.
    Run(RunArgs),
    /// Print ε and the best Rényi order for a subsampled Gaussian mechanism.
    Accountant(AccountantArgs),
    /// List bundled presets, or print one.
    Preset { name: Option<String> },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or `eicu_like` / `tcga_like`.
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "CYCLIC_DP_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Validate and print the resolved plan without training or writing.
    #[arg(long)]
    dry_run: bool,
    /// Set the clip norm to noise_multiplier / batch_size.
    #[arg(long)]
    clip_from_paper: bool,
    /// Check the budget after each step instead of before it.
    #[arg(long)]
    fidelity_postcheck: bool,
    /// Number of worker threads for independent runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    parallel_arms: u32,
}

#[derive(Args)]
struct AccountantArgs {
    /// Sampling rate, as a decimal or a fraction such as `100/27395`.
    #[arg(long)]
    q: String,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

fn parse_rate(s: &str) -> Result<f64> {
    let bad = || CliError::config(format!("--q: cannot parse `{s}`"));
    match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            Ok(a / b)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

fn accountant(a: &AccountantArgs) -> Result<()> {
    let q = parse_rate(&a.q)?;
    let (eps, order) = epsilon_for(q, a.sigma, a.steps, a.delta).map_err(|e| match e {
        cyclic_dp_core::Error::InvalidParameter { name, reason } => {
            CliError::config(format!("--{name}: {reason}"))
        }
        other => CliError::config(other.to_string()),
    })?;
    println!("epsilon {eps}");
    println!("order {order}");
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let (mut cfg, base) = ExperimentConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        seed: a.seed,
        output_dir: a.output_dir.clone(),
        clip_from_paper: a.clip_from_paper,
        fidelity_postcheck: a.fidelity_postcheck,
    });
    cfg.validate()?;
    if a.dry_run {
        print!("{}", cfg.to_toml());
        let sites = match cfg.n_train_sites() {
            Some(n) => n,
            None => runner::load_data(&cfg, &base, cfg.seed)?.train.len(),
        };
        let jobs = runner::jobs(&cfg, sites)?;
        println!();
        println!("# {} runs", jobs.len());
        for j in jobs {
            println!("# {} sites={} seed={}", j.mode.name(), j.n_sites, j.seed);
        }
        return Ok(());
    }
    let results = runner::run_grid(&cfg, &base, a.parallel_arms as usize)?;
    report::write_all(&cfg, &results)?;
    print!(
        "{}",
        std::fs::read_to_string(cfg.output_dir.join(report::REPORT_TXT))
            .map_err(|e| CliError::io(cfg.output_dir.join(report::REPORT_TXT), e))?
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => run(a),
        Command::Accountant(a) => accountant(a),
        Command::Preset { name: None } => {
            for (n, _) in PRESETS {
                println!("{n}");
            }
            Ok(())
        }
        Command::Preset { name: Some(n) } => match cyclic_dp::config::preset(n) {
            Some(text) => {
                print!("{text}");
                Ok(())
            }
            None => Err(CliError::config(format!("unknown preset `{n}`"))),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
