use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use singular_lq::cli::{self, ScenarioConfig, SweepAxis};

#[derive(Parser)]
#[command(
    name = "singular-lq",
    version,
    about = "LQ tracking with singular terminal constraints on scenario trees"
)]
#[command(args_conflicts_with_subcommands = true)]
struct Args {
    /// Print the built-in scenario list and exit.
    #[arg(long)]
    catalog: bool,

    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a scenario file or catalog name.
    Run {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a scenario along one axis and write the study table.
    Sweep {
        config: String,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "n")]
    Truncation,
    #[value(name = "N")]
    Steps,
    #[value(name = "perturbation")]
    Perturbation,
}

fn fail(e: singular_lq::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(cli::exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(k) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    if args.catalog {
        for (name, text) in cli::catalog() {
            let desc = ScenarioConfig::parse(text)
                .map(|c| c.description)
                .unwrap_or_default();
            println!("{name:<26} {desc}");
        }
        return ExitCode::SUCCESS;
    }
    match args.command {
        None => {
            eprintln!("error: a command is required (run, sweep) or --catalog");
            ExitCode::from(2)
        }
        Some(Command::Run { config, out }) => {
            let cfg = match ScenarioConfig::resolve(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let report = match cli::run(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let dir = cli::output_dir(&cfg, out.as_deref());
            if let Err(e) = cli::write_outputs(&cfg, &report, &dir) {
                return fail(e);
            }
            println!("{}: c0 = {}", cfg.name, cli::fmt_real(report.riccati.c0.0));
            if let Some(j) = report.cost.j_eta {
                println!("{}: J = {}", cfg.name, cli::fmt_real(j.0));
            }
            for s in &report.skipped {
                println!("skipped {}: {}", s.section, s.reason);
            }
            let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
            for c in &failed {
                println!(
                    "check failed: {} (value {}, tolerance {})",
                    c.name,
                    cli::fmt_real(c.value.0),
                    cli::fmt_real(c.tolerance.0)
                );
            }
            println!("wrote {}", dir.display());
            if report.failed_exact().is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Some(Command::Sweep { config, axis, out }) => {
            let cfg = match ScenarioConfig::resolve(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let axis = match axis {
                Axis::Truncation => SweepAxis::Truncation,
                Axis::Steps => SweepAxis::Steps,
                Axis::Perturbation => SweepAxis::Perturbation,
            };
            let table = match cli::sweep(&cfg, axis) {
                Ok(t) => t,
                Err(e) => return fail(e),
            };
            let dir = cli::output_dir(&cfg, out.as_deref());
            let path = dir.join(format!("{}.csv", table.name));
            if let Err(e) =
                std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&path, table.to_csv()))
            {
                return fail(e.into());
            }
            print!("{}", table.to_csv());
            ExitCode::SUCCESS
        }
    }
}
