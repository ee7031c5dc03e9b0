use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use landau_cert::commands::{self, certificate_summary, Overrides};
use landau_cert::config::Config;
use landau_cert::output::SCHEMAS;

/// Deterministic-particle Landau solver with grid oracle and
/// relative-entropy certificates.
#[derive(Parser)]
#[command(name = "landau-cert", version)]
struct Cli {
    /// Print the output file schemas and exit.
    #[arg(long)]
    schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Particle run; writes trajectory.tsv and snapshots.jsonl.
    Simulate(RunArgs),
    /// Grid solver run; writes oracle.tsv.
    Oracle(RunArgs),
    /// Certified run; writes certificate.json, certificate.tsv and trajectory.tsv.
    Certify(RunArgs),
    /// Key inequality, Pinsker and coercivity suite; writes margins.tsv and coercivity.tsv.
    Verify(RunArgs),
    /// Diagnostics from a snapshot file; writes diagnose.tsv.
    Diagnose(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed-order compensated reductions for bitwise reproducibility.
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            deterministic: self.deterministic,
            out: self.out.clone(),
            threads: self.threads,
        }
    }
}

fn run(command: &Command, cfg: &Config) -> Result<()> {
    match command {
        Command::Simulate(_) => {
            let out = commands::simulate(cfg)?;
            println!("{} steps; trajectory {}", out.steps, out.trajectory.display());
        }
        Command::Oracle(_) => {
            let out = commands::oracle(cfg)?;
            let clipped = out.clipped_mass.last().copied().unwrap_or(0.0);
            println!("oracle {}; clipped mass {clipped:e}", out.path.display());
        }
        Command::Certify(_) => {
            let out = commands::certify(cfg)?;
            println!("{}", certificate_summary(&out.report));
            println!("certificate {}", out.json.display());
        }
        Command::Verify(_) => {
            let out = commands::verify(cfg)?;
            let worst = out.rows.iter().map(|r| r.raw.margin).fold(f64::INFINITY, f64::min);
            println!("{} pairs; smallest margin {worst:e}; C_abs {:e}", out.rows.len(), out.c_abs);
            println!("margins {}", out.margins.display());
        }
        Command::Diagnose(_) => {
            let out = commands::diagnose(cfg)?;
            println!("{} snapshots; {}", out.rows, out.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.schema {
        print!("{SCHEMAS}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand; see --help");
        return ExitCode::from(2);
    };
    let args = match &command {
        Command::Simulate(a)
        | Command::Oracle(a)
        | Command::Certify(a)
        | Command::Verify(a)
        | Command::Diagnose(a) => a,
    };
    let cfg = match Config::load(&args.config).and_then(|c| commands::prepare(c, &args.overrides())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if cfg.run.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
