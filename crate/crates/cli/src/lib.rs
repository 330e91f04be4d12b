//! Command-line front end: instance generation, protocol tables, simulation,
//! ensemble statistics and stage-one benchmarks.

pub mod commands;
pub mod config;
pub mod stats;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use weighted_cd::model::{AnsatzKind, IsingClass};

pub use commands::*;
pub use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("resource guard: {0}")]
    Resource(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Resource(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<weighted_cd::Error> for CliError {
    fn from(e: weighted_cd::Error) -> Self {
        use weighted_cd::Error as E;
        match e {
            E::InvalidInput(_) | E::Parse(_) => CliError::Config(e.to_string()),
            E::ResourceGuard(_) => CliError::Resource(e.to_string()),
            E::Io(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "wcd", version, about = "Weighted variational counterdiabatic driving experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate random Ising instances (`count` seeds starting at `seed`).
    Gen(Flags),
    /// Compute protocol tables for each K, reusing cached traces.
    Coeffs(Flags),
    /// Evolve with no driving and with each protocol table; writes fidelity traces and a summary.
    Simulate(Flags),
    /// Generate, solve and simulate an instance ensemble; resumable.
    Ensemble(Flags),
    /// Time stage one on 1D chains and fit the log-log slope.
    Bench(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ferro, antiferro or spin-glass.
    #[arg(long)]
    pub class: Option<IsingClass>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Polynomial degrees, comma separated.
    #[arg(short = 'K', value_delimiter = ',')]
    pub k: Vec<usize>,
    /// one-body or two-body.
    #[arg(long)]
    pub ansatz: Option<AnsatzKind>,
    /// Number of λ grid points.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Driving times, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub td: Vec<f64>,
    /// Output root (default: $WCD_OUT, else ./wcd_out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, overrides_with = "no_cache")]
    pub cache: bool,
    #[arg(long = "no-cache", overrides_with = "cache")]
    pub no_cache: bool,
    /// Bench chain lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
}

impl Flags {
    pub fn overrides(&self) -> Overrides {
        let list = |v: &Vec<usize>| (!v.is_empty()).then(|| v.clone());
        Overrides {
            class: self.class,
            width: self.width,
            height: self.height,
            seed: self.seed,
            count: self.count,
            k: list(&self.k),
            ansatz: self.ansatz,
            grid: self.grid,
            td: (!self.td.is_empty()).then(|| self.td.clone()),
            out: self.out.clone(),
            threads: self.threads,
            cache: if self.cache {
                Some(true)
            } else if self.no_cache {
                Some(false)
            } else {
                None
            },
            sizes: list(&self.sizes),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let flags = match &cli.command {
        Command::Gen(f) | Command::Coeffs(f) | Command::Simulate(f) | Command::Ensemble(f) | Command::Bench(f) => f,
    };
    let cfg = flags.resolve()?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Gen(_) => {
            for p in cmd_gen(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Coeffs(_) => {
            for r in cmd_coeffs(&cfg)? {
                for t in &r.tables {
                    println!("{}", t.dir.join(format!("{}.csv", t.stem)).display());
                }
            }
        }
        Command::Simulate(_) => {
            println!("seed\tt_d\tdriving\tF_f\tG_f");
            for r in cmd_simulate(&cfg)? {
                let d = r.k.map(|k| format!("K={k}")).unwrap_or_else(|| "none".into());
                let g = r.g_f.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into());
                println!("{}\t{}\t{d}\t{:.6e}\t{g}", r.seed, r.t_d, r.f_f);
            }
        }
        Command::Ensemble(_) => {
            let rep = cmd_ensemble(&cfg)?;
            println!("N\tt_d\tdriving\tn\tF_median\tG_median\tG>1");
            for s in &rep.stats {
                let d = s.k.map(|k| format!("K={k}")).unwrap_or_else(|| "none".into());
                let g = s.g.map(|g| format!("{:.4}", g.1)).unwrap_or_else(|| "-".into());
                let a = s.g_above_one.map(|x| format!("{:.2}", x)).unwrap_or_else(|| "-".into());
                println!("{}\t{}\t{d}\t{}\t{:.6e}\t{g}\t{a}", s.nspins, s.t_d, s.n, s.f.1);
            }
            println!("{}", rep.dir.join("stats.csv").display());
        }
        Command::Bench(_) => {
            cmd_bench(&cfg)?;
        }
    }
    Ok(())
}
