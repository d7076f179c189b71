use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use manp_core::runner::{self, convergence_study, DtRule, RunConfig};
use manp_core::transport::Scheme;

#[derive(Parser)]
#[command(
    name = "manp",
    version,
    about = "Maxwell-Ampere Nernst-Planck simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a built-in example with desk-scale defaults.
    Example {
        #[arg(long)]
        id: u32,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// Turn both corrections on or off.
        #[arg(long)]
        corrections: Option<bool>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the effective config instead of running.
        #[arg(long)]
        print_config: bool,
    },
    /// Convergence study against the exact solution of example 1.
    Converge {
        #[arg(long, default_value_t = 1)]
        id: u32,
        #[arg(long, value_enum, default_value = "euler")]
        scheme: SchemeArg,
        /// Mesh widths, coarsest first.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        /// Fixed time step; by default dt = h^2 (euler) or h/500 (bdf2).
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
    },
    /// Materialize a config and report its initial-state invariants.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Euler,
    Bdf2,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Bdf2 => Scheme::Bdf2,
        }
    }
}

fn print_summary(s: &runner::RunSummary) {
    println!("wrote {}", s.output_dir.display());
    println!("steps: {}  wall time: {:.2}s", s.steps, s.wall_time_s);
    let d = &s.final_diagnostics;
    println!(
        "t = {}  mass = {:?}  min c = {:?}\nenergy = {:e}  gauss = {:e}  faraday = {:e}",
        d.t, d.mass, d.min_c, d.energy, d.gauss_residual, d.faraday_residual
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            print_summary(&runner::run(&cfg)?);
        }
        Command::Example {
            id,
            n,
            dt,
            t_final,
            scheme,
            corrections,
            out,
            print_config,
        } => {
            let mut cfg = RunConfig::example(id)?;
            if let Some(n) = n {
                cfg.grid.nx = n;
                cfg.grid.ny = n;
            }
            if let Some(dt) = dt {
                cfg.time.dt = dt;
            }
            if let Some(t) = t_final {
                cfg.time.t_final = t;
                cfg.output.snapshot_times.retain(|&s| s <= t);
            }
            if let Some(s) = scheme {
                cfg.scheme = s.into();
            }
            if let Some(on) = corrections {
                cfg.corrections.gauss = Some(on);
                cfg.corrections.faraday = Some(on);
            }
            if let Some(out) = out {
                cfg.output.directory = out;
            }
            cfg.validate()?;
            if print_config {
                print!("{}", cfg.to_toml());
            } else {
                print_summary(&runner::run(&cfg)?);
            }
        }
        Command::Converge {
            id,
            scheme,
            levels,
            dt,
            t_final,
        } => {
            if levels.is_empty() {
                bail!("at least one level is required");
            }
            let mut cfg = RunConfig::example(id)?;
            cfg.scheme = scheme.into();
            cfg.time.t_final = t_final;
            cfg.time.dt = t_final;
            cfg.output.snapshot_times.clear();
            let rule = match (dt, cfg.scheme) {
                (Some(dt), _) => DtRule::Fixed(dt),
                (None, Scheme::Euler) => DtRule::HSquared,
                (None, Scheme::Bdf2) => DtRule::HOver(500.0),
            };
            let report = convergence_study(&cfg, &levels, rule)?;
            print!("{report}");
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            println!("{}", runner::validate(&cfg)?);
        }
    }
    Ok(())
}
