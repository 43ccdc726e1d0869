use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mte::io::{cmd_bandwidth_sweep, cmd_curve, cmd_estimate, cmd_simulate, MethodChoice, RunConfig};
use mte::{CovariateKind, Result};

#[derive(Parser)]
#[command(name = "mte", version, about = "Semiparametric marginal treatment effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated Monte Carlo experiment over instrument strengths.
    Simulate(Common),
    /// Parameter and target-estimand tables for one sample.
    Estimate(Common),
    /// MTE curve averaged over covariates, with pointwise bands.
    Curve(Common),
    /// Bias of both estimators across propensity bandwidth offsets.
    BandwidthSweep(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Conventional,
    Efficient,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Continuous,
    Discrete,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Instrument strengths, comma separated.
    #[arg(long = "eta-bar", value_delimiter = ',')]
    eta_bar: Option<Vec<f64>>,
    #[arg(long = "poly-order")]
    poly_order: Option<usize>,
    #[arg(long)]
    interactions: bool,
    /// Use the true propensity of the simulation design (diagnostic).
    #[arg(long = "known-propensity")]
    known_propensity: bool,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Evaluation points in (0, 1), comma separated.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Bandwidth offsets for the sweep, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    kappas: Option<Vec<f64>>,
    /// Input CSV; a simulated sample is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "y-col")]
    y_col: Option<String>,
    #[arg(long = "a-col")]
    a_col: Option<String>,
    #[arg(long = "z-col")]
    z_col: Option<String>,
    /// Covariate columns, comma separated.
    #[arg(long = "x-cols", value_delimiter = ',')]
    x_cols: Option<Vec<String>>,
    /// Kernel type per covariate column, comma separated.
    #[arg(long = "x-kinds", value_delimiter = ',', value_enum)]
    x_kinds: Option<Vec<Kind>>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.reps {
            cfg.reps = v;
        }
        if let Some(v) = self.eta_bar {
            cfg.eta_bar = v;
        }
        if let Some(v) = self.poly_order {
            cfg.poly_order = v;
        }
        cfg.interactions |= self.interactions;
        cfg.known_propensity |= self.known_propensity;
        if let Some(m) = self.method {
            cfg.method = match m {
                Method::Conventional => MethodChoice::Conventional,
                Method::Efficient => MethodChoice::Efficient,
                Method::Both => MethodChoice::Both,
            };
        }
        if let Some(v) = self.grid {
            cfg.v_grid = Some(v);
        }
        if let Some(v) = self.kappas {
            cfg.kappas = v;
        }
        if let Some(v) = self.data {
            cfg.data = Some(v);
        }
        if let Some(v) = self.y_col {
            cfg.columns.y = v;
        }
        if let Some(v) = self.a_col {
            cfg.columns.a = v;
        }
        if let Some(v) = self.z_col {
            cfg.columns.z = v;
        }
        if let Some(v) = self.x_cols {
            cfg.columns.x_kinds = vec![CovariateKind::Continuous; v.len()];
            cfg.columns.x = v;
        }
        if let Some(v) = self.x_kinds {
            cfg.columns.x_kinds = v
                .into_iter()
                .map(|k| match k {
                    Kind::Continuous => CovariateKind::Continuous,
                    Kind::Discrete => CovariateKind::Discrete,
                })
                .collect();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c.resolve()?),
        Command::Estimate(c) => cmd_estimate(&c.resolve()?),
        Command::Curve(c) => cmd_curve(&c.resolve()?),
        Command::BandwidthSweep(c) => cmd_bandwidth_sweep(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
