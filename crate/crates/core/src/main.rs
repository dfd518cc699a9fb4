use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use passive_sync::experiments::{
    bound_rows, emit_results, load_config, map_rows, run_monte_carlo, run_rows, simulate_rows, ExperimentConfig,
    OutputFormat, Row,
};
use passive_sync::Result;

#[derive(Parser)]
#[command(name = "passync", version, about = "Passive clock synchronization: simulation, bounds and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one measurement campaign.
    Simulate(Common),
    /// Clock bounds at the configured checkpoints.
    Bounds(Common),
    /// Root bound of the clock offset over a position lattice.
    Map(Common),
    /// One online estimation run.
    Run(Common),
    /// Monte Carlo RMSE against the bounds.
    Mc {
        #[command(flatten)]
        common: Common,
        /// Override `experiment.trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `experiment.format`.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(f) = self.format {
            cfg.experiment.format = match f {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            };
        }
        Ok(cfg)
    }

    fn emit<T: Row>(&self, cfg: &ExperimentConfig, rows: &[T]) -> Result<()> {
        let path = self.out.clone().or_else(|| cfg.experiment.output.as_ref().map(PathBuf::from));
        emit_results(rows, cfg.scene.master.len(), cfg.experiment.format, path.as_deref())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            c.emit(&cfg, &simulate_rows(&cfg)?)
        }
        Command::Bounds(c) => {
            let cfg = c.load()?;
            c.emit(&cfg, &bound_rows(&cfg)?)
        }
        Command::Map(c) => {
            let cfg = c.load()?;
            c.emit(&cfg, &map_rows(&cfg)?)
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            c.emit(&cfg, &run_rows(&cfg)?)
        }
        Command::Mc { common, trials } => {
            let mut cfg = common.load()?;
            if let Some(t) = trials {
                cfg.experiment.trials = t;
            }
            let table = run_monte_carlo(&cfg)?;
            if table.failed_trials > 0 {
                eprintln!("excluded {} failed trial(s)", table.failed_trials);
            }
            common.emit(&cfg, &table.rows)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
