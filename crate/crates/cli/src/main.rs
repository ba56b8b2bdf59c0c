use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pacomp_core::baselines::Scheme;
use pacomp_core::experiment::{self, SolutionDocument};
use pacomp_core::{Error, ExperimentConfig, Scale};

#[derive(Parser)]
#[command(name = "pacomp", version, about = "Pinching-antenna CoMP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace of one training run plus the reference oracle row (CSV).
    Convergence(Common),
    /// Seed-averaged sum rate of every scheme over the power grid (CSV).
    SweepPower(Common),
    /// Seed-averaged sum rate and QoS infeasibility over the threshold grid (CSV).
    SweepThreshold(Common),
    /// Solve one instance and write the solution document (JSON).
    Train {
        #[command(flatten)]
        common: Common,
        /// gml, pga, equidistant, wdma or ula.
        #[arg(long, default_value = "gml")]
        scheme: String,
    },
    /// Recompute rates and feasibility of a stored solution (JSON).
    Evaluate {
        solution: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take the scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list for the sweeps.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// ci, desk or paper.
    #[arg(long)]
    scale: Option<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let scale = self.scale.as_deref().map(str::parse::<Scale>).transpose()?;
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("experiment.seed={s}"));
        }
        if let Some(list) = &self.seeds {
            let items: Vec<String> = list.iter().map(u64::to_string).collect();
            sets.push(format!("experiment.seeds=[{}]", items.join(",")));
        }
        if let Some(p) = &self.out {
            sets.push(format!("experiment.out=\"{}\"", p.display().to_string().replace('\\', "\\\\")));
        }
        Ok(ExperimentConfig::from_toml_str(&text, scale, &sets)?)
    }
}

fn emit(out: Option<&Path>, body: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let progress = |x: f64, seed: u64| eprintln!("grid {x} seed {seed}");
    match cli.command {
        Command::Convergence(c) => {
            let config = c.load()?;
            let r = experiment::run_convergence(&config)?;
            emit(config.experiment.out.as_deref().map(Path::new), &r.csv)
        }
        Command::SweepPower(c) => {
            let config = c.load()?;
            let (csv, _) = experiment::run_power_sweep(&config, progress)?;
            emit(config.experiment.out.as_deref().map(Path::new), &csv)
        }
        Command::SweepThreshold(c) => {
            let config = c.load()?;
            let (csv, _) = experiment::run_threshold_sweep(&config, progress)?;
            emit(config.experiment.out.as_deref().map(Path::new), &csv)
        }
        Command::Train { common, scheme } => {
            let config = common.load()?;
            let scheme: Scheme = scheme.parse()?;
            let doc = experiment::run_solve(&config, scheme)?;
            emit(config.experiment.out.as_deref().map(Path::new), &(doc.to_json() + "\n"))
        }
        Command::Evaluate { solution, out } => {
            let text = fs::read_to_string(&solution).with_context(|| format!("reading {}", solution.display()))?;
            let doc = SolutionDocument::from_json(&text)?;
            let report = experiment::evaluate(&doc)?;
            let body = serde_json::to_string_pretty(&report)? + "\n";
            emit(out.as_deref(), &body)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Schema { .. }) => 2,
        Some(Error::Numerical(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
