use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use floss_core::experiment::{dsep_check, run_sweep, ExperimentConfig, ExperimentError};
use floss_core::orchestrator::Mode;
use floss_core::synth::{dump_population, generate_population, SynthError};

/// Federated learning simulator with participation-aware client sampling.
#[derive(Parser)]
#[command(name = "floss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode on one population and write per-round results.
    Run {
        /// Config file; the built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides population.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "floss")]
        mode: Mode,
    },
    /// Run every mode x client count x seed cell and write one CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides experiment.output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask whether two vertex sets are d-separated given a third.
    DsepCheck {
        /// Graph spec file.
        graph: PathBuf,
        /// `A; B; C`, each a comma-separated vertex list (C may be empty).
        query: String,
    },
    /// Write a synthetic population as tab-separated text.
    GenPopulation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Config(String),
    Io(String),
    Graph(String),
    Simulation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Io(_) => 4,
            Failure::Graph(_) => 5,
            Failure::Simulation(_) => 6,
        }
    }

    fn report(&self) -> String {
        match self {
            Failure::Config(m) => format!("config error: {m}"),
            Failure::Io(m) => format!("i/o error: {m}"),
            Failure::Graph(m) => format!("graph error: {m}"),
            Failure::Simulation(m) => format!("simulation error: {m}"),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let m = e.to_string();
        match e {
            ExperimentError::Parse { .. } | ExperimentError::Invalid(_) => Failure::Config(m),
            ExperimentError::Io { .. } | ExperimentError::Csv(_) => Failure::Io(m),
            ExperimentError::Graph(_) | ExperimentError::Query(_) => Failure::Graph(m),
            ExperimentError::Simulation(_) => Failure::Simulation(m),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(e) => Failure::Io(e.to_string()),
            SynthError::InvalidConfig(m) => Failure::Config(m),
            e => Failure::Simulation(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            Box::new(std::io::BufWriter::new(f))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, seed, mode } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.modes = vec![mode];
            cfg.clients = vec![cfg.simulation.population.n_users];
            cfg.seeds = vec![seed.unwrap_or(cfg.simulation.population.seed)];
            let result = run_sweep(&cfg)?;
            let mut w = open_out(out.as_deref())?;
            result.write_csv(&mut w)?;
            w.flush().map_err(|e| Failure::Io(e.to_string()))?;
            if let Some(last) = result.rows.last() {
                eprintln!("{mode}: final accuracy {:.4} after {} rounds", last.accuracy, last.round + 1);
            }
        }
        Command::Sweep { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| Failure::Config("no output path: pass --out or set experiment.output".into()))?;
            let result = run_sweep(&cfg)?;
            result.write_csv_file(&out)?;
            eprintln!("wrote {} rows to {}", result.rows.len(), out.display());
            eprintln!("mean final accuracy:");
            for &n in &cfg.clients {
                let cells: Vec<String> = cfg
                    .modes
                    .iter()
                    .filter_map(|&m| result.mean_final_accuracy(m, n).map(|a| format!("{m}={a:.4}")))
                    .collect();
                eprintln!("  n={n:<6} {}", cells.join("  "));
            }
        }
        Command::DsepCheck { graph, query } => {
            let text = std::fs::read_to_string(&graph).map_err(|e| Failure::Io(format!("{}: {e}", graph.display())))?;
            println!("{}", dsep_check(&text, &query)?);
        }
        Command::GenPopulation { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mut population = cfg.simulation.population;
            if let Some(seed) = seed {
                population.seed = seed;
            }
            let users = generate_population(&population)?;
            let mut w = open_out(out.as_deref())?;
            dump_population(&users, &mut w)?;
            w.flush().map_err(|e| Failure::Io(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("floss: {}", f.report());
            ExitCode::from(f.code())
        }
    }
}
