//! Experiment configuration, sweeps over client counts and seeds, CSV output
//! and graph queries.
//!
//! Config grammar, one setting per line:
//!
//! ```text
//! # comment
//! section.key = value
//! ```
//!
//! Sections are `population`, `train`, `dp`, `propensity` and `experiment`.
//! Lists are comma-separated. Keys not given keep their defaults; unknown
//! keys are errors. Floats accept anything `f64::from_str` does, including
//! `inf`.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::mdag::{parse_graph_spec, MdagError};
use crate::model::{DpConfig, TrainConfig};
use crate::orchestrator::{run_simulation, Mode, OrchestratorError, PropensityConfig, RoundLog, SimulationConfig};
use crate::synth::PopulationConfig;

/// Bumped whenever the CSV columns change.
pub const SCHEMA_VERSION: u32 = 1;

/// The shipped default configuration file.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.conf");

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Simulation(#[from] OrchestratorError),
    #[error(transparent)]
    Graph(#[from] MdagError),
    #[error("bad query `{0}`: expected `A; B; C` with comma-separated vertex lists")]
    Query(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub simulation: SimulationConfig,
    pub modes: Vec<Mode>,
    /// Population sizes to sweep; overrides `population.n_users`.
    pub clients: Vec<usize>,
    /// Seeds to sweep; each overrides `population.seed`.
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig {
                population: PopulationConfig::default(),
                train: TrainConfig::default(),
                dp: DpConfig::default(),
                propensity: PropensityConfig::default(),
                test_users: 2000,
            },
            modes: Mode::ALL.to_vec(),
            clients: vec![50, 100, 200, 500, 1000],
            seeds: (0..10).collect(),
            output: Some(PathBuf::from("results.csv")),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn parse_one<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.trim().parse::<T>().map_err(|e| format!("cannot parse `{}`: {e}", v.trim()))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(parse_one).collect()
}

impl ExperimentConfig {
    /// Every setting as `(key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.simulation.population;
        let t = &self.simulation.train;
        let d = &self.simulation.dp;
        let w = &self.simulation.propensity;
        vec![
            ("population.n_users", p.n_users.to_string()),
            ("population.dim_d", p.dim_d.to_string()),
            ("population.dim_x", p.dim_x.to_string()),
            ("population.samples_per_user", p.samples_per_user.to_string()),
            ("population.seed", p.seed.to_string()),
            ("population.true_theta", list(&p.true_theta)),
            ("population.y_d", list(&p.y_d)),
            ("population.y_z", p.y_z.to_string()),
            ("population.z_d", list(&p.z_d)),
            ("population.z_noise", p.z_noise.to_string()),
            ("population.x_z", list(&p.x_z)),
            ("population.x_d", list(&p.x_d)),
            ("population.x_noise", p.x_noise.to_string()),
            ("population.s_intercept", p.s_intercept.to_string()),
            ("population.s_loss", p.s_loss.to_string()),
            ("population.s_x", list(&p.s_x)),
            ("population.s_d", list(&p.s_d)),
            ("population.s_noise", p.s_noise.to_string()),
            ("population.satisfaction_nonresponse", p.satisfaction_nonresponse.to_string()),
            ("population.r_intercept", p.r_intercept.to_string()),
            ("population.r_d", list(&p.r_d)),
            ("population.r_s", p.r_s.to_string()),
            ("population.latency_location_mean", p.latency_location_mean.to_string()),
            ("population.latency_location_sd", p.latency_location_sd.to_string()),
            ("population.latency_scale", p.latency_scale.to_string()),
            ("train.eta", t.eta.to_string()),
            ("train.k", t.k.to_string()),
            ("train.max_iterations", t.max_iterations.to_string()),
            ("train.straggler_cutoff", t.straggler_cutoff.to_string()),
            ("train.rounds", t.rounds.to_string()),
            ("dp.clip_norm", d.clip_norm.to_string()),
            ("dp.noise_sigma", d.noise_sigma.to_string()),
            ("propensity.w_max", w.w_max.to_string()),
            ("propensity.tol", w.tol.to_string()),
            ("propensity.max_iter", w.max_iter.to_string()),
            ("experiment.test_users", self.simulation.test_users.to_string()),
            ("experiment.modes", list(&self.modes)),
            ("experiment.clients", list(&self.clients)),
            ("experiment.seeds", list(&self.seeds)),
            ("experiment.output", self.output.as_ref().map_or(String::new(), |o| o.display().to_string())),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let p = &mut self.simulation.population;
        let t = &mut self.simulation.train;
        let d = &mut self.simulation.dp;
        let w = &mut self.simulation.propensity;
        match key {
            "population.n_users" => p.n_users = parse_one(value)?,
            "population.dim_d" => p.dim_d = parse_one(value)?,
            "population.dim_x" => p.dim_x = parse_one(value)?,
            "population.samples_per_user" => p.samples_per_user = parse_one(value)?,
            "population.seed" => p.seed = parse_one(value)?,
            "population.true_theta" => p.true_theta = parse_list(value)?,
            "population.y_d" => p.y_d = parse_list(value)?,
            "population.y_z" => p.y_z = parse_one(value)?,
            "population.z_d" => p.z_d = parse_list(value)?,
            "population.z_noise" => p.z_noise = parse_one(value)?,
            "population.x_z" => p.x_z = parse_list(value)?,
            "population.x_d" => p.x_d = parse_list(value)?,
            "population.x_noise" => p.x_noise = parse_one(value)?,
            "population.s_intercept" => p.s_intercept = parse_one(value)?,
            "population.s_loss" => p.s_loss = parse_one(value)?,
            "population.s_x" => p.s_x = parse_list(value)?,
            "population.s_d" => p.s_d = parse_list(value)?,
            "population.s_noise" => p.s_noise = parse_one(value)?,
            "population.satisfaction_nonresponse" => p.satisfaction_nonresponse = parse_one(value)?,
            "population.r_intercept" => p.r_intercept = parse_one(value)?,
            "population.r_d" => p.r_d = parse_list(value)?,
            "population.r_s" => p.r_s = parse_one(value)?,
            "population.latency_location_mean" => p.latency_location_mean = parse_one(value)?,
            "population.latency_location_sd" => p.latency_location_sd = parse_one(value)?,
            "population.latency_scale" => p.latency_scale = parse_one(value)?,
            "train.eta" => t.eta = parse_one(value)?,
            "train.k" => t.k = parse_one(value)?,
            "train.max_iterations" => t.max_iterations = parse_one(value)?,
            "train.straggler_cutoff" => t.straggler_cutoff = parse_one(value)?,
            "train.rounds" => t.rounds = parse_one(value)?,
            "dp.clip_norm" => d.clip_norm = parse_one(value)?,
            "dp.noise_sigma" => d.noise_sigma = parse_one(value)?,
            "propensity.w_max" => w.w_max = parse_one(value)?,
            "propensity.tol" => w.tol = parse_one(value)?,
            "propensity.max_iter" => w.max_iter = parse_one(value)?,
            "experiment.test_users" => self.simulation.test_users = parse_one(value)?,
            "experiment.modes" => self.modes = parse_list(value)?,
            "experiment.clients" => self.clients = parse_list(value)?,
            "experiment.seeds" => self.seeds = parse_list(value)?,
            "experiment.output" => {
                let v = value.trim();
                self.output = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses and validates a config; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| ExperimentError::Parse { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| parse_err("expected `section.key = value`".into()))?;
            cfg.set(key.trim(), value).map_err(parse_err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let this = key.split('.').next().unwrap_or("");
            if this != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = this;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ExperimentError::Invalid(m));
        if let Err(e) = self.simulation.population.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.simulation.train.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.simulation.dp.validate() {
            return invalid(e.to_string());
        }
        let w = &self.simulation.propensity;
        if !(w.w_max >= 1.0) {
            return invalid(format!("propensity.w_max must be >= 1, got {}", w.w_max));
        }
        if !(w.tol > 0.0) {
            return invalid(format!("propensity.tol must be > 0, got {}", w.tol));
        }
        if w.max_iter == 0 {
            return invalid("propensity.max_iter must be >= 1".into());
        }
        if self.simulation.test_users == 0 {
            return invalid("experiment.test_users must be >= 1".into());
        }
        if self.modes.is_empty() {
            return invalid("experiment.modes must not be empty".into());
        }
        if self.clients.is_empty() || self.clients.contains(&0) {
            return invalid("experiment.clients must be a nonempty list of positive counts".into());
        }
        if self.seeds.is_empty() {
            return invalid("experiment.seeds must not be empty".into());
        }
        Ok(())
    }
}

/// One CSV row: a round of one (mode, clients, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub mode: Mode,
    pub n_clients: usize,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub full_risk: f64,
    pub observed_risk: f64,
    pub m_responsive: usize,
    /// Empty outside floss mode.
    pub solver_converged: Option<bool>,
    pub solver_iterations: Option<usize>,
    pub solver_residual: Option<f64>,
    pub solver_condition: Option<f64>,
    /// Sup-norm of the moments per solver iteration, `;`-separated.
    pub solver_trajectory: String,
    pub uniform_fallback: bool,
    pub clipped_weights: usize,
    pub straggler_drops: usize,
    pub skipped_iterations: usize,
    pub mean_gradient_norm: f64,
    pub aborted: bool,
}

impl ResultRow {
    fn from_log(n_clients: usize, seed: u64, log: &RoundLog) -> Self {
        let s = log.solver.as_ref();
        Self {
            schema_version: SCHEMA_VERSION,
            mode: log.mode,
            n_clients,
            seed,
            round: log.round,
            accuracy: log.accuracy,
            full_risk: log.full_risk,
            observed_risk: log.observed_risk,
            m_responsive: log.m_responsive,
            solver_converged: s.map(|s| s.converged),
            solver_iterations: s.map(|s| s.diagnostics.iterations),
            solver_residual: s.map(|s| s.final_residual_norm),
            solver_condition: s.map(|s| s.diagnostics.jacobian_condition),
            solver_trajectory: s.map_or(String::new(), |s| {
                s.diagnostics.residual_trajectory.iter().map(|r| format!("{r:e}")).collect::<Vec<_>>().join(";")
            }),
            uniform_fallback: s.is_some_and(|s| s.fallback.is_some()),
            clipped_weights: log.clipped_weights,
            straggler_drops: log.dropped.iter().map(Vec::len).sum(),
            skipped_iterations: log.skipped_iterations,
            mean_gradient_norm: log.mean_gradient_norm,
            aborted: log.aborted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    /// Sorted by mode, client count, seed, round.
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Replaces `path` with the CSV.
    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let io_err = |source| ExperimentError::Io { path: path.to_owned(), source };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf)?;
        buf.flush().map_err(io_err)
    }

    /// Mean final-round accuracy of a (mode, clients) cell across seeds.
    pub fn mean_final_accuracy(&self, mode: Mode, n_clients: usize) -> Option<f64> {
        let last = self.rows.iter().filter(|r| r.mode == mode && r.n_clients == n_clients).map(|r| r.round).max()?;
        let finals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode && r.n_clients == n_clients && r.round == last)
            .map(|r| r.accuracy)
            .collect();
        Some(finals.iter().sum::<f64>() / finals.len() as f64)
    }
}

/// Runs one simulation per (mode, clients, seed), in parallel.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &mode in &cfg.modes {
        for &n in &cfg.clients {
            for &seed in &cfg.seeds {
                cells.push((mode, n, seed));
            }
        }
    }
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(mode, n, seed)| {
            let mut sim = cfg.simulation.clone();
            sim.population.n_users = n;
            let out = run_simulation(&sim, mode, seed)?;
            Ok(out.rounds.iter().map(|log| ResultRow::from_log(n, seed, log)).collect())
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<ResultRow> = per_cell.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.mode, r.n_clients, r.seed, r.round));
    Ok(ExperimentResult { rows })
}

/// Answers `A; B; C` against a graph spec: whether `A` and `B` are
/// d-separated given `C`, and if not, one open path.
pub fn dsep_check(graph_text: &str, query: &str) -> Result<String> {
    let graph = parse_graph_spec(graph_text)?;
    let parts: Vec<&str> = query.split(';').collect();
    if parts.len() != 3 {
        return Err(ExperimentError::Query(query.to_string()));
    }
    let sets: Vec<Vec<&str>> =
        parts.iter().map(|p| p.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()).collect();
    if sets[0].is_empty() || sets[1].is_empty() {
        return Err(ExperimentError::Query(query.to_string()));
    }
    let (a, b, c) = (&sets[0], &sets[1], &sets[2]);
    if graph.d_separated(a, b, c)? {
        return Ok("d-separated".to_string());
    }
    let mut verdict = "not d-separated".to_string();
    match graph.open_path(a, b, c) {
        Ok(Some(path)) => verdict.push_str(&format!("\nopen path: {path}")),
        Ok(None) => {}
        Err(MdagError::TooLarge { .. }) => verdict.push_str("\n(graph too large to list an open path)"),
        Err(e) => return Err(e.into()),
    }
    Ok(verdict)
}
