//! Federated training rounds with participation-aware client sampling.
//!
//! Each round prompts every user, optionally fits response propensities,
//! then runs `max_iterations` sampled SGD updates. Four modes differ only in
//! who is eligible and how eligible users are weighted:
//!
//! | mode        | eligible      | weight                    | timeouts |
//! |-------------|---------------|---------------------------|----------|
//! | full        | everyone      | 1                         | no       |
//! | uncorrected | responders    | 1                         | yes      |
//! | oracle      | responders    | `min(1/true_pi, w_max)`   | yes      |
//! | floss       | responders    | `min(1/pi_hat, w_max)`    | yes      |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    aggregate, evaluate_accuracy, local_gradient, local_loss, norm, privatize, sgd_step, Dataset, DpConfig,
    ModelError, ModelParams, TrainConfig,
};
use crate::propensity::{
    compute_weights, oracle_weights, solve_shadow_equations, PropensityBasis, PropensityError, SolverDiagnostics,
    SolverOptions, WeightTable,
};
use crate::rng::{stream, Stream};
use crate::synth::{
    draw_latency, generate_population, generate_test_set, refresh_round_state, PopulationConfig, SynthError,
    UserRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("no candidates to sample from")]
    NoCandidates,
    #[error("sampling weight {weight} for candidate {index} is not positive and finite")]
    BadWeight { index: usize, weight: f64 },
    #[error("round {round}: no user agreed to participate")]
    NoResponsiveUsers { round: usize },
    #[error("empty population")]
    EmptyPopulation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    FullParticipation,
    #[serde(rename = "uncorrected")]
    UncorrectedMnar,
    #[serde(rename = "oracle")]
    OracleCorrection,
    #[serde(rename = "floss")]
    FlossCorrection,
}

impl Mode {
    pub const ALL: [Mode; 4] =
        [Mode::FullParticipation, Mode::UncorrectedMnar, Mode::OracleCorrection, Mode::FlossCorrection];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FullParticipation => "full",
            Mode::UncorrectedMnar => "uncorrected",
            Mode::OracleCorrection => "oracle",
            Mode::FlossCorrection => "floss",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected full, uncorrected, oracle or floss)"))
    }
}

/// Propensity fitting knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub w_max: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { w_max: 50.0, tol: 1e-8, max_iter: 200 }
    }
}

/// Outcome of the propensity fit in a floss round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverLog {
    pub converged: bool,
    pub beta: Vec<f64>,
    pub final_residual_norm: f64,
    pub diagnostics: SolverDiagnostics,
    /// Set when the round fell back to uniform weights.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub mode: Mode,
    /// Users with `R = 1` after this round's prompt.
    pub m_responsive: usize,
    pub solver: Option<SolverLog>,
    /// Weights that hit `w_max` (oracle and floss modes).
    pub clipped_weights: usize,
    /// Sampled user ids, one list per iteration.
    pub sampled: Vec<Vec<usize>>,
    /// Sampled users whose upload timed out, one list per iteration.
    pub dropped: Vec<Vec<usize>>,
    /// Iterations in which every sampled user timed out.
    pub skipped_iterations: usize,
    /// Mean norm of the aggregated gradient over applied updates; 0 if none.
    pub mean_gradient_norm: f64,
    pub accuracy: f64,
    pub full_risk: f64,
    /// Mean loss over this round's responders; NaN if there are none.
    pub observed_risk: f64,
    /// The round was abandoned before training.
    pub aborted: bool,
}

/// Independent random streams consumed by a run.
pub struct RoundStreams {
    pub prompt: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
    pub latency: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl RoundStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            prompt: stream(seed, Stream::Prompt),
            sampling: stream(seed, Stream::Sampling),
            latency: stream(seed, Stream::Latency),
            noise: stream(seed, Stream::Noise),
        }
    }
}

/// Walker/Vose alias table. Every draw consumes one index and one coin,
/// whatever the weights, so equal-weight tables reproduce uniform draws.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(OrchestratorError::NoCandidates);
        }
        for (index, &weight) in weights.iter().enumerate() {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(OrchestratorError::BadWeight { index, weight });
            }
        }
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        if weights.iter().all(|&w| w == weights[0]) {
            return Ok(Self { prob, alias });
        }
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding.
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        let coin: f64 = rng.random();
        if coin < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// `k` independent draws with replacement, each proportional to weight.
pub fn weighted_sample<R: Rng + ?Sized>(
    candidates: &[usize],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if candidates.len() != weights.len() {
        return Err(ModelError::DimensionMismatch { expected: candidates.len(), got: weights.len() }.into());
    }
    let table = AliasTable::new(weights)?;
    Ok((0..k).map(|_| candidates[table.sample(rng)]).collect())
}

/// Losses of the current model over responders and over everyone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskGap {
    /// Mean over `R = 1` users; NaN when nobody responded.
    pub observed_risk: f64,
    pub full_risk: f64,
}

pub fn empirical_risk_gap(users: &[UserRecord], theta: &ModelParams) -> Result<RiskGap> {
    let mut full = 0.0;
    let mut observed = 0.0;
    let mut m = 0usize;
    for u in users {
        let l = local_loss(theta, &u.dataset)?;
        full += l;
        if u.r {
            observed += l;
            m += 1;
        }
    }
    Ok(RiskGap { observed_risk: observed / m as f64, full_risk: full / users.len() as f64 })
}

/// `sum_{R=1} w_u L_u / n` with the table's weights. Ids index `users`.
pub fn ipw_risk(users: &[UserRecord], theta: &ModelParams, weights: &WeightTable) -> Result<f64> {
    let mut total = 0.0;
    for (&id, &w) in weights.ids.iter().zip(&weights.weights) {
        total += w * local_loss(theta, &users[id].dataset)?;
    }
    Ok(total / users.len() as f64)
}

/// Everything a round needs besides the population and the model.
pub struct RoundContext<'a> {
    pub population: &'a PopulationConfig,
    pub train: &'a TrainConfig,
    pub dp: &'a DpConfig,
    pub propensity: &'a PropensityConfig,
    pub test_set: &'a Dataset,
}

/// One round: prompt, fit weights (floss), sample-train-aggregate
/// `max_iterations` times, evaluate.
pub fn run_round(
    users: &mut [UserRecord],
    theta: &ModelParams,
    round: usize,
    mode: Mode,
    ctx: &RoundContext<'_>,
    rng: &mut RoundStreams,
) -> Result<(ModelParams, RoundLog)> {
    if users.is_empty() {
        return Err(OrchestratorError::EmptyPopulation);
    }
    refresh_round_state(users, theta, ctx.population, &mut rng.prompt)?;
    let m_responsive = users.iter().filter(|u| u.r).count();
    let responders = || users.iter().filter(|u| u.r).map(|u| u.id).collect::<Vec<_>>();

    let mut solver = None;
    let table = match mode {
        Mode::FullParticipation => WeightTable::uniform(users.iter().map(|u| u.id).collect()),
        _ if m_responsive == 0 => return Err(OrchestratorError::NoResponsiveUsers { round }),
        Mode::UncorrectedMnar => WeightTable::uniform(responders()),
        Mode::OracleCorrection => oracle_weights(users, ctx.propensity.w_max)?,
        Mode::FlossCorrection => {
            let (table, log) = floss_weights(users, ctx)?;
            solver = Some(log);
            table.unwrap_or_else(|| WeightTable::uniform(responders()))
        }
    };
    // Ids are positions in `users`.
    debug_assert!(table.ids.iter().all(|&id| users[id].id == id));

    let alias = AliasTable::new(&table.weights)?;
    let timeouts = mode != Mode::FullParticipation;
    let mut theta = theta.clone();
    let mut sampled = Vec::with_capacity(ctx.train.max_iterations);
    let mut dropped = Vec::with_capacity(ctx.train.max_iterations);
    let mut skipped_iterations = 0;
    let mut norm_sum = 0.0;
    let mut applied = 0usize;

    for _ in 0..ctx.train.max_iterations {
        let picks: Vec<usize> = (0..ctx.train.k).map(|_| table.ids[alias.sample(&mut rng.sampling)]).collect();
        let mut survivors = Vec::with_capacity(picks.len());
        let mut late = Vec::new();
        for &id in &picks {
            let g = local_gradient(&theta, &users[id].dataset)?;
            let g = privatize(&g, ctx.dp, &mut rng.noise);
            if timeouts && draw_latency(&users[id], &mut rng.latency) > ctx.train.straggler_cutoff {
                late.push(id);
            } else {
                survivors.push(g);
            }
        }
        if survivors.is_empty() {
            skipped_iterations += 1;
        } else {
            let g_bar = aggregate(&survivors)?;
            norm_sum += norm(&g_bar);
            applied += 1;
            theta = sgd_step(&theta, &g_bar, ctx.train.eta)?;
        }
        sampled.push(picks);
        dropped.push(late);
    }

    let gap = empirical_risk_gap(users, &theta)?;
    let log = RoundLog {
        round,
        mode,
        m_responsive,
        solver,
        clipped_weights: table.clipped,
        sampled,
        dropped,
        skipped_iterations,
        mean_gradient_norm: if applied > 0 { norm_sum / applied as f64 } else { 0.0 },
        accuracy: evaluate_accuracy(&theta, ctx.test_set)?,
        full_risk: gap.full_risk,
        observed_risk: gap.observed_risk,
        aborted: false,
    };
    Ok((theta, log))
}

/// Fits propensities; `None` means fall back to uniform weights.
fn floss_weights(users: &[UserRecord], ctx: &RoundContext<'_>) -> Result<(Option<WeightTable>, SolverLog)> {
    let basis = PropensityBasis::standard(ctx.population.dim_d);
    let opts = SolverOptions { init: None, tol: ctx.propensity.tol, max_iter: ctx.propensity.max_iter };
    let failed = |reason: String| SolverLog {
        converged: false,
        beta: Vec::new(),
        final_residual_norm: f64::NAN,
        diagnostics: SolverDiagnostics::default(),
        fallback: Some(reason),
    };
    let model = match solve_shadow_equations(users, &basis, &opts) {
        Ok(model) => model,
        Err(e @ PropensityError::MissingSatisfaction { .. }) => return Err(e.into()),
        Err(e) => return Ok((None, failed(e.to_string()))),
    };
    let mut log = SolverLog {
        converged: model.converged,
        beta: model.beta.clone(),
        final_residual_norm: model.final_residual_norm,
        diagnostics: model.diagnostics.clone(),
        fallback: None,
    };
    if !model.converged {
        log.fallback = Some(format!("solver stopped at residual {:e}", model.final_residual_norm));
        return Ok((None, log));
    }
    Ok((Some(compute_weights(&model, users, ctx.propensity.w_max)?), log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub population: PopulationConfig,
    pub train: TrainConfig,
    pub dp: DpConfig,
    pub propensity: PropensityConfig,
    /// Users drawn for the held-out evaluation set.
    pub test_users: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub theta: ModelParams,
    pub rounds: Vec<RoundLog>,
}

/// Trains from a zero model for `train.rounds` rounds. `seed` replaces the
/// population seed; the test set and every round stream derive from it.
///
/// A round in which nobody responds is logged as aborted and leaves the
/// model unchanged.
pub fn run_simulation(cfg: &SimulationConfig, mode: Mode, seed: u64) -> Result<SimulationOutput> {
    cfg.train.validate()?;
    cfg.dp.validate()?;
    let population = PopulationConfig { seed, ..cfg.population.clone() };
    let mut users = generate_population(&population)?;
    let test_set = generate_test_set(&population, cfg.test_users)?;
    let ctx = RoundContext {
        population: &population,
        train: &cfg.train,
        dp: &cfg.dp,
        propensity: &cfg.propensity,
        test_set: &test_set,
    };
    let mut rng = RoundStreams::new(seed);
    let mut theta = ModelParams::zeros(population.dim_x);
    let mut rounds = Vec::with_capacity(cfg.train.rounds);
    for round in 0..cfg.train.rounds {
        match run_round(&mut users, &theta, round, mode, &ctx, &mut rng) {
            Ok((next, log)) => {
                theta = next;
                rounds.push(log);
            }
            Err(OrchestratorError::NoResponsiveUsers { .. }) => {
                let gap = empirical_risk_gap(&users, &theta)?;
                rounds.push(RoundLog {
                    round,
                    mode,
                    m_responsive: 0,
                    solver: None,
                    clipped_weights: 0,
                    sampled: Vec::new(),
                    dropped: Vec::new(),
                    skipped_iterations: 0,
                    mean_gradient_norm: 0.0,
                    accuracy: evaluate_accuracy(&theta, &test_set)?,
                    full_risk: gap.full_risk,
                    observed_risk: gap.observed_risk,
                    aborted: true,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SimulationOutput { theta, rounds })
}
