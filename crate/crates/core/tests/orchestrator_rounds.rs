mod common;

use common::mean;
use floss_core::experiment::{run_sweep, ExperimentConfig, DEFAULT_CONFIG};
use floss_core::model::{local_loss, DpConfig, ModelParams, TrainConfig};
use floss_core::orchestrator::{
    empirical_risk_gap, ipw_risk, run_round, run_simulation, Mode, OrchestratorError, PropensityConfig,
    RoundContext, RoundStreams, SimulationConfig,
};
use floss_core::propensity::oracle_weights;
use floss_core::rng::{stream, Stream};
use floss_core::synth::{draw_latency, generate_population, generate_test_set, PopulationConfig};

fn sim(n: usize) -> SimulationConfig {
    SimulationConfig {
        population: PopulationConfig { n_users: n, ..PopulationConfig::default() },
        train: TrainConfig { rounds: 4, max_iterations: 10, ..TrainConfig::default() },
        dp: DpConfig::disabled(),
        propensity: PropensityConfig::default(),
        test_users: 200,
    }
}

#[test]
fn without_missingness_every_mode_trains_identically() {
    let mut cfg = sim(150);
    cfg.population.r_intercept = 40.0;
    cfg.population.r_d = vec![0.0];
    cfg.population.r_s = 0.0;
    cfg.train.straggler_cutoff = f64::INFINITY;
    let full = run_simulation(&cfg, Mode::FullParticipation, 8).unwrap();
    assert!(full.rounds.iter().all(|r| r.m_responsive == 150));
    for mode in [Mode::UncorrectedMnar, Mode::OracleCorrection, Mode::FlossCorrection] {
        let other = run_simulation(&cfg, mode, 8).unwrap();
        assert_eq!(other.theta, full.theta, "{mode}");
        for (a, b) in full.rounds.iter().zip(&other.rounds) {
            assert_eq!(a.sampled, b.sampled);
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        }
    }
}

#[test]
fn constant_propensities_make_oracle_match_uncorrected() {
    let mut cfg = sim(150);
    cfg.population.r_intercept = 0.3;
    cfg.population.r_d = vec![0.0];
    cfg.population.r_s = 0.0;
    let a = run_simulation(&cfg, Mode::UncorrectedMnar, 3).unwrap();
    let b = run_simulation(&cfg, Mode::OracleCorrection, 3).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.rounds.iter().map(|r| &r.sampled).collect::<Vec<_>>(), b.rounds.iter().map(|r| &r.sampled).collect::<Vec<_>>());
}

#[test]
fn full_participation_never_looks_at_responses() {
    let cfg = sim(120);
    let mut other = cfg.clone();
    other.population.r_intercept = -3.0;
    other.population.r_s = 2.0;
    let a = run_simulation(&cfg, Mode::FullParticipation, 4).unwrap();
    let b = run_simulation(&other, Mode::FullParticipation, 4).unwrap();
    assert_eq!(a.theta, b.theta);
    for (x, y) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(x.sampled, y.sampled);
        assert!(x.dropped.iter().all(Vec::is_empty));
    }
}

struct Fixture {
    population: PopulationConfig,
    train: TrainConfig,
    dp: DpConfig,
    propensity: PropensityConfig,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let s = sim(n);
        Self { population: s.population, train: s.train, dp: s.dp, propensity: s.propensity }
    }
}

#[test]
fn responsive_modes_only_sample_responders() {
    let f = Fixture::new(200);
    let test = generate_test_set(&f.population, 50).unwrap();
    let ctx = RoundContext { population: &f.population, train: &f.train, dp: &f.dp, propensity: &f.propensity, test_set: &test };
    for mode in [Mode::UncorrectedMnar, Mode::OracleCorrection, Mode::FlossCorrection] {
        let mut users = generate_population(&f.population).unwrap();
        let mut rng = RoundStreams::new(21);
        let mut theta = ModelParams::zeros(2);
        for round in 0..3 {
            let (next, log) = run_round(&mut users, &theta, round, mode, &ctx, &mut rng).unwrap();
            assert!(log.m_responsive < users.len());
            for id in log.sampled.iter().flatten() {
                assert!(users[*id].r, "{mode} sampled nonresponder {id}");
            }
            theta = next;
        }
    }
    // Full participation does reach nonresponders.
    let mut users = generate_population(&f.population).unwrap();
    let (_, log) = run_round(&mut users, &ModelParams::zeros(2), 0, Mode::FullParticipation, &ctx, &mut RoundStreams::new(21)).unwrap();
    assert!(log.sampled.iter().flatten().any(|&id| !users[id].r));
}

#[test]
fn uploads_are_dropped_exactly_when_late() {
    let mut f = Fixture::new(150);
    f.train.straggler_cutoff = 1.1;
    let test = generate_test_set(&f.population, 50).unwrap();
    let ctx = RoundContext { population: &f.population, train: &f.train, dp: &f.dp, propensity: &f.propensity, test_set: &test };
    let mut users = generate_population(&f.population).unwrap();
    let (_, log) =
        run_round(&mut users, &ModelParams::zeros(2), 0, Mode::UncorrectedMnar, &ctx, &mut RoundStreams::new(5)).unwrap();
    // Replay the latency stream in sampling order.
    let mut latency = stream(5, Stream::Latency);
    let mut drops = 0;
    for (picks, dropped) in log.sampled.iter().zip(&log.dropped) {
        let late: Vec<usize> =
            picks.iter().copied().filter(|&id| draw_latency(&users[id], &mut latency) > f.train.straggler_cutoff).collect();
        assert_eq!(&late, dropped);
        drops += late.len();
    }
    assert!(drops > 0 && drops < log.sampled.len() * f.train.k);
}

#[test]
fn iterations_with_only_stragglers_are_skipped() {
    let mut f = Fixture::new(80);
    f.train.straggler_cutoff = 1e-9;
    let test = generate_test_set(&f.population, 50).unwrap();
    let ctx = RoundContext { population: &f.population, train: &f.train, dp: &f.dp, propensity: &f.propensity, test_set: &test };
    let mut users = generate_population(&f.population).unwrap();
    let theta = ModelParams::zeros(2);
    let (next, log) = run_round(&mut users, &theta, 0, Mode::OracleCorrection, &ctx, &mut RoundStreams::new(1)).unwrap();
    assert_eq!(next, theta);
    assert_eq!(log.skipped_iterations, f.train.max_iterations);
    assert_eq!(log.mean_gradient_norm, 0.0);
}

#[test]
fn rounds_without_responders_abort() {
    let mut cfg = sim(60);
    cfg.population.r_intercept = -1000.0;
    let out = run_simulation(&cfg, Mode::UncorrectedMnar, 2).unwrap();
    assert!(out.rounds.iter().all(|r| r.aborted && r.m_responsive == 0));
    assert_eq!(out.theta, ModelParams::zeros(2));

    let f = Fixture { population: cfg.population.clone(), train: cfg.train, dp: cfg.dp, propensity: cfg.propensity.clone() };
    let test = generate_test_set(&f.population, 10).unwrap();
    let ctx = RoundContext { population: &f.population, train: &f.train, dp: &f.dp, propensity: &f.propensity, test_set: &test };
    let mut users = generate_population(&f.population).unwrap();
    assert!(matches!(
        run_round(&mut users, &ModelParams::zeros(2), 7, Mode::FlossCorrection, &ctx, &mut RoundStreams::new(0)),
        Err(OrchestratorError::NoResponsiveUsers { round: 7 })
    ));
}

#[test]
fn unconverged_fit_falls_back_to_uniform_sampling() {
    let mut cfg = sim(300);
    cfg.propensity.max_iter = 1;
    let floss = run_simulation(&cfg, Mode::FlossCorrection, 6).unwrap();
    let uniform = run_simulation(&cfg, Mode::UncorrectedMnar, 6).unwrap();
    for (f, u) in floss.rounds.iter().zip(&uniform.rounds) {
        let solver = f.solver.as_ref().unwrap();
        assert!(!solver.converged && solver.fallback.is_some());
        assert_eq!(f.sampled, u.sampled);
    }
}

#[test]
fn runs_are_reproducible() {
    let mut cfg = sim(100);
    cfg.dp = DpConfig { clip_norm: 1.0, noise_sigma: 0.5 };
    for mode in Mode::ALL {
        let a = run_simulation(&cfg, mode, 17).unwrap();
        let b = run_simulation(&cfg, mode, 17).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.theta, b.theta);
    }
}

fn loss_terms(n: usize, seed: u64, mcar: bool) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let mut cfg = PopulationConfig { n_users: n, seed, ..PopulationConfig::default() };
    if mcar {
        cfg.r_d = vec![0.0];
        cfg.r_s = 0.0;
    }
    let users = generate_population(&cfg).unwrap();
    let theta = ModelParams::new(cfg.true_theta.clone()).unwrap();
    let losses = users.iter().map(|u| local_loss(&theta, &u.dataset).unwrap()).collect();
    (losses, users.iter().map(|u| u.r).collect(), users.iter().map(|u| u.true_pi).collect())
}

/// Standard error of (responder mean - full mean) for one draw.
fn gap_se(losses: &[f64], r: &[bool]) -> f64 {
    let n = losses.len() as f64;
    let m = r.iter().filter(|&&x| x).count() as f64;
    let mu = mean(losses);
    let var = losses.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (n - 1.0);
    (var * (1.0 / m - 1.0 / n)).sqrt()
}

#[test]
fn risk_gap_is_noise_under_mcar_and_bias_under_mnar() {
    let cfg = PopulationConfig { n_users: 20_000, seed: 31, ..PopulationConfig::default() };
    let theta = ModelParams::new(cfg.true_theta.clone()).unwrap();

    let (losses, r, _) = loss_terms(20_000, 31, true);
    let mut mcar_cfg = cfg.clone();
    mcar_cfg.r_d = vec![0.0];
    mcar_cfg.r_s = 0.0;
    let gap = empirical_risk_gap(&generate_population(&mcar_cfg).unwrap(), &theta).unwrap();
    assert!((gap.observed_risk - gap.full_risk).abs() < 3.0 * gap_se(&losses, &r), "{gap:?}");

    let (losses, r, _) = loss_terms(20_000, 31, false);
    let gap = empirical_risk_gap(&generate_population(&cfg).unwrap(), &theta).unwrap();
    assert!((gap.observed_risk - gap.full_risk).abs() > 5.0 * gap_se(&losses, &r), "{gap:?}");
}

#[test]
fn oracle_weighted_risk_matches_full_risk() {
    let cfg = PopulationConfig { n_users: 20_000, seed: 32, ..PopulationConfig::default() };
    let users = generate_population(&cfg).unwrap();
    let theta = ModelParams::new(cfg.true_theta.clone()).unwrap();
    let ipw = ipw_risk(&users, &theta, &oracle_weights(&users, f64::INFINITY).unwrap()).unwrap();
    let full = empirical_risk_gap(&users, &theta).unwrap().full_risk;
    let (losses, r, pi) = loss_terms(20_000, 32, false);
    let terms: Vec<f64> = (0..losses.len()).map(|i| (r[i] as u8 as f64 / pi[i] - 1.0) * losses[i]).collect();
    let mu = mean(&terms);
    let se = (terms.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / (terms.len() - 1) as f64 / terms.len() as f64).sqrt();
    assert!((ipw - full).abs() < 3.0 * se, "ipw {ipw} full {full} se {se}");
}

#[test]
fn shipped_defaults_never_clip_weights() {
    let mut cfg = ExperimentConfig::parse(DEFAULT_CONFIG).unwrap();
    cfg.modes = vec![Mode::OracleCorrection, Mode::FlossCorrection];
    let result = run_sweep(&cfg).unwrap();
    assert!(result.rows.iter().all(|r| r.clipped_weights == 0));
}
