//! Synthetic client populations.
//!
//! Structural equations, per user:
//!
//! ```text
//! Drest_k ~ Uniform(-sqrt 3, sqrt 3)                      (unit variance)
//! Z       = z_d . Drest + z_noise * e
//! x_i     = x_z * Z + x_d Drest + x_noise * e_i           (each of samples_per_user rows)
//! y_i     ~ Bernoulli(expit(true_theta . [1, x_i] + y_d . Drest + y_z * Z))
//! S       = s_intercept - s_loss * L(theta_t; user) + s_x . mean(x) + s_d . Drest + s_noise * e
//! R       ~ Bernoulli(expit(r_intercept + r_d . Drest + r_s * S))
//! ```
//!
//! `L(theta_t; user)` is the current global model's loss on the user's data,
//! so `S`, `R` and the true propensity are refreshed every round. `R` never
//! depends on `Z`, `X` or `Y` except through `S`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{expit, local_loss, Dataset, ModelError, ModelParams};
use crate::rng::{stream, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("population file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub dim_d: usize,
    pub dim_x: usize,
    pub samples_per_user: usize,
    /// Intercept first, then one weight per feature.
    pub true_theta: Vec<f64>,
    pub y_d: Vec<f64>,
    pub y_z: f64,
    pub z_d: Vec<f64>,
    pub z_noise: f64,
    pub x_z: Vec<f64>,
    /// Row-major `dim_x` by `dim_d`.
    pub x_d: Vec<f64>,
    pub x_noise: f64,
    pub s_intercept: f64,
    /// Satisfaction drop per nat of loss; nonnegative.
    pub s_loss: f64,
    pub s_x: Vec<f64>,
    pub s_d: Vec<f64>,
    pub s_noise: f64,
    pub r_intercept: f64,
    pub r_d: Vec<f64>,
    pub r_s: f64,
    /// Per-user log-latency location ~ N(mean, sd).
    pub latency_location_mean: f64,
    pub latency_location_sd: f64,
    pub latency_scale: f64,
    /// Probability that a user skips the satisfaction prompt.
    pub satisfaction_nonresponse: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            dim_d: 1,
            dim_x: 2,
            samples_per_user: 10,
            true_theta: vec![0.0, 1.0, 1.0],
            y_d: vec![-4.0],
            y_z: 0.25,
            z_d: vec![0.5],
            z_noise: 1.0,
            x_z: vec![1.0, 0.0],
            x_d: vec![0.0, 0.5],
            x_noise: 0.5,
            s_intercept: 0.0,
            s_loss: 0.5,
            s_x: vec![0.5, 0.0],
            s_d: vec![0.25],
            s_noise: 0.2,
            r_intercept: 0.8,
            r_d: vec![1.5],
            r_s: 0.5,
            latency_location_mean: 0.0,
            latency_location_sd: 0.25,
            latency_scale: 0.5,
            satisfaction_nonresponse: 0.0,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_users == 0 || self.dim_d == 0 || self.dim_x == 0 || self.samples_per_user == 0 {
            return bad("n_users, dim_d, dim_x and samples_per_user must be positive".into());
        }
        let lens = [
            ("true_theta", self.true_theta.len(), self.dim_x + 1),
            ("y_d", self.y_d.len(), self.dim_d),
            ("z_d", self.z_d.len(), self.dim_d),
            ("x_z", self.x_z.len(), self.dim_x),
            ("x_d", self.x_d.len(), self.dim_x * self.dim_d),
            ("s_x", self.s_x.len(), self.dim_x),
            ("s_d", self.s_d.len(), self.dim_d),
            ("r_d", self.r_d.len(), self.dim_d),
        ];
        for (name, got, want) in lens {
            if got != want {
                return bad(format!("{name} has length {got}, expected {want}"));
            }
        }
        let all_finite = self
            .true_theta
            .iter()
            .chain(&self.y_d)
            .chain(&self.z_d)
            .chain(&self.x_z)
            .chain(&self.x_d)
            .chain(&self.s_x)
            .chain(&self.s_d)
            .chain(&self.r_d)
            .chain(&[
                self.y_z,
                self.s_intercept,
                self.r_intercept,
                self.r_s,
                self.latency_location_mean,
            ])
            .all(|v| v.is_finite());
        if !all_finite {
            return bad("coefficients must be finite".into());
        }
        for (name, v) in [
            ("z_noise", self.z_noise),
            ("x_noise", self.x_noise),
            ("s_noise", self.s_noise),
            ("s_loss", self.s_loss),
            ("latency_location_sd", self.latency_location_sd),
            ("latency_scale", self.latency_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.satisfaction_nonresponse) {
            return bad(format!(
                "satisfaction_nonresponse must lie in [0, 1], got {}",
                self.satisfaction_nonresponse
            ));
        }
        Ok(())
    }

    /// Log-odds of responding for a user with covariates `d_rest` and satisfaction `s`.
    pub fn response_logit(&self, d_rest: &[f64], s: f64) -> f64 {
        self.r_intercept + dot(&self.r_d, d_rest) + self.r_s * s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Log-normal round-trip delay parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub location: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: usize,
    pub d_rest: Vec<f64>,
    /// Shadow variable.
    pub z: f64,
    pub dataset: Dataset,
    /// Satisfaction as realized this round, whether or not it was reported.
    pub s_latent: f64,
    /// Satisfaction as reported to the server.
    pub s: Option<f64>,
    pub s_responded: bool,
    pub r: bool,
    pub latency: LatencyProfile,
    /// Exact probability used for this round's draw of `r`.
    pub true_pi: f64,
}

/// Draws a population and runs the first round's prompts against an
/// all-zero model.
pub fn generate_population(cfg: &PopulationConfig) -> Result<Vec<UserRecord>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Population);
    let mut users = draw_users(cfg, cfg.n_users, &mut rng)?;
    refresh_round_state(&mut users, &ModelParams::zeros(cfg.dim_x), cfg, &mut rng)?;
    Ok(users)
}

/// Pooled samples from `n_users` fresh users, drawn on a stream disjoint
/// from the training population's.
pub fn generate_test_set(cfg: &PopulationConfig, n_users: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::TestSet);
    let users = draw_users(cfg, n_users, &mut rng)?;
    let mut pooled = Dataset::with_capacity(cfg.dim_x, n_users * cfg.samples_per_user);
    for u in &users {
        pooled.extend(&u.dataset)?;
    }
    Ok(pooled)
}

fn draw_users<R: Rng + ?Sized>(cfg: &PopulationConfig, n: usize, rng: &mut R) -> Result<Vec<UserRecord>> {
    let half_width = 3f64.sqrt();
    let mut users = Vec::with_capacity(n);
    let mut x = vec![0.0; cfg.dim_x];
    for id in 0..n {
        let d_rest: Vec<f64> = (0..cfg.dim_d).map(|_| rng.random_range(-half_width..half_width)).collect();
        let z = dot(&cfg.z_d, &d_rest) + cfg.z_noise * normal(rng);
        let location = cfg.latency_location_mean + cfg.latency_location_sd * normal(rng);
        let y_shift = dot(&cfg.y_d, &d_rest) + cfg.y_z * z;
        let mut dataset = Dataset::with_capacity(cfg.dim_x, cfg.samples_per_user);
        for _ in 0..cfg.samples_per_user {
            for (j, xj) in x.iter_mut().enumerate() {
                let row = &cfg.x_d[j * cfg.dim_d..(j + 1) * cfg.dim_d];
                *xj = cfg.x_z[j] * z + dot(row, &d_rest) + cfg.x_noise * normal(rng);
            }
            let logit = cfg.true_theta[0] + dot(&cfg.true_theta[1..], &x) + y_shift;
            let y = rng.random::<f64>() < expit(logit);
            dataset.push(&x, y)?;
        }
        users.push(UserRecord {
            id,
            d_rest,
            z,
            dataset,
            s_latent: 0.0,
            s: None,
            s_responded: false,
            r: false,
            latency: LatencyProfile { location, scale: cfg.latency_scale },
            true_pi: 1.0,
        });
    }
    Ok(users)
}

/// Prompts every user for satisfaction and participation under the current
/// model `theta`: redraws `S`, whether it is reported, `R`, and records the
/// exact response probability in `true_pi`.
///
/// Consumes exactly three draws per user, in user order.
pub fn refresh_round_state<R: Rng + ?Sized>(
    users: &mut [UserRecord],
    theta: &ModelParams,
    cfg: &PopulationConfig,
    rng: &mut R,
) -> Result<()> {
    if theta.feature_dim() != cfg.dim_x {
        return Err(ModelError::DimensionMismatch { expected: cfg.dim_x + 1, got: theta.as_slice().len() }.into());
    }
    for u in users.iter_mut() {
        let loss = local_loss(theta, &u.dataset)?;
        let s = cfg.s_intercept - cfg.s_loss * loss
            + dot(&cfg.s_x, &u.dataset.feature_means())
            + dot(&cfg.s_d, &u.d_rest)
            + cfg.s_noise * normal(rng);
        let responded = rng.random::<f64>() >= cfg.satisfaction_nonresponse;
        let pi = expit(cfg.response_logit(&u.d_rest, s));
        let r = rng.random::<f64>() < pi;
        u.s_latent = s;
        u.s_responded = responded;
        u.s = responded.then_some(s);
        u.r = r;
        u.true_pi = pi;
    }
    Ok(())
}

/// One round-trip delay, `exp(location + scale * N(0, 1))`.
pub fn draw_latency<R: Rng + ?Sized>(user: &UserRecord, rng: &mut R) -> f64 {
    (user.latency.location + user.latency.scale * normal(rng)).exp()
}

const POPULATION_MAGIC: &str = "# floss-population v1";
const POPULATION_COLUMNS: &str =
    "id\td_rest\tz\tlatency_location\tlatency_scale\ts_latent\ts\ts_responded\tr\ttrue_pi\tdataset";

/// Writes one tab-separated row per user.
///
/// Vector columns are comma-separated; `s` is `NA` when unreported; the
/// dataset column is `x_1,...,x_p:y` per sample joined by `;`. Floats use
/// the shortest representation that parses back to the same value.
pub fn dump_population<W: Write>(users: &[UserRecord], mut out: W) -> Result<()> {
    let (dim_d, dim_x) = users.first().map_or((0, 0), |u| (u.d_rest.len(), u.dataset.dim()));
    writeln!(out, "{POPULATION_MAGIC} dim_d={dim_d} dim_x={dim_x}")?;
    writeln!(out, "{POPULATION_COLUMNS}")?;
    let mut line = String::new();
    for u in users {
        line.clear();
        let d_rest: Vec<String> = u.d_rest.iter().map(f64::to_string).collect();
        let s = u.s.map_or_else(|| "NA".to_string(), |v| v.to_string());
        write!(
            line,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t",
            u.id,
            d_rest.join(","),
            u.z,
            u.latency.location,
            u.latency.scale,
            u.s_latent,
            s,
            u.s_responded as u8,
            u.r as u8,
            u.true_pi
        )
        .expect("writing to a String cannot fail");
        for (i, (x, y)) in u.dataset.iter().enumerate() {
            if i > 0 {
                line.push(';');
            }
            let xs: Vec<String> = x.iter().map(f64::to_string).collect();
            write!(line, "{}:{}", xs.join(","), y as u8).expect("writing to a String cannot fail");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn load_population<R: BufRead>(input: R) -> Result<Vec<UserRecord>> {
    let perr = |line: usize, message: String| SynthError::Parse { line, message };
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(perr(1, "empty population file".into())),
    };
    let rest = header
        .strip_prefix(POPULATION_MAGIC)
        .ok_or_else(|| perr(1, format!("expected header starting with `{POPULATION_MAGIC}`")))?;
    let mut dim_d = None;
    let mut dim_x = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("dim_d", v)) => dim_d = v.parse::<usize>().ok(),
            Some(("dim_x", v)) => dim_x = v.parse::<usize>().ok(),
            _ => return Err(perr(1, format!("unexpected header field `{field}`"))),
        }
    }
    let (dim_d, dim_x) = dim_d.zip(dim_x).ok_or_else(|| perr(1, "header must set dim_d and dim_x".into()))?;
    let columns = match lines.next() {
        Some((_, l)) => l?,
        None => String::new(),
    };
    if columns != POPULATION_COLUMNS {
        return Err(perr(2, "missing or unexpected column header".into()));
    }

    let mut users = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 11 {
            return Err(perr(line_no, format!("expected 11 columns, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| perr(line_no, format!("bad {what} `{s}`")))
        };
        let flag = |s: &str, what: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(perr(line_no, format!("bad {what} flag `{s}`"))),
            }
        };
        let vector = |s: &str, what: &str, len: usize| -> Result<Vec<f64>> {
            let v = s.split(',').map(|t| num(t, what)).collect::<Result<Vec<_>>>()?;
            if v.len() != len {
                return Err(perr(line_no, format!("{what} has {} entries, expected {len}", v.len())));
            }
            Ok(v)
        };
        let id = cols[0].parse::<usize>().map_err(|_| perr(line_no, format!("bad id `{}`", cols[0])))?;
        let mut dataset = Dataset::new(dim_x);
        if !cols[10].is_empty() {
            for sample in cols[10].split(';') {
                let (xs, y) = sample.split_once(':').ok_or_else(|| perr(line_no, format!("bad sample `{sample}`")))?;
                dataset.push(&vector(xs, "feature", dim_x)?, flag(y, "label")?)?;
            }
        }
        let s = match cols[6] {
            "NA" => None,
            v => Some(num(v, "s")?),
        };
        let s_responded = flag(cols[7], "s_responded")?;
        if s_responded != s.is_some() {
            return Err(perr(line_no, "s must be present exactly when s_responded is 1".into()));
        }
        users.push(UserRecord {
            id,
            d_rest: vector(cols[1], "d_rest", dim_d)?,
            z: num(cols[2], "z")?,
            latency: LatencyProfile { location: num(cols[3], "latency_location")?, scale: num(cols[4], "latency_scale")? },
            s_latent: num(cols[5], "s_latent")?,
            s,
            s_responded,
            r: flag(cols[8], "r")?,
            true_pi: num(cols[9], "true_pi")?,
            dataset,
        });
    }
    Ok(users)
}
