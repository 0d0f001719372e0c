//! Response propensities from shadow-variable moment equations.
//!
//! The response model is `p_beta(R = 1 | Drest, S) = expit(beta_0 + beta_d .
//! Drest + beta_s S)`. Because `S` is only seen for responders, `beta` is
//! identified through a shadow variable `Z` that is associated with `S` but
//! independent of `R` given `(Drest, S)`: it solves
//!
//! ```text
//! (1/n) sum_u (R_u / p_beta(Drest_u, S_u) - 1) f_i(Drest_u, Z_u) = 0,   i = 1..q
//! ```
//!
//! where nonresponders contribute `-f_i` and never need `S`. With the default
//! basis `f = (1, Drest, Z)` the system is exactly identified.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::expit;
use crate::synth::UserRecord;

/// Smallest propensity a responder may be assigned before the evaluation
/// is rejected.
pub const PROPENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error("responsive user {user} has no reported satisfaction")]
    MissingSatisfaction { user: usize },
    #[error("propensity {p:e} for user {user} is below the floor {PROPENSITY_FLOOR:e}")]
    Underflow { user: usize, p: f64 },
    #[error("need at least {q} responders and {q} nonresponders, got {responders} and {nonresponders}")]
    Degenerate { responders: usize, nonresponders: usize, q: usize },
    #[error("basis is rank deficient on this data (condition number {condition:e})")]
    RankDeficient { condition: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("propensity model did not converge")]
    NotConverged,
    #[error("weight cap must be at least 1, got {0}")]
    InvalidCap(f64),
}

pub type Result<T> = std::result::Result<T, PropensityError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BasisTerm {
    Constant,
    DRest(usize),
    Shadow,
}

/// `scale * term + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub term: BasisTerm,
    pub scale: f64,
    pub offset: f64,
}

impl BasisFunction {
    pub fn plain(term: BasisTerm) -> Self {
        Self { term, scale: 1.0, offset: 0.0 }
    }

    fn eval(&self, d_rest: &[f64], z: f64) -> f64 {
        let raw = match self.term {
            BasisTerm::Constant => 1.0,
            BasisTerm::DRest(k) => d_rest[k],
            BasisTerm::Shadow => z,
        };
        self.scale * raw + self.offset
    }
}

/// Functions of `(Drest, Z)` whose products with the IPW residual have mean zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityBasis {
    pub functions: Vec<BasisFunction>,
}

impl PropensityBasis {
    /// `(1, Drest_1, ..., Drest_p, Z)`.
    pub fn standard(dim_d: usize) -> Self {
        let mut functions = vec![BasisFunction::plain(BasisTerm::Constant)];
        functions.extend((0..dim_d).map(|k| BasisFunction::plain(BasisTerm::DRest(k))));
        functions.push(BasisFunction::plain(BasisTerm::Shadow));
        Self { functions }
    }

    pub fn q(&self) -> usize {
        self.functions.len()
    }

    fn eval_into(&self, user: &UserRecord, out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f.eval(&user.d_rest, user.z);
        }
    }

    fn check(&self, users: &[UserRecord]) -> Result<()> {
        for f in &self.functions {
            if let BasisTerm::DRest(k) = f.term {
                if let Some(u) = users.iter().find(|u| u.d_rest.len() <= k) {
                    return Err(PropensityError::DimensionMismatch { expected: k + 1, got: u.d_rest.len() });
                }
            }
        }
        Ok(())
    }
}

/// `beta` laid out as `[intercept, Drest..., S]`.
fn response_logit(beta: &[f64], d_rest: &[f64], s: f64) -> f64 {
    let p = d_rest.len();
    beta[0] + beta[1..=p].iter().zip(d_rest).map(|(b, d)| b * d).sum::<f64>() + beta[p + 1] * s
}

fn responder_satisfaction(u: &UserRecord) -> Result<f64> {
    u.s.ok_or(PropensityError::MissingSatisfaction { user: u.id })
}

fn check_beta(beta: &[f64], users: &[UserRecord]) -> Result<()> {
    if let Some(u) = users.first() {
        if beta.len() != u.d_rest.len() + 2 {
            return Err(PropensityError::DimensionMismatch { expected: u.d_rest.len() + 2, got: beta.len() });
        }
    }
    Ok(())
}

/// Empirical moment vector; entry `i` is the mean over all users of
/// `(R / p_beta - 1) f_i(Drest, Z)`.
pub fn moment_residuals(beta: &[f64], users: &[UserRecord], basis: &PropensityBasis) -> Result<Vec<f64>> {
    check_beta(beta, users)?;
    basis.check(users)?;
    let q = basis.q();
    let mut out = vec![0.0; q];
    let mut f = vec![0.0; q];
    for u in users {
        basis.eval_into(u, &mut f);
        let factor = if u.r {
            let p = expit(response_logit(beta, &u.d_rest, responder_satisfaction(u)?));
            if p < PROPENSITY_FLOOR {
                return Err(PropensityError::Underflow { user: u.id, p });
            }
            1.0 / p - 1.0
        } else {
            -1.0
        };
        for (o, fi) in out.iter_mut().zip(&f) {
            *o += factor * fi;
        }
    }
    let n = users.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Jacobian of [`moment_residuals`] with respect to `beta`. Only responders
/// contribute: d/d beta of `1/p - 1` is `-(1 - p)/p * (1, Drest, S)`.
pub fn moment_jacobian(beta: &[f64], users: &[UserRecord], basis: &PropensityBasis) -> Result<DMatrix<f64>> {
    check_beta(beta, users)?;
    basis.check(users)?;
    let q = basis.q();
    let dim = beta.len();
    let mut jac = DMatrix::<f64>::zeros(q, dim);
    let mut f = vec![0.0; q];
    let mut grad = vec![0.0; dim];
    for u in users.iter().filter(|u| u.r) {
        let s = responder_satisfaction(u)?;
        let p = expit(response_logit(beta, &u.d_rest, s));
        if p < PROPENSITY_FLOOR {
            return Err(PropensityError::Underflow { user: u.id, p });
        }
        let w = -(1.0 - p) / p;
        grad[0] = 1.0;
        grad[1..dim - 1].copy_from_slice(&u.d_rest);
        grad[dim - 1] = s;
        basis.eval_into(u, &mut f);
        for i in 0..q {
            for j in 0..dim {
                jac[(i, j)] += w * f[i] * grad[j];
            }
        }
    }
    let n = users.len().max(1) as f64;
    Ok(jac / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Starting point; all zeros when `None`.
    pub init: Option<Vec<f64>>,
    /// Target sup-norm of the moment vector.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { init: None, tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Sup-norm of the moments at the start of each iteration, then at exit.
    pub residual_trajectory: Vec<f64>,
    pub step_halvings: usize,
    /// Trial steps rejected because some responder's propensity fell below the floor.
    pub floor_rejections: usize,
    pub used_fallback: bool,
    /// Condition number of the Jacobian at the returned `beta`.
    pub jacobian_condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub final_residual_norm: f64,
    /// Everyone responded; propensities are identically one.
    pub all_responsive: bool,
    pub diagnostics: SolverDiagnostics,
}

impl PropensityModel {
    pub fn pi(&self, d_rest: &[f64], s: f64) -> f64 {
        if self.all_responsive {
            1.0
        } else {
            expit(response_logit(&self.beta, d_rest, s))
        }
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

const SINGULAR_CONDITION: f64 = 1e13;
const MAX_HALVINGS: usize = 40;

/// Solves the moment equations for `beta` by damped Newton.
///
/// Each Newton step is halved until the Euclidean norm of the moments
/// decreases. When the Jacobian is numerically singular, a Nelder-Mead
/// search on the squared moment norm takes over from the current point and
/// Newton resumes from its result. Non-convergence is reported through
/// `converged = false`, not as an error.
pub fn solve_shadow_equations(
    users: &[UserRecord],
    basis: &PropensityBasis,
    opts: &SolverOptions,
) -> Result<PropensityModel> {
    let dim = users.first().map_or(0, |u| u.d_rest.len() + 2);
    let q = basis.q();
    if q != dim {
        return Err(PropensityError::DimensionMismatch { expected: dim, got: q });
    }
    basis.check(users)?;
    if let Some(u) = users.iter().find(|u| u.r && u.s.is_none()) {
        return Err(PropensityError::MissingSatisfaction { user: u.id });
    }
    let responders = users.iter().filter(|u| u.r).count();
    let nonresponders = users.len() - responders;
    if nonresponders == 0 && responders > 0 {
        return Ok(PropensityModel {
            beta: vec![0.0; dim],
            converged: true,
            final_residual_norm: 0.0,
            all_responsive: true,
            diagnostics: SolverDiagnostics::default(),
        });
    }
    if responders < q || nonresponders < q {
        return Err(PropensityError::Degenerate { responders, nonresponders, q });
    }

    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut f = vec![0.0; q];
    for u in users {
        basis.eval_into(u, &mut f);
        let col = DVector::from_column_slice(&f);
        gram += &col * col.transpose();
    }
    let gram_condition = condition_number(&gram);
    if !(gram_condition < 1e12) {
        return Err(PropensityError::RankDeficient { condition: gram_condition });
    }

    let mut beta = match &opts.init {
        Some(b) if b.len() != dim => return Err(PropensityError::DimensionMismatch { expected: dim, got: b.len() }),
        Some(b) => b.clone(),
        None => vec![0.0; dim],
    };
    let mut diag = SolverDiagnostics::default();
    let mut m = moment_residuals(&beta, users, basis)?;
    let mut converged = false;

    while diag.iterations < opts.max_iter {
        let sup = sup_norm(&m);
        diag.residual_trajectory.push(sup);
        if sup <= opts.tol {
            converged = true;
            break;
        }
        diag.iterations += 1;

        let jac = moment_jacobian(&beta, users, basis)?;
        let step = if condition_number(&jac) < SINGULAR_CONDITION {
            jac.lu().solve(&DVector::from_column_slice(&m))
        } else {
            None
        };
        let Some(step) = step else {
            diag.used_fallback = true;
            let (b, value) = nelder_mead(|b| moment_residuals(b, users, basis).map(|m| sq_norm(&m)).ok(), &beta);
            if value >= sq_norm(&m) {
                break;
            }
            beta = b;
            m = moment_residuals(&beta, users, basis)?;
            continue;
        };

        let current = sq_norm(&m);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            match moment_residuals(&trial, users, basis) {
                Ok(trial_m) if sq_norm(&trial_m) < current => {
                    beta = trial;
                    m = trial_m;
                    accepted = true;
                    break;
                }
                Ok(_) => {}
                Err(PropensityError::Underflow { .. }) => diag.floor_rejections += 1,
                Err(e) => return Err(e),
            }
            t *= 0.5;
            diag.step_halvings += 1;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        diag.residual_trajectory.push(sup_norm(&m));
    }
    diag.jacobian_condition = moment_jacobian(&beta, users, basis).map_or(f64::NAN, |j| condition_number(&j));

    Ok(PropensityModel {
        beta,
        converged,
        final_residual_norm: sup_norm(&m),
        all_responsive: false,
        diagnostics: diag,
    })
}

/// Minimizes `objective` from `start`; `None` values count as +inf.
/// Returns the best point and its value.
fn nelder_mead<F>(objective: F, start: &[f64]) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let eval = |x: &[f64]| objective(x).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), eval(start)));
    for i in 0..n {
        let mut x = start.to_vec();
        x[i] += if x[i].abs() > 1e-3 { 0.1 * x[i].abs() } else { 0.1 };
        let v = eval(&x);
        simplex.push((x, v));
    }
    for _ in 0..2000 * n {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= 1e-30 + 1e-15 * best.abs() {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let toward = |coef: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + coef * (w - c)).collect()
        };
        let reflected = toward(-1.0);
        let fr = eval(&reflected);
        if fr < simplex[0].1 {
            let expanded = toward(-2.0);
            let fe = eval(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if fr < worst { toward(-0.5) } else { toward(0.5) };
            let fc = eval(&contracted);
            if fc < worst.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let anchor = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    for (xi, ai) in x.iter_mut().zip(&anchor) {
                        *xi = ai + 0.5 * (*xi - ai);
                    }
                    *v = eval(x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Sampling weights for responders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub ids: Vec<usize>,
    pub pi: Vec<f64>,
    /// `min(1 / pi, w_max)`.
    pub weights: Vec<f64>,
    /// How many weights hit the cap.
    pub clipped: usize,
}

impl WeightTable {
    fn from_pi(ids: Vec<usize>, pi: Vec<f64>, w_max: f64) -> Result<Self> {
        if !(w_max >= 1.0) {
            return Err(PropensityError::InvalidCap(w_max));
        }
        let mut clipped = 0;
        let weights = pi
            .iter()
            .map(|p| {
                let w = 1.0 / p;
                if w > w_max {
                    clipped += 1;
                    w_max
                } else {
                    w
                }
            })
            .collect();
        Ok(Self { ids, pi, weights, clipped })
    }

    /// Uniform weights over the given ids.
    pub fn uniform(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self { ids, pi: vec![1.0; n], weights: vec![1.0; n], clipped: 0 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Weights from a fitted propensity model, for every responder.
pub fn compute_weights(model: &PropensityModel, users: &[UserRecord], w_max: f64) -> Result<WeightTable> {
    if !model.converged {
        return Err(PropensityError::NotConverged);
    }
    let mut ids = Vec::new();
    let mut pi = Vec::new();
    for u in users.iter().filter(|u| u.r) {
        let s = if model.all_responsive { u.s.unwrap_or(0.0) } else { responder_satisfaction(u)? };
        ids.push(u.id);
        pi.push(model.pi(&u.d_rest, s));
    }
    WeightTable::from_pi(ids, pi, w_max)
}

/// Weights from the simulator's ground-truth propensities.
pub fn oracle_weights(users: &[UserRecord], w_max: f64) -> Result<WeightTable> {
    let (ids, pi) = users.iter().filter(|u| u.r).map(|u| (u.id, u.true_pi)).unzip();
    WeightTable::from_pi(ids, pi, w_max)
}
