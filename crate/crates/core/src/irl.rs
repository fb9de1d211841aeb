//! Maximum causal entropy IRL by gradient ascent on the log-likelihood.
//!
//! For reward parameters `theta`, the soft-optimal policy `pi_theta` is
//! obtained from the soft Bellman equations and the objective is
//!
//! ```text
//! V(theta) = sum_{x,a} gamma_E(x, a) log pi_theta(a | x)
//! ```
//!
//! where `gamma_E` is the expert's un-normalized occupation measure. Its
//! gradient is the gap between the expert's discounted feature expectation and
//! that of `pi_theta`, both started from the mean-field distribution.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::demos::{empirical_feature_expectation, empirical_occupation, TrajectorySet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{stationarity_residual, MfgModel, Policy};
use crate::occupation::{discounted_feature_expectation, occupation_measure, OccupationMeasure};
use crate::rkhs::{FeatureMap, RewardParams};
use crate::soft::{logsumexp, solve_soft, SoftSolution, SolverOptions};

/// How the state block of the expert feature expectation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertBlock {
    /// The expert's actual discounted state occupation from `mu`.
    #[default]
    Occupation,
    /// `mu / (1 - beta)`, exact only when `mu` is invariant under the expert.
    MeanField,
}

impl FromStr for ExpertBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occupation" => Ok(ExpertBlock::Occupation),
            "meanfield" | "mean_field" => Ok(ExpertBlock::MeanField),
            other => Err(Error::InvalidArgument(format!(
                "unknown expert block '{other}' (expected occupation|meanfield)"
            ))),
        }
    }
}

impl fmt::Display for ExpertBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertBlock::Occupation => "occupation",
            ExpertBlock::MeanField => "meanfield",
        })
    }
}

/// Expert statistics consumed by training: the feature expectation (the
/// gradient target) and the occupation weighting the log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStatistics {
    pub expectation: Array1<f64>,
    pub occupation: Array2<f64>,
}

impl ExpertStatistics {
    /// Exact statistics of a known expert policy started from `mu`.
    pub fn from_policy(
        model: &MfgModel,
        expert: &Policy,
        fm: &FeatureMap,
        block: ExpertBlock,
    ) -> Result<Self> {
        let occ = expert_occupation(model, expert)?;
        let mut expectation = discounted_feature_expectation(&occ.state_action_occ, fm)?;
        if block == ExpertBlock::MeanField {
            let scale = 1.0 / (1.0 - model.discount());
            for (e, &m) in expectation.iter_mut().zip(model.mean_field().iter()) {
                *e = m * scale;
            }
        }
        Ok(Self {
            expectation,
            occupation: occ.state_action_occ,
        })
    }

    /// Empirical statistics from demonstrations, truncated at each recorded
    /// horizon.
    pub fn from_trajectories(demos: &TrajectorySet, fm: &FeatureMap, beta: f64) -> Result<Self> {
        Ok(Self {
            expectation: empirical_feature_expectation(demos, fm, beta)?,
            occupation: empirical_occupation(demos, fm.n_states(), fm.n_actions(), beta)?,
        })
    }
}

/// The expert's un-normalized occupation measure from the model's mean field.
pub fn expert_occupation(model: &MfgModel, expert: &Policy) -> Result<OccupationMeasure> {
    occupation_measure(model, expert, model.mean_field())
}

/// Discounted feature expectation of the expert policy from the mean field.
pub fn expert_expectation_exact(
    model: &MfgModel,
    expert: &Policy,
    fm: &FeatureMap,
) -> Result<Array1<f64>> {
    let occ = expert_occupation(model, expert)?;
    discounted_feature_expectation(&occ.state_action_occ, fm)
}

/// Feature expectation of the soft-optimal policy for `theta`.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub grad: Array1<f64>,
    pub expectation: Array1<f64>,
    pub solution: SoftSolution,
}

impl GradientEval {
    pub fn policy(&self) -> &Policy {
        &self.solution.policy
    }

    pub fn norm(&self) -> f64 {
        self.grad.dot(&self.grad).sqrt()
    }
}

fn check_fm(model: &MfgModel, fm: &FeatureMap) -> Result<()> {
    if fm.n_states() != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "feature map states",
            expected: model.n_states(),
            found: fm.n_states(),
        });
    }
    if fm.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "feature map actions",
            expected: model.n_actions(),
            found: fm.n_actions(),
        });
    }
    Ok(())
}

/// Soft-optimal solution for the reward `r_theta`.
pub fn solve_for_theta(
    model: &MfgModel,
    fm: &FeatureMap,
    theta: &RewardParams,
    solver: SolverOptions,
) -> Result<SoftSolution> {
    check_fm(model, fm)?;
    let reward = fm.reward_matrix(theta)?;
    solve_soft(model, &reward, solver)
}

/// `grad V(theta) = <f>_E - E^{pi_theta, mu}[sum_t beta^t f(x_t, a_t)]`.
pub fn gradient(
    model: &MfgModel,
    fm: &FeatureMap,
    theta: &RewardParams,
    expert_expectation: &Array1<f64>,
    solver: SolverOptions,
) -> Result<GradientEval> {
    if expert_expectation.len() != fm.dim() {
        return Err(Error::DimensionMismatch {
            what: "expert expectation",
            expected: fm.dim(),
            found: expert_expectation.len(),
        });
    }
    let solution = solve_for_theta(model, fm, theta, solver)?;
    let occ = occupation_measure(model, &solution.policy, model.mean_field())?;
    let expectation = discounted_feature_expectation(&occ.state_action_occ, fm)?;
    let grad = expert_expectation - &expectation;
    Ok(GradientEval {
        grad,
        expectation,
        solution,
    })
}

/// `sum_{x,a} occ(x, a) log pi(a | x)` with `log pi = q - logsumexp(q)`.
pub fn log_likelihood_of(solution: &SoftSolution, expert_occ: &Array2<f64>) -> Result<f64> {
    if expert_occ.dim() != solution.q.dim() {
        return Err(Error::DimensionMismatch {
            what: "expert occupation",
            expected: solution.q.len(),
            found: expert_occ.len(),
        });
    }
    let mut total = 0.0;
    for (x, q) in solution.q.outer_iter().enumerate() {
        let lse = logsumexp(q);
        for (a, &qa) in q.iter().enumerate() {
            let w = expert_occ[[x, a]];
            if w != 0.0 {
                total += w * (qa - lse);
            }
        }
    }
    Ok(total)
}

pub fn log_likelihood(
    model: &MfgModel,
    fm: &FeatureMap,
    theta: &RewardParams,
    expert_occ: &Array2<f64>,
    solver: SolverOptions,
) -> Result<f64> {
    let solution = solve_for_theta(model, fm, theta, solver)?;
    log_likelihood_of(&solution, expert_occ)
}

/// Smoothness constant of the log-likelihood:
/// `L = K^2 sqrt|A| / (1 - beta)^2 * (2 sqrt|A| beta / (1 - beta) + 1)`.
pub fn lipschitz_constant(beta: f64, n_actions: usize, feature_bound: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discount must be in (0,1), got {beta}"
        )));
    }
    if !(feature_bound > 0.0) || n_actions == 0 {
        return Err(Error::InvalidArgument(
            "feature bound and action count must be positive".into(),
        ));
    }
    let sa = (n_actions as f64).sqrt();
    let c = 1.0 - beta;
    Ok(feature_bound * feature_bound * sa / (c * c) * (2.0 * sa * beta / c + 1.0))
}

/// Central differences of `f` at `x`, one coordinate per work item.
pub fn central_difference<F>(f: F, x: &Array1<f64>, h: f64, exec: Execution) -> Result<Array1<f64>>
where
    F: Fn(&Array1<f64>) -> Result<f64> + Sync + Send,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let parts = exec.try_map_indexed(x.len(), |i| {
        let mut plus = x.clone();
        plus[i] += h;
        let mut minus = x.clone();
        minus[i] -= h;
        Ok::<f64, Error>((f(&plus)? - f(&minus)?) / (2.0 * h))
    })?;
    Ok(Array1::from(parts))
}

/// Central-difference estimate of `grad V(theta)` from [`log_likelihood`].
pub fn finite_difference_gradient(
    model: &MfgModel,
    fm: &FeatureMap,
    theta: &RewardParams,
    expert_occ: &Array2<f64>,
    h: f64,
    solver: SolverOptions,
) -> Result<Array1<f64>> {
    let nx = model.n_states();
    central_difference(
        |t| {
            let p = RewardParams::from_concat(t, nx)?;
            log_likelihood(model, fm, &p, expert_occ, solver)
        },
        &theta.concat(),
        h,
        Execution::default(),
    )
}

/// Residuals of the two equilibrium constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticReport {
    /// `|mu - mu^T A_pi|_1`.
    pub stationarity_residual: f64,
    /// `|<f>_E - <f>_pi|_2`.
    pub expectation_gap_norm: f64,
}

pub fn mfe_check(
    model: &MfgModel,
    policy: &Policy,
    mu: &Array1<f64>,
    expectation_gap: &Array1<f64>,
) -> Result<DiagnosticReport> {
    Ok(DiagnosticReport {
        stationarity_residual: stationarity_residual(model, policy, mu)?,
        expectation_gap_norm: expectation_gap.dot(expectation_gap).sqrt(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once `|grad|_2 <= grad_tol`; zero disables early stopping.
    pub grad_tol: f64,
    /// Starting point; `None` means all zeros.
    pub theta0: Option<RewardParams>,
    /// Record every `log_every`-th iterate (the last one is always recorded).
    pub log_every: usize,
    pub solver: SolverOptions,
    /// When set, the Frobenius distance to this policy is logged.
    pub reference: Option<Policy>,
}

impl TrainConfig {
    pub fn new(step_size: f64, max_iters: usize) -> Self {
        Self {
            step_size,
            max_iters,
            grad_tol: 0.0,
            theta0: None,
            log_every: 1,
            solver: SolverOptions::default(),
            reference: None,
        }
    }

    /// Step size `1 / L` with `L` from [`lipschitz_constant`] at the exact
    /// feature bound.
    pub fn with_default_step(model: &MfgModel, fm: &FeatureMap, max_iters: usize) -> Result<Self> {
        let l = lipschitz_constant(model.discount(), model.n_actions(), fm.feature_bound())?;
        Ok(Self::new(1.0 / l, max_iters))
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "grad_tol must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub grad_norm: f64,
    pub log_likelihood: f64,
    pub policy_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub theta_final: RewardParams,
    pub policy_final: Policy,
    pub solution_final: SoftSolution,
    /// Number of parameter updates performed.
    pub iterations_run: usize,
    pub trace: Vec<TraceRecord>,
    pub expert_expectation: Array1<f64>,
    /// `<f>_E - <f>_{pi_final}`, equal to the final gradient.
    pub final_expectation_gap: Array1<f64>,
    pub final_grad_norm: f64,
    pub final_log_likelihood: f64,
    pub lipschitz: f64,
    /// Set when the step size exceeds `1 / L`.
    pub step_size_warning: Option<String>,
    pub stopped_early: bool,
}

/// Constant-step gradient ascent `theta <- theta + step * grad V(theta)`.
pub fn train(
    model: &MfgModel,
    fm: &FeatureMap,
    expert_expectation: &Array1<f64>,
    expert_occ: &Array2<f64>,
    config: &TrainConfig,
) -> Result<TrainResult> {
    train_observed(model, fm, expert_expectation, expert_occ, config, |_| {})
}

/// [`train`] with a callback invoked for every recorded trace entry, in order,
/// before the next update. Entries seen by the callback survive a later error.
pub fn train_observed<F>(
    model: &MfgModel,
    fm: &FeatureMap,
    expert_expectation: &Array1<f64>,
    expert_occ: &Array2<f64>,
    config: &TrainConfig,
    mut observe: F,
) -> Result<TrainResult>
where
    F: FnMut(&TraceRecord),
{
    config.validate()?;
    check_fm(model, fm)?;
    if expert_occ.dim() != (model.n_states(), model.n_actions()) {
        return Err(Error::DimensionMismatch {
            what: "expert occupation",
            expected: model.n_states() * model.n_actions(),
            found: expert_occ.len(),
        });
    }
    let lipschitz = lipschitz_constant(model.discount(), model.n_actions(), fm.feature_bound())?;
    let step_size_warning = (config.step_size > 1.0 / lipschitz).then(|| {
        format!(
            "step size {} exceeds 1/L = {:.6} (L = {:.4}); ascent is not guaranteed",
            config.step_size,
            1.0 / lipschitz,
            lipschitz
        )
    });

    let nx = model.n_states();
    let mut theta = match &config.theta0 {
        Some(t) => t.clone(),
        None => RewardParams::zeros(nx, fm.n_anchors()),
    };
    let log_every = config.log_every.max(1);
    let mut trace = Vec::new();
    let mut k = 0;
    loop {
        let eval = gradient(model, fm, &theta, expert_expectation, config.solver)?;
        let grad_norm = eval.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let ll = log_likelihood_of(&eval.solution, expert_occ)?;
        let stop_tol = config.grad_tol > 0.0 && grad_norm <= config.grad_tol;
        let last = k == config.max_iters || stop_tol;
        if k % log_every == 0 || last {
            let rec = TraceRecord {
                iter: k,
                grad_norm,
                log_likelihood: ll,
                policy_err: match &config.reference {
                    Some(r) => Some(eval.policy().frobenius_distance(r)?),
                    None => None,
                },
            };
            observe(&rec);
            trace.push(rec);
        }
        if last {
            return Ok(TrainResult {
                theta_final: theta,
                policy_final: eval.solution.policy.clone(),
                solution_final: eval.solution,
                iterations_run: k,
                trace,
                expert_expectation: expert_expectation.clone(),
                final_expectation_gap: eval.grad,
                final_grad_norm: grad_norm,
                final_log_likelihood: ll,
                lipschitz,
                step_size_warning,
                stopped_early: stop_tol && k < config.max_iters,
            });
        }
        let mut stacked = theta.concat();
        stacked.scaled_add(config.step_size, &eval.grad);
        theta = RewardParams::from_concat(&stacked, nx)?;
        k += 1;
    }
}
