//! Entropy-regularized Bellman machinery.
//!
//! The soft Bellman operator is
//! `(L V)(x) = log sum_a exp(r(x, a) + beta * sum_y p(y | x, a) V(y))`,
//! a beta-contraction in the sup norm. Its fixed point `V` gives
//! `Q(x, a) = r(x, a) + beta * E[V(y)]` and the policy `pi(a | x) = exp(Q - V)`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{MfgModel, Policy};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Below this many states a sweep is cheaper than dispatching to the pool.
const PARALLEL_SWEEP_MIN_STATES: usize = 512;

/// Stopping rule for [`soft_value_iteration`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target sup-norm distance to the true fixed point.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIterationOutcome {
    pub v: Array1<f64>,
    pub iterations: usize,
    /// Sup norm of the last update `|V_{t+1} - V_t|`.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub policy: Policy,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Max-shifted `log sum exp`.
pub fn logsumexp(xs: ArrayView1<'_, f64>) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn check_reward(model: &MfgModel, reward: &Array2<f64>) -> Result<()> {
    let (nx, na) = reward.dim();
    if nx != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "reward states",
            expected: model.n_states(),
            found: nx,
        });
    }
    if na != model.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "reward actions",
            expected: model.n_actions(),
            found: na,
        });
    }
    if reward.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward"));
    }
    Ok(())
}

fn check_values(model: &MfgModel, v: &Array1<f64>) -> Result<()> {
    if v.len() != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "value vector",
            expected: model.n_states(),
            found: v.len(),
        });
    }
    Ok(())
}

fn q_row(model: &MfgModel, reward: &Array2<f64>, v: &Array1<f64>, x: usize) -> Array1<f64> {
    let beta = model.discount();
    Array1::from_shape_fn(model.n_actions(), |a| {
        reward[[x, a]] + beta * model.transition_row(x, a).dot(v)
    })
}

/// One Jacobi sweep of the soft Bellman operator: every state reads only `v`.
pub fn soft_bellman_operator(
    model: &MfgModel,
    reward: &Array2<f64>,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    check_reward(model, reward)?;
    check_values(model, v)?;
    Ok(sweep(model, reward, v, Execution::Sequential))
}

fn sweep(model: &MfgModel, reward: &Array2<f64>, v: &Array1<f64>, exec: Execution) -> Array1<f64> {
    let nx = model.n_states();
    let exec = if nx >= PARALLEL_SWEEP_MIN_STATES {
        exec
    } else {
        Execution::Sequential
    };
    Array1::from(exec.map_indexed(nx, |x| logsumexp(q_row(model, reward, v, x).view())))
}

/// Value iteration from `V_0 = 0`.
///
/// Stops once `|L V_t - V_t|_inf <= tol (1 - beta) / beta`, which bounds the
/// distance of the returned iterate to the fixed point by `tol`. Hitting
/// `max_iter` is reported through `converged = false`, not as an error.
pub fn soft_value_iteration(
    model: &MfgModel,
    reward: &Array2<f64>,
    opts: SolverOptions,
) -> Result<ValueIterationOutcome> {
    soft_value_iteration_from(
        model,
        reward,
        Array1::zeros(model.n_states()),
        opts,
        Execution::default(),
    )
}

/// [`soft_value_iteration`] with an explicit starting point and execution mode.
pub fn soft_value_iteration_from(
    model: &MfgModel,
    reward: &Array2<f64>,
    v0: Array1<f64>,
    opts: SolverOptions,
    exec: Execution,
) -> Result<ValueIterationOutcome> {
    check_reward(model, reward)?;
    check_values(model, &v0)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol must be positive, got {}",
            opts.tol
        )));
    }
    let beta = model.discount();
    let threshold = opts.tol * (1.0 - beta) / beta;
    let mut v = v0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let next = sweep(model, reward, &v, exec);
        residual = sup_distance(&next, &v);
        v = next;
        iterations += 1;
        if !residual.is_finite() {
            return Err(Error::NonFinite("value iteration"));
        }
        if residual <= threshold {
            break;
        }
    }
    Ok(ValueIterationOutcome {
        v,
        iterations,
        residual,
        converged: residual <= threshold,
    })
}

pub(crate) fn sup_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `Q(x, a) = r(x, a) + beta * sum_y p(y | x, a) V(y)`.
pub fn soft_q_from_v(
    model: &MfgModel,
    reward: &Array2<f64>,
    v: &Array1<f64>,
) -> Result<Array2<f64>> {
    check_reward(model, reward)?;
    check_values(model, v)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("value vector"));
    }
    let (nx, na) = (model.n_states(), model.n_actions());
    let beta = model.discount();
    Ok(Array2::from_shape_fn((nx, na), |(x, a)| {
        reward[[x, a]] + beta * model.transition_row(x, a).dot(v)
    }))
}

/// Tolerance on `|v(x) - logsumexp_a q(x, a)|` accepted by [`softmax_policy`].
pub const SOFT_PAIR_TOL: f64 = 1e-8;

/// `pi(a | x) = exp(q(x, a) - v(x))`.
///
/// Rows are normalized by their own log-sum-exp rather than by `v`, which
/// agrees only up to the solver tolerance. The max-shifted weights are divided
/// by their sum, so tied actions get exactly equal mass.
pub fn softmax_policy(q: &Array2<f64>, v: &Array1<f64>) -> Result<Policy> {
    if q.nrows() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "softmax value vector",
            expected: q.nrows(),
            found: v.len(),
        });
    }
    let mut probs = Array2::zeros(q.dim());
    for (x, row) in q.outer_iter().enumerate() {
        let lse = logsumexp(row);
        let gap = (lse - v[x]).abs();
        if !(gap <= SOFT_PAIR_TOL) {
            return Err(Error::InconsistentSoftPair { state: x, gap });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = probs.row_mut(x);
        out.assign(&row.mapv(|qa| (qa - m).exp()));
        let total = out.sum();
        out /= total;
    }
    Ok(Policy::from_probs_unchecked(probs))
}

/// Runs the full pipeline: value iteration, Q recovery and policy extraction.
pub fn solve_soft(
    model: &MfgModel,
    reward: &Array2<f64>,
    opts: SolverOptions,
) -> Result<SoftSolution> {
    solve_soft_with(model, reward, opts, Execution::default())
}

pub fn solve_soft_with(
    model: &MfgModel,
    reward: &Array2<f64>,
    opts: SolverOptions,
    exec: Execution,
) -> Result<SoftSolution> {
    let out =
        soft_value_iteration_from(model, reward, Array1::zeros(model.n_states()), opts, exec)?;
    let q = soft_q_from_v(model, reward, &out.v)?;
    let policy = softmax_policy(&q, &out.v)?;
    Ok(SoftSolution {
        v: out.v,
        q,
        policy,
        iterations: out.iterations,
        residual: out.residual,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rkhs::RewardParams;
    use crate::traffic;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    #[test]
    fn zero_reward_closed_form() {
        let m = traffic::model();
        let out =
            soft_value_iteration(&m, &Array2::zeros((2, 2)), SolverOptions::default()).unwrap();
        assert!(out.converged);
        let want = 2.0f64.ln() / (1.0 - 0.8);
        assert_abs_diff_eq!(want, 3.46574, epsilon = 1e-5);
        for &v in out.v.iter() {
            assert_abs_diff_eq!(v, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_action_is_policy_evaluation() {
        // V = (I - beta P)^-1 r for |A| = 1, solved by hand for a 2-state chain.
        let t = Array3::from_shape_vec((2, 1, 2), vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let m = MfgModel::validated(t, 0.5, array![0.5, 0.5]).unwrap();
        let r = array![[1.0], [2.0]];
        let out = soft_value_iteration(
            &m,
            &r,
            SolverOptions {
                tol: 1e-13,
                max_iter: 10_000,
            },
        )
        .unwrap();
        // (I - 0.5 P) = [[0.75, -0.25], [-0.125, 0.625]]; det = 0.4375
        let v0 = (0.625 * 1.0 + 0.25 * 2.0) / 0.4375;
        let v1 = (0.125 * 1.0 + 0.75 * 2.0) / 0.4375;
        assert_abs_diff_eq!(out.v[0], v0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.v[1], v1, epsilon = 1e-12);
    }

    #[test]
    fn q_from_constant_v() {
        let m = traffic::model();
        let q = soft_q_from_v(&m, &Array2::zeros((2, 2)), &array![3.0, 3.0]).unwrap();
        for &v in q.iter() {
            assert_abs_diff_eq!(v, 0.8 * 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn q_hand_arithmetic() {
        let t = Array3::from_elem((2, 2, 2), 0.5);
        let m = MfgModel::validated(t, 0.8, array![0.5, 0.5]).unwrap();
        let r = array![[0.1, 0.2], [0.3, 0.4]];
        let q = soft_q_from_v(&m, &r, &array![1.0, 2.0]).unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(q[[x, a]], r[[x, a]] + 0.8 * 1.5, epsilon = 1e-15);
            }
        }
        assert!(soft_q_from_v(&m, &r, &array![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let q = array![[1.0, 0.0], [2.0, 2.0]];
        let v = array![logsumexp(q.row(0)), logsumexp(q.row(1))];
        let pi = softmax_policy(&q, &v).unwrap();
        let e = 1f64.exp();
        assert_abs_diff_eq!(pi.prob(0, 0), e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(pi.prob(0, 0), 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(pi.prob(0, 1), 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(pi.prob(1, 0), 0.5, epsilon = 1e-15);

        let shifted = softmax_policy(&(&q + 7.0), &(&v + 7.0)).unwrap();
        assert!(pi.max_abs_difference(&shifted).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_rejects_inconsistent_pair() {
        let q = array![[1.0, 0.0]];
        let err = softmax_policy(&q, &array![0.0]).unwrap_err();
        assert!(matches!(err, Error::InconsistentSoftPair { state: 0, .. }));
    }

    #[test]
    fn non_finite_reward_rejected() {
        let m = traffic::model();
        let r = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(soft_value_iteration(&m, &r, SolverOptions::default()).is_err());
    }

    #[test]
    fn iteration_cap_is_reported() {
        let m = traffic::model();
        let out = soft_value_iteration(
            &m,
            &Array2::ones((2, 2)),
            SolverOptions {
                tol: 1e-10,
                max_iter: 3,
            },
        )
        .unwrap();
        assert_eq!(out.iterations, 3);
        assert!(!out.converged);
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let big = array![1000.0, 1000.0];
        assert_abs_diff_eq!(logsumexp(big.view()), 1000.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn fixed_point_consistency_on_traffic() {
        let m = traffic::model();
        let fm = traffic::feature_map();
        let th = RewardParams::new(
            array![-0.072, 0.072],
            array![-0.9016, 0.8307, 0.6536, -0.5828],
        )
        .unwrap();
        let r = fm.reward_matrix(&th).unwrap();
        let sol = solve_soft(&m, &r, SolverOptions::default()).unwrap();
        // Independent long-run iteration at a tighter tolerance.
        let mut v = Array1::<f64>::zeros(2);
        for _ in 0..400 {
            v = Array1::from_shape_fn(2, |x| {
                (0..2)
                    .map(|a| (r[[x, a]] + 0.8 * m.transition_row(x, a).dot(&v)).exp())
                    .sum::<f64>()
                    .ln()
            });
        }
        for x in 0..2 {
            assert_abs_diff_eq!(sol.v[x], v[x], epsilon = 1e-10);
            assert_abs_diff_eq!(sol.v[x], logsumexp(sol.q.row(x)), epsilon = 1e-10);
            let s: f64 = sol.policy.probs().row(x).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tight_solve_matches_exp_q_minus_v() {
        let m = traffic::model();
        let r = array![[0.3, -1.0], [2.0, 0.5]];
        let sol = solve_soft(
            &m,
            &r,
            SolverOptions {
                tol: 1e-14,
                max_iter: 10_000,
            },
        )
        .unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert_abs_diff_eq!(
                    sol.policy.prob(x, a),
                    (sol.q[[x, a]] - sol.v[x]).exp(),
                    epsilon = 1e-12
                );
            }
        }
    }
}
