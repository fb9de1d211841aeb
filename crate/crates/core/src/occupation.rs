//! Discounted occupation measures from the Bellman-flow linear system.
//!
//! The un-normalized state occupation `g(x) = sum_t beta^t P(x_t = x)` solves
//! `g = mu0 + beta A^T g`, where `A` is the policy-averaged transition matrix.
//! It sums to `1 / (1 - beta)`; multiplying by `1 - beta` gives the normalized
//! measure.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{check_policy_fits, policy_transition_matrix, MfgModel, Policy};
use crate::rkhs::FeatureMap;

/// Negative entries at or above this value are treated as rounding and clamped.
pub const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    pub state_occ: Array1<f64>,
    pub state_action_occ: Array2<f64>,
    /// `false` for the un-normalized convention (total mass `1 / (1 - beta)`).
    pub normalized: bool,
}

impl OccupationMeasure {
    /// Rescales an un-normalized measure by `1 - beta`.
    pub fn normalized(&self, discount: f64) -> Self {
        if self.normalized {
            return self.clone();
        }
        let c = 1.0 - discount;
        Self {
            state_occ: &self.state_occ * c,
            state_action_occ: &self.state_action_occ * c,
            normalized: true,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.state_occ.sum()
    }
}

/// Solves `(I - beta A^T) g = mu0` with a dense LU factorization.
pub fn discounted_state_occupation(
    model: &MfgModel,
    policy: &Policy,
    mu0: &Array1<f64>,
) -> Result<Array1<f64>> {
    let nx = model.n_states();
    if mu0.len() != nx {
        return Err(Error::DimensionMismatch {
            what: "initial distribution",
            expected: nx,
            found: mu0.len(),
        });
    }
    let a = policy_transition_matrix(model, policy)?;
    let beta = model.discount();
    let lhs = DMatrix::from_fn(nx, nx, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - beta * a[[j, i]]
    });
    let rhs = DVector::from_iterator(nx, mu0.iter().copied());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("Bellman-flow system"))?;
    let mut out = Array1::zeros(nx);
    for (i, &g) in sol.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite("state occupation"));
        }
        if g < -CLAMP_TOL {
            return Err(Error::NegativeOccupation { index: i, value: g });
        }
        out[i] = g.max(0.0);
    }
    Ok(out)
}

/// `gamma(x, a) = g(x) pi(a | x)`.
pub fn state_action_occupation(state_occ: &Array1<f64>, policy: &Policy) -> Result<Array2<f64>> {
    if state_occ.len() != policy.n_states() {
        return Err(Error::DimensionMismatch {
            what: "state occupation",
            expected: policy.n_states(),
            found: state_occ.len(),
        });
    }
    let mut out = policy.probs().clone();
    for (mut row, &g) in out.outer_iter_mut().zip(state_occ.iter()) {
        row *= g;
    }
    Ok(out)
}

/// Un-normalized state and state-action occupation of `policy` from `mu0`.
pub fn occupation_measure(
    model: &MfgModel,
    policy: &Policy,
    mu0: &Array1<f64>,
) -> Result<OccupationMeasure> {
    check_policy_fits(model, policy)?;
    let state_occ = discounted_state_occupation(model, policy, mu0)?;
    let state_action_occ = state_action_occupation(&state_occ, policy)?;
    Ok(OccupationMeasure {
        state_occ,
        state_action_occ,
        normalized: false,
    })
}

/// `sum_{x,a} f(x, a) gamma(x, a)`.
pub fn discounted_feature_expectation(occ: &Array2<f64>, fm: &FeatureMap) -> Result<Array1<f64>> {
    let (nx, na) = occ.dim();
    if nx != fm.n_states() {
        return Err(Error::DimensionMismatch {
            what: "occupation states",
            expected: fm.n_states(),
            found: nx,
        });
    }
    if na != fm.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "occupation actions",
            expected: fm.n_actions(),
            found: na,
        });
    }
    let table = fm.joint_table();
    let mut out = Array1::zeros(fm.dim());
    for x in 0..nx {
        for a in 0..na {
            let w = occ[[x, a]];
            if w != 0.0 {
                out.scaled_add(w, &table.slice(ndarray::s![x, a, ..]));
            }
        }
    }
    Ok(out)
}

/// `|g - mu0 - beta A^T g|_inf`.
pub fn bellman_flow_residual(
    model: &MfgModel,
    policy: &Policy,
    mu0: &Array1<f64>,
    state_occ: &Array1<f64>,
) -> Result<f64> {
    let a = policy_transition_matrix(model, policy)?;
    let pushed = state_occ.dot(&a);
    let beta = model.discount();
    Ok(state_occ
        .iter()
        .zip(mu0.iter())
        .zip(pushed.iter())
        .fold(0.0_f64, |m, ((g, mu), p)| m.max((g - mu - beta * p).abs())))
}
