//! Finite stationary mean-field game instances and policy-level dynamics.
//!
//! Transitions are stored already evaluated at the fixed mean-field term, so a
//! model is just a controlled Markov chain plus the population distribution
//! that the dynamics were evaluated at.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Tolerance for row-stochasticity and distribution checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Largest row-sum deviation that [`MfgModel::renormalized`] will repair.
pub const RENORMALIZE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MfgModel {
    transition: Array3<f64>,
    discount: f64,
    mean_field: Array1<f64>,
    state_labels: Option<Vec<String>>,
    action_labels: Option<Vec<String>>,
}

impl MfgModel {
    /// Builds a model from `transition[x, a, y] = p(y | x, a, mu)`.
    ///
    /// Only shapes are checked here; probabilistic invariants are reported by
    /// [`validate_model`]. Use [`MfgModel::validated`] to get both.
    pub fn new(transition: Array3<f64>, discount: f64, mean_field: Array1<f64>) -> Result<Self> {
        let (nx, na, ny) = transition.dim();
        if nx == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one state".into(),
            ));
        }
        if na == 0 {
            return Err(Error::InvalidArgument(
                "model needs at least one action".into(),
            ));
        }
        if ny != nx {
            return Err(Error::DimensionMismatch {
                what: "transition successor axis",
                expected: nx,
                found: ny,
            });
        }
        if mean_field.len() != nx {
            return Err(Error::DimensionMismatch {
                what: "mean field",
                expected: nx,
                found: mean_field.len(),
            });
        }
        Ok(Self {
            transition,
            discount,
            mean_field,
            state_labels: None,
            action_labels: None,
        })
    }

    /// Like [`MfgModel::new`] but fails with the full report if any invariant
    /// is violated.
    pub fn validated(
        transition: Array3<f64>,
        discount: f64,
        mean_field: Array1<f64>,
    ) -> Result<Self> {
        let model = Self::new(transition, discount, mean_field)?;
        let report = validate_model(&model);
        if report.is_valid() {
            Ok(model)
        } else {
            Err(Error::InvalidModel(report))
        }
    }

    pub fn with_labels(
        mut self,
        state_labels: Option<Vec<String>>,
        action_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(l) = &state_labels {
            if l.len() != self.n_states() {
                return Err(Error::DimensionMismatch {
                    what: "state labels",
                    expected: self.n_states(),
                    found: l.len(),
                });
            }
        }
        if let Some(l) = &action_labels {
            if l.len() != self.n_actions() {
                return Err(Error::DimensionMismatch {
                    what: "action labels",
                    expected: self.n_actions(),
                    found: l.len(),
                });
            }
        }
        self.state_labels = state_labels;
        self.action_labels = action_labels;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.transition.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.transition.dim().1
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// `p(. | x, a)` as a view over successor states.
    pub fn transition_row(&self, x: usize, a: usize) -> ArrayView1<'_, f64> {
        self.transition.slice(ndarray::s![x, a, ..])
    }

    pub fn mean_field(&self) -> &Array1<f64> {
        &self.mean_field
    }

    pub fn state_labels(&self) -> Option<&[String]> {
        self.state_labels.as_deref()
    }

    pub fn action_labels(&self) -> Option<&[String]> {
        self.action_labels.as_deref()
    }

    /// Returns a copy with the mean-field term replaced (e.g. by an empirical
    /// estimate). Transitions are left untouched.
    pub fn with_mean_field(&self, mean_field: Array1<f64>) -> Result<Self> {
        let mut m = Self::new(self.transition.clone(), self.discount, mean_field)?;
        m.state_labels = self.state_labels.clone();
        m.action_labels = self.action_labels.clone();
        Ok(m)
    }

    /// Rescales transition rows and the mean field whose sums deviate from one
    /// by at most [`RENORMALIZE_TOL`]. Returns the new model and the number of
    /// vectors that were rescaled. Larger deviations are left in place for
    /// validation to report.
    pub fn renormalized(&self) -> (Self, usize) {
        let mut out = self.clone();
        let mut touched = 0;
        let fix = |row: &mut ndarray::ArrayViewMut1<f64>| -> bool {
            let s = row.sum();
            let dev = (s - 1.0).abs();
            if dev > 0.0 && dev <= RENORMALIZE_TOL && row.iter().all(|&p| p >= 0.0) {
                row.mapv_inplace(|p| p / s);
                true
            } else {
                false
            }
        };
        for mut slab in out.transition.outer_iter_mut() {
            for mut row in slab.outer_iter_mut() {
                if fix(&mut row) {
                    touched += 1;
                }
            }
        }
        if fix(&mut out.mean_field.view_mut()) {
            touched += 1;
        }
        (out, touched)
    }
}

/// A single violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFiniteTransition {
        x: usize,
        a: usize,
        y: usize,
    },
    NegativeTransition {
        x: usize,
        a: usize,
        y: usize,
        value: f64,
    },
    TransitionRowSum {
        x: usize,
        a: usize,
        sum: f64,
    },
    NonFiniteMeanField {
        x: usize,
    },
    NegativeMeanField {
        x: usize,
        value: f64,
    },
    MeanFieldSum {
        sum: f64,
    },
    Discount {
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NonFiniteTransition { x, a, y } => {
                write!(f, "entry (x={x},a={a},y={y}) is not finite")
            }
            Violation::NegativeTransition { x, a, y, value } => {
                write!(f, "entry (x={x},a={a},y={y}) is negative ({value})")
            }
            Violation::TransitionRowSum { x, a, sum } => {
                write!(f, "row (x={x},a={a}) sums to {}", fmt_sum(sum))
            }
            Violation::NonFiniteMeanField { x } => write!(f, "mean_field[{x}] is not finite"),
            Violation::NegativeMeanField { x, value } => {
                write!(f, "mean_field[{x}] is negative ({value})")
            }
            Violation::MeanFieldSum { sum } => {
                write!(f, "mean_field sums to {}", fmt_sum(sum))
            }
            Violation::Discount { value } => write!(f, "discount not in (0,1) (got {value})"),
        }
    }
}

// 0.5 + 0.6 prints as 1.1 rather than 1.1000000000000001.
fn fmt_sum(s: f64) -> String {
    let short = format!("{s:.12}");
    let trimmed = short.trim_end_matches('0').trim_end_matches('.');
    if (trimmed.parse::<f64>().unwrap_or(s) - s).abs() <= 1e-15 {
        trimmed.to_string()
    } else {
        format!("{s}")
    }
}

/// Result of [`validate_model`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

/// Lists every violated invariant of `model`. Never fails.
pub fn validate_model(model: &MfgModel) -> ValidationReport {
    let mut violations = Vec::new();
    let (nx, na, _) = model.transition.dim();
    for x in 0..nx {
        for a in 0..na {
            let row = model.transition_row(x, a);
            for (y, &p) in row.iter().enumerate() {
                if !p.is_finite() {
                    violations.push(Violation::NonFiniteTransition { x, a, y });
                } else if p < 0.0 {
                    violations.push(Violation::NegativeTransition { x, a, y, value: p });
                }
            }
            let sum = row.sum();
            if sum.is_finite() && (sum - 1.0).abs() > STOCHASTIC_TOL {
                violations.push(Violation::TransitionRowSum { x, a, sum });
            }
        }
    }
    for (x, &m) in model.mean_field.iter().enumerate() {
        if !m.is_finite() {
            violations.push(Violation::NonFiniteMeanField { x });
        } else if m < 0.0 {
            violations.push(Violation::NegativeMeanField { x, value: m });
        }
    }
    let sum = model.mean_field.sum();
    if sum.is_finite() && (sum - 1.0).abs() > STOCHASTIC_TOL {
        violations.push(Violation::MeanFieldSum { sum });
    }
    if !(model.discount > 0.0 && model.discount < 1.0) {
        violations.push(Violation::Discount {
            value: model.discount,
        });
    }
    ValidationReport { violations }
}

/// A stationary stochastic policy `probs[x, a] = pi(a | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (nx, na) = probs.dim();
        if nx == 0 || na == 0 {
            return Err(Error::InvalidPolicy("empty probability matrix".into()));
        }
        for (x, row) in probs.outer_iter().enumerate() {
            if let Some(a) = row.iter().position(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidPolicy(format!(
                    "entry (x={x},a={a}) = {} is not a probability",
                    row[a]
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidPolicy(format!("row x={x} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    /// Skips validation; callers guarantee row-stochasticity.
    pub(crate) fn from_probs_unchecked(probs: Array2<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Puts all mass on `actions[x]` in state `x`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (x, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    size: n_actions,
                });
            }
            probs[[x, a]] = 1.0;
        }
        Policy::new(probs)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[[x, a]]
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &Policy) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok((&self.probs - &other.probs).mapv(|d| d * d).sum().sqrt())
    }

    /// Largest per-entry absolute difference.
    pub fn max_abs_difference(&self, other: &Policy) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok((&self.probs - &other.probs)
            .iter()
            .fold(0.0_f64, |m, d| m.max(d.abs())))
    }
}

fn check_same_shape(p: &Policy, q: &Policy) -> Result<()> {
    if p.n_states() != q.n_states() {
        return Err(Error::DimensionMismatch {
            what: "policy states",
            expected: p.n_states(),
            found: q.n_states(),
        });
    }
    if p.n_actions() != q.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "policy actions",
            expected: p.n_actions(),
            found: q.n_actions(),
        });
    }
    Ok(())
}

pub(crate) fn check_policy_fits(model: &MfgModel, policy: &Policy) -> Result<()> {
    if policy.n_states() != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "policy states",
            expected: model.n_states(),
            found: policy.n_states(),
        });
    }
    if policy.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "policy actions",
            expected: model.n_actions(),
            found: policy.n_actions(),
        });
    }
    Ok(())
}

/// `A[x, y] = sum_a p(y | x, a) pi(a | x)`.
pub fn policy_transition_matrix(model: &MfgModel, policy: &Policy) -> Result<Array2<f64>> {
    check_policy_fits(model, policy)?;
    let nx = model.n_states();
    let mut out = Array2::zeros((nx, nx));
    for (x, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for a in 0..model.n_actions() {
            let w = policy.prob(x, a);
            if w != 0.0 {
                row.scaled_add(w, &model.transition_row(x, a));
            }
        }
    }
    Ok(out)
}

/// l1 distance between `mu` and its one-step image `mu^T A_pi`.
pub fn stationarity_residual(model: &MfgModel, policy: &Policy, mu: &Array1<f64>) -> Result<f64> {
    if mu.len() != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "distribution",
            expected: model.n_states(),
            found: mu.len(),
        });
    }
    let a = policy_transition_matrix(model, policy)?;
    let pushed = mu.dot(&a);
    Ok((mu - &pushed).mapv(f64::abs).sum())
}
