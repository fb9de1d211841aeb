//! Kernel feature maps and the linear reward model.
//!
//! The reward lives in the span of kernel sections at a finite set of anchor
//! points, `h = sum_j alpha_j k(., z_j)`, so by the reproducing property
//! `h(z) = sum_j alpha_j k(z, z_j)`. Together with a per-state offset this
//! makes `r(x, a) = <theta, f(x, a)>` with `f(x, a) = [e_x; Phi(x, a)]`.

use std::fmt;

use ndarray::{concatenate, Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Gaussian,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Gaussian => f.write_str("gaussian"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    kind: KernelKind,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { kind, bandwidth })
    }

    /// `k(z1, z2) = exp(-|z1 - z2|^2 / (2 sigma^2))`.
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, bandwidth)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        if z1.len() != z2.len() {
            return Err(Error::DimensionMismatch {
                what: "kernel input",
                expected: z1.len(),
                found: z2.len(),
            });
        }
        Ok(self.eval_unchecked(z1, z2))
    }

    fn eval_unchecked(&self, z1: &[f64], z2: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                let d2: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, z1: &[f64], z2: &[f64]) -> Result<f64> {
    spec.eval(z1, z2)
}

/// Reward parameters: state offsets `lambda` and anchor coefficients `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    pub lambda: Array1<f64>,
    pub alpha: Array1<f64>,
}

impl RewardParams {
    pub fn new(lambda: Array1<f64>, alpha: Array1<f64>) -> Result<Self> {
        if lambda.iter().chain(alpha.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward parameters"));
        }
        Ok(Self { lambda, alpha })
    }

    pub fn zeros(n_states: usize, n_anchors: usize) -> Self {
        Self {
            lambda: Array1::zeros(n_states),
            alpha: Array1::zeros(n_anchors),
        }
    }

    pub fn len(&self) -> usize {
        self.lambda.len() + self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[lambda; alpha]`.
    pub fn concat(&self) -> Array1<f64> {
        concatenate(Axis(0), &[self.lambda.view(), self.alpha.view()]).expect("1-d concat")
    }

    /// Splits a stacked vector back into `(lambda, alpha)`.
    pub fn from_concat(theta: &Array1<f64>, n_states: usize) -> Result<Self> {
        if theta.len() < n_states {
            return Err(Error::DimensionMismatch {
                what: "stacked parameters",
                expected: n_states,
                found: theta.len(),
            });
        }
        Self::new(
            theta.slice(ndarray::s![..n_states]).to_owned(),
            theta.slice(ndarray::s![n_states..]).to_owned(),
        )
    }
}

/// Anchor-based feature map over a finite state-action space.
///
/// Kernel inputs are `z = [enc(x); enc(a); mu]`; the default encodings are
/// the raw indices as scalars.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    kernel: KernelSpec,
    anchors: Vec<Array1<f64>>,
    state_encoding: Vec<Array1<f64>>,
    action_encoding: Vec<Array1<f64>>,
    mean_field: Array1<f64>,
    // joint[x, a, k] = f(x, a)_k
    joint: Array3<f64>,
}

impl FeatureMap {
    pub fn new(
        kernel: KernelSpec,
        anchors: Vec<Array1<f64>>,
        state_encoding: Vec<Array1<f64>>,
        action_encoding: Vec<Array1<f64>>,
        mean_field: Array1<f64>,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidArgument(
                "feature map needs at least one anchor".into(),
            ));
        }
        if state_encoding.is_empty() || action_encoding.is_empty() {
            return Err(Error::InvalidArgument(
                "empty state or action encoding".into(),
            ));
        }
        if mean_field.len() != state_encoding.len() {
            return Err(Error::DimensionMismatch {
                what: "feature map mean field",
                expected: state_encoding.len(),
                found: mean_field.len(),
            });
        }
        let ds = state_encoding[0].len();
        let da = action_encoding[0].len();
        if let Some(e) = state_encoding.iter().find(|e| e.len() != ds) {
            return Err(Error::DimensionMismatch {
                what: "state encoding",
                expected: ds,
                found: e.len(),
            });
        }
        if let Some(e) = action_encoding.iter().find(|e| e.len() != da) {
            return Err(Error::DimensionMismatch {
                what: "action encoding",
                expected: da,
                found: e.len(),
            });
        }
        let dim = ds + da + mean_field.len();
        if let Some(z) = anchors.iter().find(|z| z.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "anchor",
                expected: dim,
                found: z.len(),
            });
        }
        let mut fm = Self {
            kernel,
            anchors,
            state_encoding,
            action_encoding,
            mean_field,
            joint: Array3::zeros((0, 0, 0)),
        };
        fm.joint = fm.build_joint_table();
        Ok(fm)
    }

    /// Anchors at the encodings of every `(x, a)` pair, enumerated state-major:
    /// `(0,0), (0,1), ..., (1,0), ...`.
    pub fn all_state_action_pairs(
        kernel: KernelSpec,
        n_states: usize,
        n_actions: usize,
        mean_field: Array1<f64>,
    ) -> Result<Self> {
        let se = index_encoding(n_states);
        let ae = index_encoding(n_actions);
        Self::all_pairs_with_encoding(kernel, se, ae, mean_field)
    }

    pub fn all_pairs_with_encoding(
        kernel: KernelSpec,
        state_encoding: Vec<Array1<f64>>,
        action_encoding: Vec<Array1<f64>>,
        mean_field: Array1<f64>,
    ) -> Result<Self> {
        let mut anchors = Vec::with_capacity(state_encoding.len() * action_encoding.len());
        for s in &state_encoding {
            for a in &action_encoding {
                anchors.push(
                    concatenate(Axis(0), &[s.view(), a.view(), mean_field.view()])
                        .expect("1-d concat"),
                );
            }
        }
        Self::new(kernel, anchors, state_encoding, action_encoding, mean_field)
    }

    /// Explicit anchors with the default scalar-index encodings.
    pub fn with_anchors(
        kernel: KernelSpec,
        anchors: Vec<Array1<f64>>,
        n_states: usize,
        n_actions: usize,
        mean_field: Array1<f64>,
    ) -> Result<Self> {
        Self::new(
            kernel,
            anchors,
            index_encoding(n_states),
            index_encoding(n_actions),
            mean_field,
        )
    }

    fn build_joint_table(&self) -> Array3<f64> {
        let (nx, na, m) = (self.n_states(), self.n_actions(), self.n_anchors());
        let mut t = Array3::zeros((nx, na, nx + m));
        for x in 0..nx {
            for a in 0..na {
                t[[x, a, x]] = 1.0;
                let z = self.input_unchecked(x, a);
                for (j, anchor) in self.anchors.iter().enumerate() {
                    t[[x, a, nx + j]] = self.kernel.eval_unchecked(
                        z.as_slice().expect("contiguous"),
                        anchor.as_slice().expect("contiguous"),
                    );
                }
            }
        }
        t
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn anchors(&self) -> &[Array1<f64>] {
        &self.anchors
    }

    pub fn mean_field(&self) -> &Array1<f64> {
        &self.mean_field
    }

    pub fn n_states(&self) -> usize {
        self.state_encoding.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_encoding.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Length of the joint feature `f(x, a)`, i.e. `|X| + m`.
    pub fn dim(&self) -> usize {
        self.n_states() + self.n_anchors()
    }

    fn check_pair(&self, x: usize, a: usize) -> Result<()> {
        if x >= self.n_states() {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: x,
                size: self.n_states(),
            });
        }
        if a >= self.n_actions() {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                size: self.n_actions(),
            });
        }
        Ok(())
    }

    fn input_unchecked(&self, x: usize, a: usize) -> Array1<f64> {
        concatenate(
            Axis(0),
            &[
                self.state_encoding[x].view(),
                self.action_encoding[a].view(),
                self.mean_field.view(),
            ],
        )
        .expect("1-d concat")
    }

    /// Kernel input `z = [enc(x); enc(a); mu]`.
    pub fn input(&self, x: usize, a: usize) -> Result<Array1<f64>> {
        self.check_pair(x, a)?;
        Ok(self.input_unchecked(x, a))
    }

    /// `Phi(x, a)_j = k(z(x, a), z_j)`.
    pub fn feature_map(&self, x: usize, a: usize) -> Result<Array1<f64>> {
        self.check_pair(x, a)?;
        Ok(self
            .joint
            .slice(ndarray::s![x, a, self.n_states()..])
            .to_owned())
    }

    /// `f(x, a) = [e_x; Phi(x, a)]`.
    pub fn joint_feature(&self, x: usize, a: usize) -> Result<Array1<f64>> {
        self.check_pair(x, a)?;
        Ok(self.joint.slice(ndarray::s![x, a, ..]).to_owned())
    }

    /// All joint features at once, indexed `[x, a, k]`.
    pub fn joint_table(&self) -> &Array3<f64> {
        &self.joint
    }

    fn check_params(&self, theta: &RewardParams) -> Result<()> {
        if theta.lambda.len() != self.n_states() {
            return Err(Error::DimensionMismatch {
                what: "lambda",
                expected: self.n_states(),
                found: theta.lambda.len(),
            });
        }
        if theta.alpha.len() != self.n_anchors() {
            return Err(Error::DimensionMismatch {
                what: "alpha",
                expected: self.n_anchors(),
                found: theta.alpha.len(),
            });
        }
        Ok(())
    }

    /// `r(x, a) = lambda(x) + sum_j alpha_j Phi(x, a)_j`.
    pub fn reward_eval(&self, theta: &RewardParams, x: usize, a: usize) -> Result<f64> {
        self.check_params(theta)?;
        self.check_pair(x, a)?;
        let phi = self.joint.slice(ndarray::s![x, a, self.n_states()..]);
        Ok(theta.lambda[x] + theta.alpha.dot(&phi))
    }

    /// Reward table `r[x, a]`.
    pub fn reward_matrix(&self, theta: &RewardParams) -> Result<Array2<f64>> {
        self.check_params(theta)?;
        let (nx, na) = (self.n_states(), self.n_actions());
        let mut r = Array2::zeros((nx, na));
        for x in 0..nx {
            for a in 0..na {
                let phi = self.joint.slice(ndarray::s![x, a, nx..]);
                r[[x, a]] = theta.lambda[x] + theta.alpha.dot(&phi);
            }
        }
        Ok(r)
    }

    /// `K = max_{x,a} |f(x, a)|_2`.
    pub fn feature_bound(&self) -> f64 {
        self.joint
            .lanes(Axis(2))
            .into_iter()
            .map(|f| f.dot(&f).sqrt())
            .fold(0.0, f64::max)
    }

    /// `G[i, j] = k(z_i, z_j)` over the anchors.
    pub fn gram_matrix(&self) -> Array2<f64> {
        let m = self.n_anchors();
        Array2::from_shape_fn((m, m), |(i, j)| {
            self.kernel.eval_unchecked(
                self.anchors[i].as_slice().expect("contiguous"),
                self.anchors[j].as_slice().expect("contiguous"),
            )
        })
    }
}

fn index_encoding(n: usize) -> Vec<Array1<f64>> {
    (0..n).map(|i| Array1::from_elem(1, i as f64)).collect()
}
