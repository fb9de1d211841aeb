//! Expert demonstrations: simulation, trajectory files and empirical estimators.
//!
//! Trajectory `i` of a simulated set draws from a ChaCha8 generator seeded with
//! the user seed and switched to stream `i`, so results depend neither on how
//! many trajectories are requested nor on how they are scheduled.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{check_policy_fits, MfgModel, Policy};
use crate::rkhs::FeatureMap;

/// Identifier of the sampling scheme; bump when the draw order changes.
pub const RNG_SCHEME: &str = "chacha8-stream-per-trajectory-v1";

/// One demonstration: `(x(t), a(t))` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trajectory {
    steps: Vec<(u32, u32)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Self {
            steps: steps
                .into_iter()
                .map(|(x, a)| (x as u32, a as u32))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `T_i`, the last time index.
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.iter().map(|&(x, a)| (x as usize, a as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    /// Seed used to simulate the set, if it was simulated.
    pub seed: Option<u64>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn min_horizon(&self) -> usize {
        self.trajectories
            .iter()
            .map(Trajectory::horizon)
            .min()
            .unwrap_or(0)
    }

    /// Checks every index against the given space sizes.
    pub fn check_ranges(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for tr in &self.trajectories {
            for (x, a) in tr.steps() {
                if x >= n_states {
                    return Err(Error::IndexOutOfRange {
                        what: "state",
                        index: x,
                        size: n_states,
                    });
                }
                if a >= n_actions {
                    return Err(Error::IndexOutOfRange {
                        what: "action",
                        index: a,
                        size: n_actions,
                    });
                }
            }
        }
        Ok(())
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory set".into()));
        }
        if self.trajectories.iter().any(Trajectory::is_empty) {
            return Err(Error::InvalidArgument("trajectory with no steps".into()));
        }
        Ok(())
    }
}

struct Sampler {
    init: WeightedIndex<f64>,
    policy: Vec<WeightedIndex<f64>>,
    // indexed x * n_actions + a
    transition: Vec<WeightedIndex<f64>>,
    n_actions: usize,
}

fn weighted(weights: impl IntoIterator<Item = f64>, what: &str) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights)
        .map_err(|e| Error::InvalidArgument(format!("cannot sample from {what}: {e}")))
}

impl Sampler {
    fn new(model: &MfgModel, policy: &Policy) -> Result<Self> {
        let (nx, na) = (model.n_states(), model.n_actions());
        let init = weighted(model.mean_field().iter().copied(), "mean field")?;
        let policy = (0..nx)
            .map(|x| weighted(policy.probs().row(x).iter().copied(), "policy row"))
            .collect::<Result<Vec<_>>>()?;
        let mut transition = Vec::with_capacity(nx * na);
        for x in 0..nx {
            for a in 0..na {
                transition.push(weighted(
                    model.transition_row(x, a).iter().copied(),
                    "transition row",
                )?);
            }
        }
        Ok(Self {
            init,
            policy,
            transition,
            n_actions: na,
        })
    }

    fn run(&self, rng: &mut ChaCha8Rng, horizon: usize) -> Trajectory {
        let mut steps = Vec::with_capacity(horizon + 1);
        let mut x = self.init.sample(rng);
        for t in 0..=horizon {
            let a = self.policy[x].sample(rng);
            steps.push((x as u32, a as u32));
            if t < horizon {
                x = self.transition[x * self.n_actions + a].sample(rng);
            }
        }
        Trajectory { steps }
    }
}

fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `d` trajectories of `horizon + 1` steps with `x(0) ~ mu`,
/// `a(t) ~ pi(. | x(t))` and `x(t+1) ~ p(. | x(t), a(t))`.
pub fn simulate_trajectories(
    model: &MfgModel,
    policy: &Policy,
    d: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    simulate_trajectories_with(model, policy, d, horizon, seed, Execution::default())
}

pub fn simulate_trajectories_with(
    model: &MfgModel,
    policy: &Policy,
    d: usize,
    horizon: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrajectorySet> {
    if d == 0 {
        return Err(Error::InvalidArgument(
            "number of trajectories must be at least 1".into(),
        ));
    }
    check_policy_fits(model, policy)?;
    let sampler = Sampler::new(model, policy)?;
    let trajectories = exec.map_indexed(d, |i| sampler.run(&mut trajectory_rng(seed, i), horizon));
    Ok(TrajectorySet {
        trajectories,
        seed: Some(seed),
    })
}

/// Average over trajectories of the per-trajectory visit frequencies.
pub fn empirical_mean_field(demos: &TrajectorySet, n_states: usize) -> Result<Array1<f64>> {
    demos.check_nonempty()?;
    demos.check_ranges(n_states, usize::MAX)?;
    let mut out = Array1::zeros(n_states);
    let mut counts = vec![0usize; n_states];
    for tr in &demos.trajectories {
        counts.iter_mut().for_each(|c| *c = 0);
        for (x, _) in tr.steps() {
            counts[x] += 1;
        }
        let len = tr.len() as f64;
        for (o, &c) in out.iter_mut().zip(&counts) {
            *o += c as f64 / len;
        }
    }
    out /= demos.len() as f64;
    Ok(out)
}

/// Mean and standard error of the per-trajectory discounted feature sums.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEstimate {
    pub mean: Array1<f64>,
    /// Sample standard deviation over `sqrt(d)`; zero when `d = 1`.
    pub std_error: Array1<f64>,
    /// Largest per-trajectory truncation bias, `beta^(T+1) K / (1 - beta)`
    /// for the shortest recorded horizon.
    pub truncation_bias_bound: f64,
    pub n_trajectories: usize,
}

/// `beta^(T+1) K / (1 - beta)`: how far a sum truncated at `T` can be from the
/// infinite discounted sum when every feature has norm at most `K`.
pub fn truncation_bias_bound(beta: f64, horizon: usize, feature_bound: f64) -> f64 {
    beta.powi(horizon as i32 + 1) * feature_bound / (1.0 - beta)
}

fn discounted_sum(tr: &Trajectory, fm: &FeatureMap, beta: f64) -> Array1<f64> {
    let table = fm.joint_table();
    let mut acc = Array1::zeros(fm.dim());
    let mut w = 1.0;
    for (x, a) in tr.steps() {
        acc.scaled_add(w, &table.slice(ndarray::s![x, a, ..]));
        w *= beta;
    }
    acc
}

pub fn empirical_feature_stats(
    demos: &TrajectorySet,
    fm: &FeatureMap,
    beta: f64,
) -> Result<FeatureEstimate> {
    empirical_feature_stats_with(demos, fm, beta, Execution::default())
}

pub fn empirical_feature_stats_with(
    demos: &TrajectorySet,
    fm: &FeatureMap,
    beta: f64,
    exec: Execution,
) -> Result<FeatureEstimate> {
    demos.check_nonempty()?;
    demos.check_ranges(fm.n_states(), fm.n_actions())?;
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "discount must be in [0,1), got {beta}"
        )));
    }
    let sums = exec.map_indexed(demos.len(), |i| {
        discounted_sum(&demos.trajectories[i], fm, beta)
    });
    let d = sums.len() as f64;
    let mut mean = Array1::zeros(fm.dim());
    for s in &sums {
        mean += s;
    }
    mean /= d;
    let mut var = Array1::<f64>::zeros(fm.dim());
    for s in &sums {
        let diff = s - &mean;
        var += &(&diff * &diff);
    }
    let std_error = if sums.len() > 1 {
        var.mapv(|v| (v / (d - 1.0)).sqrt() / d.sqrt())
    } else {
        Array1::zeros(fm.dim())
    };
    Ok(FeatureEstimate {
        mean,
        std_error,
        truncation_bias_bound: truncation_bias_bound(beta, demos.min_horizon(), fm.feature_bound()),
        n_trajectories: sums.len(),
    })
}

/// `(1/d) sum_i sum_t beta^t f(x_i(t), a_i(t))`.
pub fn empirical_feature_expectation(
    demos: &TrajectorySet,
    fm: &FeatureMap,
    beta: f64,
) -> Result<Array1<f64>> {
    Ok(empirical_feature_stats(demos, fm, beta)?.mean)
}

/// `(1/d) sum_i sum_t beta^t 1{(x_i(t), a_i(t)) = (x, a)}`, the empirical
/// un-normalized state-action occupation.
pub fn empirical_occupation(
    demos: &TrajectorySet,
    n_states: usize,
    n_actions: usize,
    beta: f64,
) -> Result<Array2<f64>> {
    demos.check_nonempty()?;
    demos.check_ranges(n_states, n_actions)?;
    let mut out = Array2::zeros((n_states, n_actions));
    for tr in &demos.trajectories {
        let mut w = 1.0;
        for (x, a) in tr.steps() {
            out[[x, a]] += w;
            w *= beta;
        }
    }
    out /= demos.len() as f64;
    Ok(out)
}

/// Writes the line-oriented trajectory format:
///
/// ```text
/// # seed 42
/// traj 0 2
/// 0 0 1
/// 1 1 1
/// 2 1 0
/// ```
pub fn write_trajectories<W: Write>(demos: &TrajectorySet, mut w: W) -> Result<()> {
    writeln!(w, "# rng {RNG_SCHEME}")?;
    if let Some(seed) = demos.seed {
        writeln!(w, "# seed {seed}")?;
    }
    for (i, tr) in demos.trajectories.iter().enumerate() {
        writeln!(w, "traj {i} {}", tr.horizon())?;
        for (t, (x, a)) in tr.steps().enumerate() {
            writeln!(w, "{t} {x} {a}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::TrajectoryParse {
        line,
        msg: msg.into(),
    }
}

fn parse_num(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} '{tok}'")))
}

/// Parses the format produced by [`write_trajectories`], validating record
/// numbering, consecutive time stamps and index ranges.
pub fn read_trajectories<R: BufRead>(
    r: R,
    n_states: usize,
    n_actions: usize,
) -> Result<TrajectorySet> {
    let mut set = TrajectorySet::default();
    // (declared horizon, steps so far)
    let mut current: Option<(usize, Vec<(usize, usize)>)> = None;
    let finish =
        |cur: Option<(usize, Vec<(usize, usize)>)>, line: usize, set: &mut TrajectorySet| {
            if let Some((horizon, steps)) = cur {
                if steps.len() != horizon + 1 {
                    return Err(parse_err(
                        line,
                        format!(
                            "trajectory {} declares T={horizon} but has {} rows",
                            set.len(),
                            steps.len()
                        ),
                    ));
                }
                set.trajectories.push(Trajectory::new(steps));
            }
            Ok(())
        };
    let mut last_line = 0;
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut toks = comment.split_whitespace();
            if toks.next() == Some("seed") {
                set.seed = Some(
                    toks.next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(lineno, "invalid seed comment"))?,
                );
            }
            continue;
        }
        let mut toks = line.split_whitespace();
        if line.starts_with("traj") {
            toks.next();
            finish(current.take(), lineno, &mut set)?;
            let i = parse_num(toks.next(), lineno, "trajectory index")?;
            if i != set.len() {
                return Err(parse_err(
                    lineno,
                    format!("expected trajectory {}, found {i}", set.len()),
                ));
            }
            let horizon = parse_num(toks.next(), lineno, "horizon")?;
            current = Some((horizon, Vec::with_capacity(horizon + 1)));
        } else {
            let (_, steps) = current
                .as_mut()
                .ok_or_else(|| parse_err(lineno, "step row before any 'traj' header"))?;
            let t = parse_num(toks.next(), lineno, "time")?;
            let x = parse_num(toks.next(), lineno, "state")?;
            let a = parse_num(toks.next(), lineno, "action")?;
            if t != steps.len() {
                return Err(parse_err(
                    lineno,
                    format!("expected t={}, found t={t}", steps.len()),
                ));
            }
            if x >= n_states {
                return Err(parse_err(
                    lineno,
                    format!("state {x} out of range (size {n_states})"),
                ));
            }
            if a >= n_actions {
                return Err(parse_err(
                    lineno,
                    format!("action {a} out of range (size {n_actions})"),
                ));
            }
            steps.push((x, a));
        }
        if toks.next().is_some() {
            return Err(parse_err(lineno, "trailing tokens"));
        }
    }
    finish(current.take(), last_line, &mut set)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    #[test]
    fn degenerate_chain_is_constant() {
        let t = Array3::from_elem((1, 1, 1), 1.0);
        let m = MfgModel::validated(t, 0.9, array![1.0]).unwrap();
        for seed in [0, 1, 99] {
            let d = simulate_trajectories(&m, &Policy::uniform(1, 1), 3, 5, seed).unwrap();
            for tr in &d.trajectories {
                assert!(tr.steps().all(|s| s == (0, 0)));
                assert_eq!(tr.len(), 6);
            }
        }
    }

    #[test]
    fn zero_trajectories_rejected() {
        let m = traffic::model();
        assert!(simulate_trajectories(&m, &traffic::expert_policy(), 0, 5, 1).is_err());
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let m = traffic::model();
        let pi = traffic::expert_policy();
        let a = simulate_trajectories_with(&m, &pi, 50, 30, 7, Execution::Sequential).unwrap();
        let b = simulate_trajectories_with(&m, &pi, 50, 30, 7, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = simulate_trajectories(&m, &pi, 20, 30, 7).unwrap();
        assert_eq!(&a.trajectories[..20], &c.trajectories[..]);
        let other = simulate_trajectories(&m, &pi, 50, 30, 8).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn mean_field_counts() {
        let d = TrajectorySet {
            trajectories: vec![Trajectory::new(vec![(0, 0), (0, 1), (1, 0), (1, 1)])],
            seed: None,
        };
        assert_eq!(
            empirical_mean_field(&d, 2).unwrap().to_vec(),
            vec![0.5, 0.5]
        );
        let d = TrajectorySet {
            trajectories: vec![
                Trajectory::new(vec![(0, 0); 3]),
                Trajectory::new(vec![(0, 1); 7]),
            ],
            seed: None,
        };
        assert_eq!(
            empirical_mean_field(&d, 2).unwrap().to_vec(),
            vec![1.0, 0.0]
        );
        assert!(empirical_mean_field(&TrajectorySet::default(), 2).is_err());
    }

    #[test]
    fn empirical_mean_field_is_distribution() {
        let m = traffic::model();
        let d = simulate_trajectories(&m, &traffic::expert_policy(), 37, 13, 3).unwrap();
        let mu = empirical_mean_field(&d, 2).unwrap();
        assert_abs_diff_eq!(mu.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_step_expectation() {
        let fm = traffic::feature_map();
        let d = TrajectorySet {
            trajectories: vec![Trajectory::new(vec![(1, 0)])],
            seed: None,
        };
        let e = empirical_feature_expectation(&d, &fm, 0.8).unwrap();
        assert_eq!(e, fm.joint_feature(1, 0).unwrap());
    }

    #[test]
    fn myopic_discount_uses_initial_pairs() {
        let fm = traffic::feature_map();
        let d = TrajectorySet {
            trajectories: vec![
                Trajectory::new(vec![(0, 0), (1, 1)]),
                Trajectory::new(vec![(1, 1), (0, 0)]),
            ],
            seed: None,
        };
        let e = empirical_feature_expectation(&d, &fm, 0.0).unwrap();
        let want = (fm.joint_feature(0, 0).unwrap() + fm.joint_feature(1, 1).unwrap()) / 2.0;
        for k in 0..e.len() {
            assert_abs_diff_eq!(e[k], want[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn stats_modes_agree_and_bias_bound() {
        let m = traffic::model();
        let fm = traffic::feature_map();
        let d = simulate_trajectories(&m, &traffic::expert_policy(), 200, 10, 5).unwrap();
        let s = empirical_feature_stats_with(&d, &fm, 0.8, Execution::Sequential).unwrap();
        let p = empirical_feature_stats_with(&d, &fm, 0.8, Execution::Parallel).unwrap();
        assert_eq!(s, p);
        assert_abs_diff_eq!(
            s.truncation_bias_bound,
            0.8f64.powi(11) * fm.feature_bound() / 0.2,
            epsilon = 1e-15
        );
        // Each truncated sum differs from the infinite sum by at most the bound;
        // the state block of one trajectory has total weight (1 - beta^(T+1)) / (1 - beta).
        let occ = empirical_occupation(&d, 2, 2, 0.8).unwrap();
        assert_abs_diff_eq!(occ.sum(), (1.0 - 0.8f64.powi(11)) / 0.2, epsilon = 1e-12);
        assert!(5.0 - occ.sum() <= s.truncation_bias_bound);
    }

    #[test]
    fn file_roundtrip_and_determinism() {
        let m = traffic::model();
        let d = simulate_trajectories(&m, &traffic::expert_policy(), 4, 3, 42).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&d, &mut buf).unwrap();
        let back = read_trajectories(buf.as_slice(), 2, 2).unwrap();
        assert_eq!(back, d);
        let mut buf2 = Vec::new();
        write_trajectories(
            &simulate_trajectories(&m, &traffic::expert_policy(), 4, 3, 42).unwrap(),
            &mut buf2,
        )
        .unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn minimal_file() {
        let m = traffic::model();
        let d = simulate_trajectories(&m, &traffic::expert_policy(), 1, 0, 42).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 2);
        assert_eq!(body[0], "traj 0 0");
    }

    #[test]
    fn loader_errors() {
        let bad_t = "traj 0 1\n0 0 0\n2 0 0\n";
        assert!(matches!(
            read_trajectories(bad_t.as_bytes(), 2, 2),
            Err(Error::TrajectoryParse { line: 3, .. })
        ));
        let bad_x = "traj 0 0\n0 5 0\n";
        assert!(read_trajectories(bad_x.as_bytes(), 2, 2).is_err());
        let short = "traj 0 2\n0 0 0\n1 0 0\n";
        assert!(read_trajectories(short.as_bytes(), 2, 2).is_err());
        let orphan = "0 0 0\n";
        assert!(read_trajectories(orphan.as_bytes(), 2, 2).is_err());
        let skipped = "traj 1 0\n0 0 0\n";
        assert!(read_trajectories(skipped.as_bytes(), 2, 2).is_err());
    }
}
