use mfirl_core::demos::{empirical_mean_field, empirical_occupation, simulate_trajectories};
use mfirl_core::irl::{
    gradient, lipschitz_constant, mfe_check, train, ExpertBlock, ExpertStatistics, TrainConfig,
};
use mfirl_core::model::{policy_transition_matrix, stationarity_residual};
use mfirl_core::occupation::{discounted_feature_expectation, occupation_measure};
use mfirl_core::soft::{soft_bellman_operator, solve_soft, SolverOptions};
use mfirl_core::{traffic, MfgModel, Policy, RewardParams};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalize_rows(mut t: Array3<f64>) -> Array3<f64> {
    for mut slab in t.outer_iter_mut() {
        for mut row in slab.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|p| p / s);
        }
    }
    t
}

fn simplex(v: Vec<f64>) -> Array1<f64> {
    let a = Array1::from(v);
    let s = a.sum();
    a / s
}

prop_compose! {
    fn arb_model()(nx in 1usize..5, na in 1usize..4)
        (raw in prop::collection::vec(0.01..1.0f64, nx * na * nx),
         mu in prop::collection::vec(0.01..1.0f64, nx),
         pol in prop::collection::vec(0.01..1.0f64, nx * na),
         beta in 0.05..0.97f64,
         nx in Just(nx), na in Just(na)) -> (MfgModel, Policy)
    {
        let t = normalize_rows(Array3::from_shape_vec((nx, na, nx), raw).unwrap());
        let model = MfgModel::new(t, beta, simplex(mu)).unwrap();
        let mut p = Array2::from_shape_vec((nx, na), pol).unwrap();
        for mut row in p.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        (model, Policy::new(p).unwrap())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_transition_rows_stochastic((m, pi) in arb_model()) {
        let a = policy_transition_matrix(&m, &pi).unwrap();
        for row in a.outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn stationarity_residual_relabeling((m, pi) in arb_model(), shift in 0usize..5) {
        let nx = m.n_states();
        let perm: Vec<usize> = (0..nx).map(|i| (i + shift) % nx).collect();
        // state i of the relabeled model is state perm[i] of the original
        let t = Array3::from_shape_fn(m.transition().dim(), |(x, a, y)| m.transition()[[perm[x], a, perm[y]]]);
        let mu = Array1::from_shape_fn(nx, |i| m.mean_field()[perm[i]]);
        let probs = Array2::from_shape_fn(pi.probs().dim(), |(x, a)| pi.prob(perm[x], a));
        let m2 = MfgModel::new(t, m.discount(), mu.clone()).unwrap();
        let pi2 = Policy::new(probs).unwrap();
        let r1 = stationarity_residual(&m, &pi, m.mean_field()).unwrap();
        let r2 = stationarity_residual(&m2, &pi2, &mu).unwrap();
        prop_assert!(r1 >= 0.0);
        prop_assert!((r1 - r2).abs() <= 1e-12);
    }

    #[test]
    fn occupation_mass_and_nonnegativity((m, pi) in arb_model()) {
        let occ = occupation_measure(&m, &pi, m.mean_field()).unwrap();
        prop_assert!((occ.total_mass() - 1.0 / (1.0 - m.discount())).abs() <= 1e-10);
        prop_assert!(occ.state_action_occ.iter().all(|&g| g >= 0.0));
        for x in 0..m.n_states() {
            for a in 0..m.n_actions() {
                prop_assert_eq!(occ.state_action_occ[[x, a]], occ.state_occ[x] * pi.prob(x, a));
            }
        }
    }

    #[test]
    fn feature_expectation_linear(w in 0.0..1.0f64, s1 in 0u64..1000, s2 in 0u64..1000) {
        let fm = traffic::feature_map();
        let mut r1 = ChaCha8Rng::seed_from_u64(s1);
        let mut r2 = ChaCha8Rng::seed_from_u64(s2);
        let o1 = Array2::from_shape_fn((2, 2), |_| r1.random::<f64>());
        let o2 = Array2::from_shape_fn((2, 2), |_| r2.random::<f64>());
        let mix = &o1 * w + &o2 * (1.0 - w);
        let lhs = discounted_feature_expectation(&mix, &fm).unwrap();
        let rhs = discounted_feature_expectation(&o1, &fm).unwrap() * w
            + discounted_feature_expectation(&o2, &fm).unwrap() * (1.0 - w);
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-13);
        }
    }

    #[test]
    fn reward_shift_gauge((m, _pi) in arb_model(), c in -5.0..5.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((m.n_states(), m.n_actions()), |_| rng.random_range(-2.0..2.0));
        let opts = SolverOptions { tol: 1e-12, max_iter: 100_000 };
        let base = solve_soft(&m, &r, opts).unwrap();
        let shifted = solve_soft(&m, &(&r + c), opts).unwrap();
        let dv = c / (1.0 - m.discount());
        for x in 0..m.n_states() {
            prop_assert!((shifted.v[x] - base.v[x] - dv).abs() <= 1e-10);
        }
        prop_assert!(shifted.policy.max_abs_difference(&base.policy).unwrap() <= 1e-10);
    }

    #[test]
    fn residuals_decay_geometrically((m, _pi) in arb_model(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((m.n_states(), m.n_actions()), |_| rng.random_range(-3.0..3.0));
        let beta = m.discount();
        let mut v = Array1::zeros(m.n_states());
        let mut residuals = Vec::new();
        for _ in 0..200 {
            let next = soft_bellman_operator(&m, &r, &v).unwrap();
            let d = (&next - &v).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            residuals.push(d);
            v = next;
        }
        let r0 = residuals[0];
        for (t, &d) in residuals.iter().enumerate() {
            // rounding floor for iterates of size |V| ~ r0 / (1 - beta)
            let floor = 64.0 * f64::EPSILON * (1.0 + r0 / (1.0 - beta));
            prop_assert!(d <= beta.powi(t as i32) * r0 * (1.0 + 1e-9) + floor,
                "t={} d={} bound={}", t, d, beta.powi(t as i32) * r0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one((m, _pi) in arb_model(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((m.n_states(), m.n_actions()), |_| rng.random_range(-10.0..10.0));
        let sol = solve_soft(&m, &r, SolverOptions::default()).unwrap();
        for row in sol.policy.probs().outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn empirical_smoothness_below_lipschitz() {
    let m = traffic::model();
    let fm = traffic::feature_map();
    let stats =
        ExpertStatistics::from_policy(&m, &traffic::expert_policy(), &fm, ExpertBlock::Occupation)
            .unwrap();
    let l = lipschitz_constant(0.8, 2, fm.feature_bound()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t1 = Array1::from_shape_fn(6, |_| rng.random_range(-3.0..3.0));
        let scale = 10f64.powf(rng.random_range(-4.0..0.5));
        let t2 = &t1 + &Array1::from_shape_fn(6, |_| scale * rng.random_range(-1.0..1.0));
        let g1 = gradient(
            &m,
            &fm,
            &RewardParams::from_concat(&t1, 2).unwrap(),
            &stats.expectation,
            SolverOptions::default(),
        )
        .unwrap();
        let g2 = gradient(
            &m,
            &fm,
            &RewardParams::from_concat(&t2, 2).unwrap(),
            &stats.expectation,
            SolverOptions::default(),
        )
        .unwrap();
        let dg = &g1.grad - &g2.grad;
        let dt = &t1 - &t2;
        worst = worst.max(dg.dot(&dg).sqrt() / dt.dot(&dt).sqrt());
    }
    assert!(worst <= l, "observed ratio {worst} exceeds L = {l}");
}

#[test]
fn gradient_identity_and_summability() {
    let m = traffic::model();
    let fm = traffic::feature_map();
    let stats =
        ExpertStatistics::from_policy(&m, &traffic::expert_policy(), &fm, ExpertBlock::Occupation)
            .unwrap();
    let step = traffic::STEP_SIZE;
    let mut cfg = TrainConfig::new(step, 1500);
    cfg.log_every = 1;
    let res = train(&m, &fm, &stats.expectation, &stats.occupation, &cfg).unwrap();

    let diag = mfe_check(
        &m,
        &res.policy_final,
        m.mean_field(),
        &res.final_expectation_gap,
    )
    .unwrap();
    assert!((diag.expectation_gap_norm - res.final_grad_norm).abs() <= 1e-12);
    assert!((diag.expectation_gap_norm - res.trace.last().unwrap().grad_norm).abs() <= 1e-12);

    // min_k |g_k|^2 <= (V_best - V_0) / (a (T + 1)) with a = step (1 - L step / 2)
    let a = step * (1.0 - res.lipschitz * step / 2.0);
    let best = res
        .trace
        .iter()
        .map(|r| r.log_likelihood)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_sq = res.trace[..res.trace.len() - 1]
        .iter()
        .map(|r| r.grad_norm * r.grad_norm)
        .fold(f64::INFINITY, f64::min);
    let t = (res.trace.len() - 1) as f64;
    assert!(min_sq <= (best - res.trace[0].log_likelihood) / (a * t));
}

#[test]
fn golden_policy_stationarity_residual() {
    // mu_E is not invariant under the expert dynamics; the diagnostic shows it.
    let m = traffic::model();
    let r = stationarity_residual(&m, &traffic::expert_policy(), m.mean_field()).unwrap();
    assert!((r - 0.216).abs() < 1e-12);
}

/// Stationary distribution by power iteration on the policy chain.
fn stationary_oracle(m: &MfgModel, pi: &Policy) -> Array1<f64> {
    let a = policy_transition_matrix(m, pi).unwrap();
    let mut mu = Array1::from_elem(m.n_states(), 1.0 / m.n_states() as f64);
    for _ in 0..10_000 {
        mu = mu.dot(&a);
    }
    mu
}

#[test]
fn simulated_state_frequencies_approach_stationarity() {
    let m = traffic::model();
    let pi = traffic::expert_policy();
    let stat = stationary_oracle(&m, &pi);
    assert!((stat[0] - 0.774).abs() < 1e-3);
    let demos = simulate_trajectories(&m, &pi, 1000, 500, 42).unwrap();
    let mu = empirical_mean_field(&demos, 2).unwrap();
    assert!((mu[0] - stat[0]).abs() < 0.01, "{mu} vs {stat}");
}

#[test]
fn monte_carlo_occupation_matches_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..5 {
        let nx = rng.random_range(2..=4);
        let na = rng.random_range(1..=3);
        let t = normalize_rows(Array3::from_shape_fn((nx, na, nx), |_| {
            rng.random::<f64>() + 0.05
        }));
        let mu = simplex((0..nx).map(|_| rng.random::<f64>() + 0.05).collect());
        let m = MfgModel::new(t, 0.8, mu).unwrap();
        let mut p = Array2::from_shape_fn((nx, na), |_| rng.random::<f64>() + 0.05);
        for mut row in p.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let pi = Policy::new(p).unwrap();
        let exact = occupation_measure(&m, &pi, m.mean_field()).unwrap();
        let d = 20_000;
        let demos = simulate_trajectories(&m, &pi, d, 200, 1000 + case).unwrap();
        let mean = empirical_occupation(&demos, nx, na, 0.8).unwrap();
        // per-trajectory second moments for the standard error
        let mut sq = Array2::<f64>::zeros((nx, na));
        for tr in &demos.trajectories {
            let mut acc = Array2::<f64>::zeros((nx, na));
            let mut w = 1.0;
            for (x, a) in tr.steps() {
                acc[[x, a]] += w;
                w *= 0.8;
            }
            sq += &(&acc * &acc);
        }
        for x in 0..nx {
            for a in 0..na {
                let var =
                    (sq[[x, a]] / d as f64 - mean[[x, a]].powi(2)) * d as f64 / (d as f64 - 1.0);
                let se = (var / d as f64).sqrt();
                let z = (mean[[x, a]] - exact.state_action_occ[[x, a]]).abs() / se;
                assert!(z <= 3.0, "case {case} ({x},{a}): z = {z}");
            }
        }
    }
}
