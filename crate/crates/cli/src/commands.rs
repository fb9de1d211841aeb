use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfirl_core::demos::{simulate_trajectories, write_trajectories, RNG_SCHEME};
use mfirl_core::irl::{self, mfe_check, solve_for_theta};
use mfirl_core::occupation::{bellman_flow_residual, occupation_measure};
use mfirl_core::{ExpertBlock, ExpertStatistics, Policy, RewardParams, SoftSolution, TraceRecord};
use ndarray::{Array1, Array2};
use serde_json::{json, Value};

use crate::config::{self, Experiment, ExpertSource, LoadError, LoadOptions, ThetaDoc};
use crate::{Cli, Command};

/// A failure with its exit status: 1 for bad input, 2 for failures during
/// computation or while writing results.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<mfirl_core::Error> for CliError {
    fn from(e: mfirl_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let exp = config::load(
        &cli.config,
        LoadOptions {
            renormalize: cli.renormalize,
            expert_block: cli.expert_block,
        },
    )?;
    if exp.renormalized > 0 {
        eprintln!("note: renormalized {} transition row(s)", exp.renormalized);
    }
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| exp.file.output.dir.clone());
    match &cli.command {
        Command::Validate => validate(&exp),
        Command::Solve { theta } => solve(&exp, theta.as_deref(), &out_dir),
        Command::Occupation { theta } => occupation(&exp, theta.as_deref(), &out_dir),
        Command::Train {
            log_every,
            max_iters,
            step_size,
            theta,
        } => {
            let mut exp = exp;
            if let Some(n) = log_every {
                if *n == 0 {
                    return Err(CliError::Input("--log-every must be at least 1".into()));
                }
                exp.train.log_every = *n;
            }
            if let Some(n) = max_iters {
                exp.train.max_iters = *n;
            }
            if let Some(s) = step_size {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(CliError::Input(format!(
                        "--step-size must be positive, got {s}"
                    )));
                }
                exp.train.step_size = *s;
            }
            if let Some(p) = theta {
                exp.train.theta0 = Some(load_theta(p, &exp)?);
            }
            train(&exp, &out_dir)
        }
        Command::GenDemos {
            num_trajectories,
            horizon,
            seed,
            theta,
        } => gen_demos(
            &exp,
            *num_trajectories,
            *horizon,
            *seed,
            theta.as_deref(),
            &out_dir,
        ),
        Command::Eval { theta, reference } => eval(&exp, theta, reference.as_deref(), &out_dir),
    }
}

fn validate(exp: &Experiment) -> Result<()> {
    let m = &exp.model;
    println!(
        "ok: {} states, {} actions, discount {}, {} anchors (feature dim {})",
        m.n_states(),
        m.n_actions(),
        m.discount(),
        exp.features.n_anchors(),
        exp.features.dim()
    );
    match &exp.expert {
        ExpertSource::Policy(_) => println!("expert: policy, {} block", exp.expert_block),
        ExpertSource::Trajectories { path, demos } => println!(
            "expert: {} trajectories from {} (shortest horizon {})",
            demos.len(),
            path.display(),
            demos.min_horizon()
        ),
    }
    let l = irl::lipschitz_constant(m.discount(), m.n_actions(), exp.features.feature_bound())?;
    println!(
        "step size {} (1/L = {:.6}), {} iterations",
        exp.train.step_size,
        1.0 / l,
        exp.train.max_iters
    );
    Ok(())
}

/// Reads `{"lambda": [...], "alpha": [...]}`, or any JSON document holding
/// such an object under `"theta"`.
fn load_theta(path: &Path, exp: &Experiment) -> Result<RewardParams> {
    let bad = |m: String| CliError::Input(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if let Some(inner) = value.get_mut("theta") {
        value = inner.take();
    }
    let doc: ThetaDoc = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    doc.to_params(exp.model.n_states(), exp.features.n_anchors())
        .map_err(bad)
}

fn theta_or_zeros(path: Option<&Path>, exp: &Experiment) -> Result<RewardParams> {
    match path {
        Some(p) => load_theta(p, exp),
        None => Ok(RewardParams::zeros(
            exp.model.n_states(),
            exp.features.n_anchors(),
        )),
    }
}

fn matrix(a: &Array2<f64>) -> Value {
    json!(a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn vector(a: &Array1<f64>) -> Value {
    json!(a.to_vec())
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(path)
}

fn solution_json(sol: &SoftSolution) -> Value {
    json!({
        "v": vector(&sol.v),
        "q": matrix(&sol.q),
        "policy": matrix(sol.policy.probs()),
        "iterations": sol.iterations,
        "residual": sol.residual,
        "converged": sol.converged,
    })
}

fn print_policy(exp: &Experiment, title: &str, p: &Policy) {
    let m = &exp.model;
    println!("{title}");
    for x in 0..m.n_states() {
        let row: Vec<String> = (0..m.n_actions())
            .map(|a| format!("{}={:.6}", action_name(exp, a), p.prob(x, a)))
            .collect();
        println!("  {:>8}: {}", state_name(exp, x), row.join("  "));
    }
}

fn state_name(exp: &Experiment, x: usize) -> String {
    exp.model
        .state_labels()
        .map(|l| l[x].clone())
        .unwrap_or_else(|| format!("x{x}"))
}

fn action_name(exp: &Experiment, a: usize) -> String {
    exp.model
        .action_labels()
        .map(|l| l[a].clone())
        .unwrap_or_else(|| format!("a{a}"))
}

fn solve(exp: &Experiment, theta: Option<&Path>, out: &Path) -> Result<()> {
    let theta = theta_or_zeros(theta, exp)?;
    let sol = solve_for_theta(&exp.model, &exp.features, &theta, exp.solver)?;
    if !sol.converged {
        eprintln!(
            "warning: value iteration stopped after {} sweeps with residual {:.3e}",
            sol.iterations, sol.residual
        );
    }
    let mut doc = solution_json(&sol);
    doc["theta"] = json!(ThetaDoc::from_params(&theta));
    let path = write_json(out, "solution.json", &doc)?;
    print_policy(exp, "soft-optimal policy:", &sol.policy);
    println!("wrote {}", path.display());
    Ok(())
}

fn occupation(exp: &Experiment, theta: Option<&Path>, out: &Path) -> Result<()> {
    let (source, policy) = match (theta, exp.expert_policy()) {
        (Some(p), _) => {
            let theta = load_theta(p, exp)?;
            let sol = solve_for_theta(&exp.model, &exp.features, &theta, exp.solver)?;
            ("theta", sol.policy)
        }
        (None, Some(p)) => ("expert", p.clone()),
        (None, None) => {
            return Err(CliError::Input(
                "occupation needs an expert policy in the config or --theta".into(),
            ))
        }
    };
    let mu = exp.model.mean_field();
    let occ = occupation_measure(&exp.model, &policy, mu)?;
    let flow = bellman_flow_residual(&exp.model, &policy, mu, &occ.state_occ)?;
    let normalized = occ.normalized(exp.model.discount());
    let doc = json!({
        "policy_source": source,
        "policy": matrix(policy.probs()),
        "state_occupation": vector(&occ.state_occ),
        "state_action_occupation": matrix(&occ.state_action_occ),
        "normalized_state_occupation": vector(&normalized.state_occ),
        "total_mass": occ.total_mass(),
        "flow_residual": flow,
    });
    let path = write_json(out, "occupation.json", &doc)?;
    println!("{source} occupation (total mass {:.6}):", occ.total_mass());
    for x in 0..exp.model.n_states() {
        println!("  {:>8}: {:.6}", state_name(exp, x), occ.state_occ[x]);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn expert_statistics(exp: &Experiment) -> Result<ExpertStatistics> {
    match &exp.expert {
        ExpertSource::Policy(p) => Ok(ExpertStatistics::from_policy(
            &exp.model,
            p,
            &exp.features,
            exp.expert_block,
        )?),
        ExpertSource::Trajectories { demos, .. } => {
            let beta = exp.model.discount();
            let mut stats = ExpertStatistics::from_trajectories(demos, &exp.features, beta)?;
            if exp.expert_block == ExpertBlock::MeanField {
                for (e, &m) in stats
                    .expectation
                    .iter_mut()
                    .zip(exp.model.mean_field().iter())
                {
                    *e = m / (1.0 - beta);
                }
            }
            Ok(stats)
        }
    }
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn train(exp: &Experiment, out: &Path) -> Result<()> {
    let stats = expert_statistics(exp)?;
    let mut cfg = exp.train.clone();
    cfg.reference = exp.expert_policy().cloned();

    fs::create_dir_all(out)?;
    let trace_path = out.join(&exp.file.output.trace);
    let mut trace = BufWriter::new(File::create(&trace_path)?);
    writeln!(trace, "iter,grad_norm,log_likelihood,policy_err")?;
    let mut write_err: Option<std::io::Error> = None;

    let started = Instant::now();
    let result = irl::train_observed(
        &exp.model,
        &exp.features,
        &stats.expectation,
        &stats.occupation,
        &cfg,
        |r: &TraceRecord| {
            if write_err.is_none() {
                if let Err(e) = writeln!(
                    trace,
                    "{},{},{},{}",
                    r.iter,
                    r.grad_norm,
                    r.log_likelihood,
                    csv_field(r.policy_err)
                ) {
                    write_err = Some(e);
                }
            }
        },
    );
    let elapsed = started.elapsed().as_secs_f64();
    // Whatever was recorded before a failure stays on disk.
    trace.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let res = result?;

    if let Some(w) = &res.step_size_warning {
        eprintln!("warning: {w}");
    }
    let diag = mfe_check(
        &exp.model,
        &res.policy_final,
        exp.model.mean_field(),
        &res.final_expectation_gap,
    )?;
    let policy_err = match exp.expert_policy() {
        Some(p) => Some(res.policy_final.frobenius_distance(p)?),
        None => None,
    };
    let doc = json!({
        "theta": ThetaDoc::from_params(&res.theta_final),
        "policy": matrix(res.policy_final.probs()),
        "iterations_run": res.iterations_run,
        "stopped_early": res.stopped_early,
        "final_grad_norm": res.final_grad_norm,
        "final_log_likelihood": res.final_log_likelihood,
        "final_policy_err": policy_err,
        "expert_expectation": vector(&res.expert_expectation),
        "final_expectation_gap": vector(&res.final_expectation_gap),
        "diagnostics": {
            "stationarity_residual": diag.stationarity_residual,
            "expectation_gap_norm": diag.expectation_gap_norm,
        },
        "settings": {
            "step_size": cfg.step_size,
            "max_iters": cfg.max_iters,
            "grad_tol": cfg.grad_tol,
            "log_every": cfg.log_every,
            "expert_block": exp.expert_block.to_string(),
            "solver_tol": cfg.solver.tol,
            "solver_max_iter": cfg.solver.max_iter,
        },
        "metadata": {
            "version": env!("CARGO_PKG_VERSION"),
            "lipschitz": res.lipschitz,
            "step_size_warning": res.step_size_warning,
            "wall_time_secs": elapsed,
            "trace": trace_path.display().to_string(),
        },
    });
    let path = write_json(out, &exp.file.output.result, &doc)?;

    println!(
        "{} iterations: |grad| = {:.6e}, log-likelihood = {:.6}",
        res.iterations_run, res.final_grad_norm, res.final_log_likelihood
    );
    if let Some(e) = policy_err {
        println!("policy error vs expert (Frobenius): {e:.6e}");
    }
    print_policy(exp, "learned policy:", &res.policy_final);
    println!("wrote {} and {}", path.display(), trace_path.display());
    Ok(())
}

fn gen_demos(
    exp: &Experiment,
    d: usize,
    horizon: usize,
    seed: u64,
    theta: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if d == 0 {
        return Err(CliError::Input(
            "--num-trajectories must be at least 1".into(),
        ));
    }
    let policy = match (theta, exp.expert_policy()) {
        (Some(p), _) => {
            let theta = load_theta(p, exp)?;
            solve_for_theta(&exp.model, &exp.features, &theta, exp.solver)?.policy
        }
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(CliError::Input(
                "gen-demos needs an expert policy in the config or --theta".into(),
            ))
        }
    };
    let demos = simulate_trajectories(&exp.model, &policy, d, horizon, seed)?;
    fs::create_dir_all(out)?;
    let path = out.join(&exp.file.output.demos);
    write_trajectories(&demos, BufWriter::new(File::create(&path)?))?;
    println!(
        "wrote {d} trajectories of horizon {horizon} to {} (seed {seed}, {RNG_SCHEME})",
        path.display()
    );
    Ok(())
}

fn load_reference(spec: &str, exp: &Experiment) -> Result<(String, Policy)> {
    let (nx, na) = (exp.model.n_states(), exp.model.n_actions());
    match spec {
        "expert" => exp
            .expert_policy()
            .map(|p| ("expert".to_string(), p.clone()))
            .ok_or_else(|| {
                CliError::Input("--reference expert: the config has no expert policy".into())
            }),
        "uniform" => Ok(("uniform".into(), Policy::uniform(nx, na))),
        path => {
            let bad = |m: String| CliError::Input(format!("{path}: {m}"));
            let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let rows: Vec<Vec<f64>> = value
                .get("policy")
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| bad(e.to_string()))?
                .ok_or_else(|| bad("no 'policy' matrix".into()))?;
            if rows.len() != nx || rows.iter().any(|r| r.len() != na) {
                return Err(bad(format!("policy must be a {nx}x{na} matrix")));
            }
            let probs = Array2::from_shape_vec((nx, na), rows.into_iter().flatten().collect())
                .expect("checked shape");
            let p = Policy::new(probs).map_err(|e| bad(e.to_string()))?;
            Ok((path.to_string(), p))
        }
    }
}

fn eval(exp: &Experiment, theta: &Path, reference: Option<&str>, out: &Path) -> Result<()> {
    let theta = load_theta(theta, exp)?;
    let reference = reference.map(|r| load_reference(r, exp)).transpose()?;
    let stats = expert_statistics(exp)?;
    let g = irl::gradient(
        &exp.model,
        &exp.features,
        &theta,
        &stats.expectation,
        exp.solver,
    )?;
    let policy = g.policy();
    let diag = mfe_check(&exp.model, policy, exp.model.mean_field(), &g.grad)?;
    let ll = irl::log_likelihood_of(&g.solution, &stats.occupation)?;

    println!(
        "stationarity residual |mu - mu A_pi|_1: {:.6e}",
        diag.stationarity_residual
    );
    println!(
        "expectation gap |<f>_E - <f>_pi|_2:   {:.6e}",
        diag.expectation_gap_norm
    );
    println!("expert log-likelihood:                 {ll:.6}");

    let mut doc = json!({
        "theta": ThetaDoc::from_params(&theta),
        "policy": matrix(policy.probs()),
        "log_likelihood": ll,
        "diagnostics": {
            "stationarity_residual": diag.stationarity_residual,
            "expectation_gap_norm": diag.expectation_gap_norm,
        },
    });

    if let Some((name, r)) = &reference {
        let max_diff = policy.max_abs_difference(r)?;
        let frob = policy.frobenius_distance(r)?;
        let mut rows = Vec::new();
        println!();
        println!(
            "{:>8} {:>8} {:>10} {:>10} {:>10}",
            "state", "action", "learned", "reference", "|diff|"
        );
        for x in 0..exp.model.n_states() {
            for a in 0..exp.model.n_actions() {
                let (l, rv) = (policy.prob(x, a), r.prob(x, a));
                println!(
                    "{:>8} {:>8} {:>10.4} {:>10.4} {:>10.4}",
                    state_name(exp, x),
                    action_name(exp, a),
                    l,
                    rv,
                    (l - rv).abs()
                );
                rows.push(json!({
                    "state": state_name(exp, x),
                    "action": action_name(exp, a),
                    "learned": l,
                    "reference": rv,
                    "abs_diff": (l - rv).abs(),
                }));
            }
        }
        println!("max |diff| = {max_diff:.6e}, Frobenius = {frob:.6e} (reference: {name})");
        doc["comparison"] = json!({
            "reference": name,
            "rows": rows,
            "max_abs_difference": max_diff,
            "frobenius_distance": frob,
        });
    }
    let path = write_json(out, "eval.json", &doc)?;
    println!("wrote {}", path.display());
    Ok(())
}
