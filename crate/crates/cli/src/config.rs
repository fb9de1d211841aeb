//! Experiment configuration (TOML).
//!
//! ```toml
//! [model]
//! n_states = 2
//! n_actions = 2
//! discount = 0.8
//! mean_field = [0.6, 0.4]
//! transition = [
//!   { x = 0, a = 0, row = [0.9, 0.1] },
//!   ...
//! ]
//!
//! [features]
//! kernel = "gaussian"
//! bandwidth = 0.5
//! anchors = "all_state_action_pairs"   # or a list of vectors
//!
//! [expert]
//! policy = [[0.8, 0.2], [0.3, 0.7]]     # or: trajectories = "demos.txt"
//! ```
//!
//! Relative input paths are resolved against the directory of the config file.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mfirl_core::demos::{empirical_mean_field, read_trajectories, TrajectorySet};
use mfirl_core::{
    validate_model, ExpertBlock, FeatureMap, KernelSpec, MfgModel, Policy, RewardParams,
    SolverOptions, TrainConfig,
};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub model: ModelBlock,
    pub features: FeatureBlock,
    pub expert: ExpertBlockCfg,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub mean_field: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_labels: Option<Vec<String>>,
    pub transition: Vec<TransitionEntry>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub x: usize,
    pub a: usize,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum AnchorSpec {
    Directive(String),
    Explicit(Vec<Vec<f64>>),
}

pub const ALL_PAIRS: &str = "all_state_action_pairs";

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureBlock {
    #[serde(default = "default_kernel")]
    pub kernel: String,
    pub bandwidth: f64,
    pub anchors: AnchorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_encoding: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_encoding: Option<Vec<Vec<f64>>>,
}

fn default_kernel() -> String {
    "gaussian".into()
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertBlockCfg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<PathBuf>,
    /// `occupation` (default) or `meanfield`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_block: Option<String>,
    /// Replace the model's mean field by the pooled empirical estimate from
    /// the trajectories.
    #[serde(default)]
    pub estimate_mean_field: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    /// Defaults to `1 / L` at the exact feature bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<ThetaDoc>,
}

fn default_max_iters() -> usize {
    10_000
}

fn default_log_every() -> usize {
    100
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            step_size: None,
            max_iters: default_max_iters(),
            grad_tol: 0.0,
            log_every: default_log_every(),
            theta0: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    mfirl_core::soft::DEFAULT_TOL
}

fn default_max_iter() -> usize {
    mfirl_core::soft::DEFAULT_MAX_ITER
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_result")]
    pub result: String,
    #[serde(default = "default_demos")]
    pub demos: String,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_trace() -> String {
    "trace.csv".into()
}
fn default_result() -> String {
    "result.json".into()
}
fn default_demos() -> String {
    "demos.txt".into()
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            trace: default_trace(),
            result: default_result(),
            demos: default_demos(),
        }
    }
}

/// Reward parameters as stored in files.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ThetaDoc {
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ThetaDoc {
    pub fn from_params(p: &RewardParams) -> Self {
        Self {
            lambda: p.lambda.to_vec(),
            alpha: p.alpha.to_vec(),
        }
    }

    pub fn to_params(&self, n_states: usize, n_anchors: usize) -> Result<RewardParams, String> {
        if self.lambda.len() != n_states {
            return Err(format!(
                "theta.lambda has {} entries, expected {n_states}",
                self.lambda.len()
            ));
        }
        if self.alpha.len() != n_anchors {
            return Err(format!(
                "theta.alpha has {} entries, expected {n_anchors}",
                self.alpha.len()
            ));
        }
        RewardParams::new(
            Array1::from(self.lambda.clone()),
            Array1::from(self.alpha.clone()),
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub enum ExpertSource {
    Policy(Policy),
    Trajectories { path: PathBuf, demos: TrajectorySet },
}

/// A fully loaded and validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub file: ExperimentFile,
    pub model: MfgModel,
    pub features: FeatureMap,
    pub expert: ExpertSource,
    pub expert_block: ExpertBlock,
    pub train: TrainConfig,
    pub solver: SolverOptions,
    pub renormalized: usize,
}

impl Experiment {
    pub fn expert_policy(&self) -> Option<&Policy> {
        match &self.expert {
            ExpertSource::Policy(p) => Some(p),
            ExpertSource::Trajectories { .. } => None,
        }
    }
}

/// Why a config could not be loaded. Every variant maps to exit status 1.
#[derive(Debug)]
pub enum LoadError {
    Io(String),
    Parse(String),
    Invalid(Vec<String>),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Io(m) => write!(f, "{m}"),
            LoadError::Parse(m) => write!(f, "parse error: {m}"),
            LoadError::Invalid(issues) => {
                writeln!(f, "configuration has {} problem(s):", issues.len())?;
                for (i, s) in issues.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "  - {s}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub renormalize: bool,
    pub expert_block: Option<ExpertBlock>,
}

pub fn load(path: &Path, opts: LoadOptions) -> Result<Experiment, LoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LoadError::Io(format!("cannot read {}: {e}", path.display())))?;
    let file: ExperimentFile =
        toml::from_str(&text).map_err(|e| LoadError::Parse(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    build(file, base, opts)
}

fn build(file: ExperimentFile, base: &Path, opts: LoadOptions) -> Result<Experiment, LoadError> {
    let mut issues = Vec::new();

    let (model, renormalized) = match build_model(&file.model, opts.renormalize, &mut issues) {
        Some(m) => m,
        None => return Err(LoadError::Invalid(issues)),
    };

    let expert = build_expert(&file.expert, &model, base, &mut issues);
    let model = match (&expert, file.expert.estimate_mean_field) {
        (Some(ExpertSource::Trajectories { demos, .. }), true) => {
            match empirical_mean_field(demos, model.n_states())
                .and_then(|mu| model.with_mean_field(mu))
            {
                Ok(m) => m,
                Err(e) => {
                    issues.push(format!("expert: cannot estimate mean field: {e}"));
                    model
                }
            }
        }
        (Some(ExpertSource::Policy(_)), true) => {
            issues.push("expert.estimate_mean_field requires trajectories".into());
            model
        }
        _ => model,
    };

    let features = build_features(&file.features, &model, &mut issues);

    let expert_block = match opts.expert_block {
        Some(b) => b,
        None => match file.expert.expert_block.as_deref() {
            None => ExpertBlock::default(),
            Some(s) => s.parse().unwrap_or_else(|e| {
                issues.push(format!("expert.expert_block: {e}"));
                ExpertBlock::default()
            }),
        },
    };

    let solver = SolverOptions {
        tol: file.solver.tol,
        max_iter: file.solver.max_iter,
    };
    if !(solver.tol > 0.0) {
        issues.push(format!("solver.tol must be positive, got {}", solver.tol));
    }
    if solver.max_iter == 0 {
        issues.push("solver.max_iter must be at least 1".into());
    }

    let train = features
        .as_ref()
        .and_then(|fm| build_train(&file.train, &model, fm, solver, &mut issues));

    if !issues.is_empty() {
        return Err(LoadError::Invalid(issues));
    }
    Ok(Experiment {
        file,
        model,
        features: features.expect("no issues"),
        expert: expert.expect("no issues"),
        expert_block,
        train: train.expect("no issues"),
        solver,
        renormalized,
    })
}

fn build_model(
    b: &ModelBlock,
    renormalize: bool,
    issues: &mut Vec<String>,
) -> Option<(MfgModel, usize)> {
    let (nx, na) = (b.n_states, b.n_actions);
    if nx == 0 || na == 0 {
        issues.push("model.n_states and model.n_actions must be positive".into());
        return None;
    }
    let start = issues.len();
    if b.mean_field.len() != nx {
        issues.push(format!(
            "model.mean_field has {} entries, expected {nx}",
            b.mean_field.len()
        ));
    }
    let mut t = Array3::zeros((nx, na, nx));
    let mut seen = vec![false; nx * na];
    for (i, e) in b.transition.iter().enumerate() {
        if e.x >= nx || e.a >= na {
            issues.push(format!(
                "model.transition[{i}]: (x={},a={}) out of range",
                e.x, e.a
            ));
            continue;
        }
        if e.row.len() != nx {
            issues.push(format!(
                "model.transition[{i}]: row (x={},a={}) has {} entries, expected {nx}",
                e.x,
                e.a,
                e.row.len()
            ));
            continue;
        }
        let k = e.x * na + e.a;
        if seen[k] {
            issues.push(format!(
                "model.transition: duplicate row (x={},a={})",
                e.x, e.a
            ));
            continue;
        }
        seen[k] = true;
        for (y, &p) in e.row.iter().enumerate() {
            t[[e.x, e.a, y]] = p;
        }
    }
    for x in 0..nx {
        for a in 0..na {
            if !seen[x * na + a] {
                issues.push(format!("model.transition: missing row (x={x},a={a})"));
            }
        }
    }
    if issues.len() > start {
        return None;
    }
    let model = MfgModel::new(t, b.discount, Array1::from(b.mean_field.clone()))
        .and_then(|m| m.with_labels(b.state_labels.clone(), b.action_labels.clone()));
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            issues.push(format!("model: {e}"));
            return None;
        }
    };
    let (model, renormalized) = if renormalize {
        model.renormalized()
    } else {
        (model, 0)
    };
    let report = validate_model(&model);
    if !report.is_valid() {
        for v in &report.violations {
            issues.push(format!("model: {v}"));
        }
        return None;
    }
    Some((model, renormalized))
}

fn build_features(
    b: &FeatureBlock,
    model: &MfgModel,
    issues: &mut Vec<String>,
) -> Option<FeatureMap> {
    if b.kernel != "gaussian" {
        issues.push(format!(
            "features.kernel: unsupported kernel '{}' (only gaussian)",
            b.kernel
        ));
        return None;
    }
    let kernel = match KernelSpec::gaussian(b.bandwidth) {
        Ok(k) => k,
        Err(e) => {
            issues.push(format!("features.bandwidth: {e}"));
            return None;
        }
    };
    let (nx, na) = (model.n_states(), model.n_actions());
    let to_vecs = |v: &Vec<Vec<f64>>| {
        v.iter()
            .map(|r| Array1::from(r.clone()))
            .collect::<Vec<_>>()
    };
    let index = |n: usize| {
        (0..n)
            .map(|i| Array1::from_elem(1, i as f64))
            .collect::<Vec<_>>()
    };
    let se = b
        .state_encoding
        .as_ref()
        .map(to_vecs)
        .unwrap_or_else(|| index(nx));
    let ae = b
        .action_encoding
        .as_ref()
        .map(to_vecs)
        .unwrap_or_else(|| index(na));
    if se.len() != nx {
        issues.push(format!(
            "features.state_encoding has {} entries, expected {nx}",
            se.len()
        ));
        return None;
    }
    if ae.len() != na {
        issues.push(format!(
            "features.action_encoding has {} entries, expected {na}",
            ae.len()
        ));
        return None;
    }
    let mu = model.mean_field().clone();
    let fm = match &b.anchors {
        AnchorSpec::Directive(d) if d == ALL_PAIRS => {
            FeatureMap::all_pairs_with_encoding(kernel, se, ae, mu)
        }
        AnchorSpec::Directive(d) => {
            issues.push(format!(
                "features.anchors: unknown directive '{d}' (expected '{ALL_PAIRS}')"
            ));
            return None;
        }
        AnchorSpec::Explicit(list) => FeatureMap::new(kernel, to_vecs(list), se, ae, mu),
    };
    match fm {
        Ok(fm) => Some(fm),
        Err(e) => {
            issues.push(format!("features: {e}"));
            None
        }
    }
}

fn build_expert(
    b: &ExpertBlockCfg,
    model: &MfgModel,
    base: &Path,
    issues: &mut Vec<String>,
) -> Option<ExpertSource> {
    match (&b.policy, &b.trajectories) {
        (Some(_), Some(_)) => {
            issues.push("expert: give exactly one of 'policy' or 'trajectories', not both".into());
            None
        }
        (None, None) => {
            issues.push("expert: one of 'policy' or 'trajectories' is required".into());
            None
        }
        (Some(rows), None) => {
            let (nx, na) = (model.n_states(), model.n_actions());
            if rows.len() != nx || rows.iter().any(|r| r.len() != na) {
                issues.push(format!("expert.policy must be a {nx}x{na} matrix"));
                return None;
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let probs = Array2::from_shape_vec((nx, na), flat).expect("checked shape");
            match Policy::new(probs) {
                Ok(p) => Some(ExpertSource::Policy(p)),
                Err(e) => {
                    issues.push(format!("expert.policy: {e}"));
                    None
                }
            }
        }
        (None, Some(rel)) => {
            let path = base.join(rel);
            let file = match File::open(&path) {
                Ok(f) => f,
                Err(e) => {
                    issues.push(format!(
                        "expert.trajectories: cannot open {}: {e}",
                        path.display()
                    ));
                    return None;
                }
            };
            match read_trajectories(BufReader::new(file), model.n_states(), model.n_actions()) {
                Ok(demos) if demos.is_empty() => {
                    issues.push(format!(
                        "expert.trajectories: {} holds no trajectories",
                        path.display()
                    ));
                    None
                }
                Ok(demos) => Some(ExpertSource::Trajectories { path, demos }),
                Err(e) => {
                    issues.push(format!("expert.trajectories: {}: {e}", path.display()));
                    None
                }
            }
        }
    }
}

fn build_train(
    b: &TrainBlock,
    model: &MfgModel,
    fm: &FeatureMap,
    solver: SolverOptions,
    issues: &mut Vec<String>,
) -> Option<TrainConfig> {
    let mut cfg = match b.step_size {
        Some(s) => TrainConfig::new(s, b.max_iters),
        None => match TrainConfig::with_default_step(model, fm, b.max_iters) {
            Ok(c) => c,
            Err(e) => {
                issues.push(format!("train: {e}"));
                return None;
            }
        },
    };
    if !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        issues.push(format!(
            "train.step_size must be positive, got {}",
            cfg.step_size
        ));
    }
    if !(b.grad_tol >= 0.0) {
        issues.push(format!(
            "train.grad_tol must be nonnegative, got {}",
            b.grad_tol
        ));
    }
    if b.log_every == 0 {
        issues.push("train.log_every must be at least 1".into());
    }
    cfg.grad_tol = b.grad_tol;
    cfg.log_every = b.log_every.max(1);
    cfg.solver = solver;
    if let Some(t) = &b.theta0 {
        match t.to_params(model.n_states(), fm.n_anchors()) {
            Ok(p) => cfg.theta0 = Some(p),
            Err(e) => issues.push(format!("train.theta0: {e}")),
        }
    }
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: &str = include_str!("../../../configs/traffic.toml");

    fn parse(text: &str) -> Result<Experiment, LoadError> {
        let file: ExperimentFile =
            toml::from_str(text).map_err(|e| LoadError::Parse(e.to_string()))?;
        build(file, Path::new("."), LoadOptions::default())
    }

    #[test]
    fn golden_config_matches_reference_model() {
        let exp = parse(GOLDEN).unwrap();
        assert_eq!(exp.model, mfirl_core::traffic::model());
        assert_eq!(
            exp.expert_policy().unwrap(),
            &mfirl_core::traffic::expert_policy()
        );
        assert_eq!(
            exp.features.joint_table(),
            mfirl_core::traffic::feature_map().joint_table()
        );
        assert_eq!(exp.train.step_size, 0.001);
        assert_eq!(exp.train.max_iters, 10_000);
        assert_eq!(exp.expert_block, ExpertBlock::Occupation);
    }

    #[test]
    fn missing_row_is_named() {
        let text = GOLDEN.replace("  { x = 1, a = 0, row = [0.2, 0.8] },\n", "");
        match parse(&text) {
            Err(LoadError::Invalid(issues)) => {
                assert!(
                    issues.iter().any(|s| s.contains("missing row (x=1,a=0)")),
                    "{issues:?}"
                )
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn both_expert_sources_rejected() {
        let text = GOLDEN.replace("[expert]\n", "[expert]\ntrajectories = \"demos.txt\"\n");
        match parse(&text) {
            Err(LoadError::Invalid(issues)) => assert!(issues[0].contains("exactly one")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_has_location() {
        let err = parse("[model]\nn_states = \n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn explicit_anchors_and_bad_directive() {
        let text = GOLDEN.replace(
            "anchors = \"all_state_action_pairs\"",
            "anchors = [[0.0, 0.0, 0.6, 0.4], [1.0, 1.0, 0.6, 0.4]]",
        );
        let exp = parse(&text).unwrap();
        assert_eq!(exp.features.n_anchors(), 2);
        let text = GOLDEN.replace("all_state_action_pairs", "some_pairs");
        assert!(matches!(parse(&text), Err(LoadError::Invalid(_))));
    }

    #[test]
    fn renormalize_is_opt_in() {
        let text = GOLDEN.replace("row = [0.9, 0.1]", "row = [0.9, 0.1000000001]");
        assert!(matches!(parse(&text), Err(LoadError::Invalid(_))));
        let file: ExperimentFile = toml::from_str(&text).unwrap();
        let exp = build(
            file,
            Path::new("."),
            LoadOptions {
                renormalize: true,
                expert_block: None,
            },
        )
        .unwrap();
        assert_eq!(exp.renormalized, 1);
    }
}
