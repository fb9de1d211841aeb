//! Maximum causal entropy inverse reinforcement learning for infinite-horizon
//! stationary mean-field games with a kernel (RKHS) reward model.
//!
//! Pipeline: a finite [`MfgModel`] with dynamics fixed at the mean-field term,
//! an anchor-based [`FeatureMap`], soft value iteration ([`soft`]), discounted
//! occupation measures ([`occupation`]) and constant-step gradient ascent on
//! the log-likelihood ([`irl::train`]).

pub mod demos;
pub mod error;
pub mod exec;
pub mod irl;
pub mod model;
pub mod occupation;
pub mod rkhs;
pub mod soft;
pub mod traffic;

pub use error::{Error, Result};
pub use exec::Execution;
pub use irl::{ExpertBlock, ExpertStatistics, TraceRecord, TrainConfig, TrainResult};
pub use model::{validate_model, MfgModel, Policy, ValidationReport};
pub use rkhs::{FeatureMap, KernelSpec, RewardParams};
pub use soft::{SoftSolution, SolverOptions};
