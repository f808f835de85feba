//! Off-policy evaluation for confounded POMDPs.
//!
//! Value bridges are fitted backward in time by kernel min-max instrumental
//! variable regression on observed proxies: a reward-side proxy `W` enters the
//! bridge and an action-side proxy `Z` serves as the instrument. The crate also
//! ships a simulator with a known data-generating process, an exact tabular
//! identification checker and an experiment harness.

pub mod error;
pub mod experiment;
pub mod fqe;
pub mod kernel;
pub mod linalg;
pub mod npiv;
pub mod policy;
pub mod seed;
pub mod simulator;
pub mod tabular;

pub use error::{OpeError, Result};
pub use experiment::{run_experiment, summarize, ExperimentConfig, RunRecord, SummaryRow};
pub use fqe::{estimate_v_bridges, FqeSettings, KernelChoice, OpeResult, Tuning, VBridgeStep};
pub use kernel::{FeatureMatrix, GramMatrix, KernelFamily, KernelSpec};
pub use npiv::{cv_select_scale, fit_npiv, predict, HyperParams, NpivModel, NpivProblem};
pub use policy::{Action, Policy};
pub use simulator::{mc_policy_value, sample_batch, SimParams, TargetPolicy, TrajectoryBatch};
pub use tabular::{check_rank_conditions, ope_via_bridges, solve_q_bridges, true_value_dp, TabularCase, TabularPolicy, TabularPomdp};
