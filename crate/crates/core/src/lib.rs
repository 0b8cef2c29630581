//! Tabular generative flow networks on finite DAG environments.
//!
//! The crate trains a sampler whose terminating distribution is proportional
//! to a reward, using one of five objectives: flow matching, detailed
//! balance, trajectory balance, sub-trajectory balance, and an
//! entropy-weighted sum of trajectory-balance losses over the sub-networks
//! rooted at branching states.
//!
//! * [`env`]: the environment contract and the hypergrid benchmark.
//! * [`model`]: tabular parameters, policies and sampling.
//! * [`losses`]: the objectives and sub-network entropies.
//! * [`exact`]: DP evaluation and brute-force oracles.
//! * [`trainer`]: gradients, Adam and the training loop.
//! * [`checkpoint`]: text checkpoints of hypergrid parameters.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod exact;
pub mod losses;
pub mod model;
pub mod trainer;

pub use env::{validate_trajectory, ActionId, DagEnv, Hypergrid, IntervalClosure, StateIdx, Trajectory, Violation};
pub use error::{Error, Result};
pub use exact::{FlowTable, TerminalDistribution};
pub use losses::{EntropyCache, EntropyMode, LossKind, LossSpec, SubRoot};
pub use model::{BackwardMode, FlowParams, InitScheme, ParamId, SampleConfig};
pub use trainer::{train_run, MetricsRow, OptState, TrainConfig, TrainFailure, Trainer};
