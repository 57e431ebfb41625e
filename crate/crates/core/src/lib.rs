//! Introspective action advising for transfer between gridworld tasks.
//!
//! A teacher policy trained on a source task advises a PPO student on a
//! target task. The teacher compares its source-task critic with a copy
//! fine-tuned on target-task returns and only advises where the two agree.

pub mod advising;
pub mod env;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod transfer;

pub use advising::{AdviceRecord, IntrospectionConfig};
pub use env::{Action, GridState, GridWorld, Observation, Pos, RewardMode, TaskSpec, Variant};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, MetricsRow};
pub use nn::{Activation, Mlp, MlpGrads, OptimizerState};
pub use policy::{ActorCritic, TeacherBundle};
pub use ppo::{PpoHyper, RolloutBatch, Transition};
pub use transfer::{TransferKind, TransferMode};
