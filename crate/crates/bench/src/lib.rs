//! Fixtures shared by the benchmarks.

use iaa_core::env::{GridWorld, RewardMode, TaskSpec, Variant};
use iaa_core::policy::{ActorCritic, DEFAULT_HIDDEN};
use iaa_core::ppo::{collect_rollout, EnvPool, PpoHyper, RolloutBatch};
use iaa_core::rng::RngStreams;
use iaa_core::Activation;

pub fn target_world() -> GridWorld {
    GridWorld::new(TaskSpec::new(Variant::Target, RewardMode::Sparse)).expect("default spec is valid")
}

pub fn student(seed: u64) -> ActorCritic {
    let world = target_world();
    let mut streams = RngStreams::new(seed);
    ActorCritic::new_random(world.observation_len(), &DEFAULT_HIDDEN, 5, Activation::Tanh, &mut streams.init)
}

/// A full-size batch with GAE already computed.
pub fn prepared_batch(student: &ActorCritic, hyper: &PpoHyper, seed: u64) -> RolloutBatch {
    let mut streams = RngStreams::new(seed);
    let mut pool = EnvPool::new(target_world(), hyper.num_envs, &mut streams.environment);
    let mut batch = collect_rollout(&mut pool, student, None, hyper.horizon, 0, &mut streams).expect("rollout");
    batch.compute_gae(|o| student.value(o), hyper).expect("gae");
    batch
}
