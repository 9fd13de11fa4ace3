//! Policy filtration for PPO on small, exactly scorable generation tasks.
//!
//! The core math is generic over the scalar type; the aliases below fix it
//! to `f64` (and `f32` where a smaller footprint is wanted).

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod filtration;
pub mod harness;
pub mod policy;
pub mod ppo;
pub mod reward_model;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Policy = policy::PolicyParams<f64>;
pub type Policy32 = policy::PolicyParams<f32>;
pub type Value = policy::ValueParams<f64>;
pub type Value32 = policy::ValueParams<f32>;
pub type Reference = policy::ReferencePolicy<f64>;
pub type Trajectory = policy::Trajectory<f64>;
pub type RewardModel = reward_model::RewardModel<f64>;
pub type RewardModel32 = reward_model::RewardModel<f32>;
pub type RewardSource = reward_model::RewardSource<f64>;
pub type RankWeights = filtration::RankWeights<f64>;
pub type FilterStrategy = filtration::FilterStrategy<f64>;
pub type Variant = ppo::Variant<f64>;
pub type TrainState = ppo::TrainState<f64>;
pub type RolloutBuffer = ppo::RolloutBuffer<f64>;
