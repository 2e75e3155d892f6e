//! PPO with a coherent log-ratio reward on synthetic token worlds.
//!
//! A pretrained policy is fine-tuned on expert demonstrations (SFT), then
//! trained with PPO against the coherent reward
//! `log p_SFT(y|x) − log p_PT(y|x)`. Worlds are small Markov tables, so KL
//! to the expert and the KL-regularised optimum can be computed exactly.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod experiment;
pub mod jsonl;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod scalar;
pub mod seeds;
pub mod sequence;
pub mod sft;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Policy64 = policy::Policy<f64>;
pub type Policy32 = policy::Policy<f32>;
pub type FrozenPolicy64 = policy::FrozenPolicy<f64>;
pub type ValueHead64 = policy::ValueHead<f64>;
pub type TokenWorld64 = world::TokenWorld<f64>;
pub type TokenWorld32 = world::TokenWorld<f32>;
pub type RewardSpec64 = reward::RewardSpec<f64>;
pub type Trajectory64 = ppo::Trajectory<f64>;
pub type RolloutBatch64 = ppo::RolloutBatch<f64>;
pub type Pipeline64 = experiment::Pipeline<f64>;
