//! On-policy PPO: rollout collection with timeout bootstrapping, GAE,
//! clipped-surrogate updates with a KL-adaptive learning rate, and
//! recurrent sequence training.

mod buffer;
mod config;
mod loss;
mod rollout;
mod update;

pub use buffer::{compute_gae, gae, Minibatch, RolloutBuffer};
pub use config::{adapt_lr, PpoConfig, LR_MAX, LR_MIN};
pub use loss::{ppo_loss, ppo_loss_from_heads, LossStats};
pub use rollout::{collect_rollout, EpisodeRecord, RolloutState};
pub use update::{update, Learner, UpdateContext, UpdateStats};
pub(crate) use update::{env_groups, stratified_minibatches};
