//! Symmetry augmentation and loss, and random-network-distillation curiosity.

mod moments;
mod rnd;
mod symmetry;

pub use moments::{running_update, RunningMoments};
pub use rnd::{rnd_loss_grads, rnd_reward, rnd_update, RndConfig, RndState};
pub use symmetry::{
    augment_batch, mirror_actions, mirror_obs, symmetry_defect, symmetry_loss, SignedPermutation,
    SymmetrySpec,
};
