//! Function approximators: MLPs, the Gaussian actor-critic, the GRU cell and
//! the RND target/predictor pair, plus the optimizer they share.

mod gru;
mod mlp;
mod optim;
mod params;
mod policy;
mod rnd;

pub use gru::{gru_rollforward, GruCell};
pub use mlp::{init_params, mlp_forward, Activation, Mlp, MlpSpec};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use params::ParamSet;
pub use policy::{ActMode, ActOutput, GaussianActorCritic, Heads, NetworkConfig};
pub use rnd::RndPair;
