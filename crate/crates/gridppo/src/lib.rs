//! Learning AC optimal power flow setpoints with proximal policy
//! optimization: grid case model, Newton-Raphson power flow, interior-point
//! OPF labeling oracle, a Gym-style grid environment, a small dense NN
//! stack, imitation warm-start and PPO training, and evaluation tooling.

pub mod case;
pub mod ckpt;
pub mod cli;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod imitation;
pub mod ipm;
pub mod nn;
pub mod opf;
pub mod pf;
pub mod ppo;
