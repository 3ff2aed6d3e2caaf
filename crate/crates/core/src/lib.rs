//! Gradient descent with adaptive magnitude pruning, plus the tensor,
//! network, optimizer, data and experiment plumbing around it.

pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod optim;
pub mod pruning;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{build_model, Architecture, Model};
pub use optim::{Adam, OptimHyper};
pub use scheduler::{
    compute_proxy, dim_bound, occam_fit, post_train_prune_baseline, update_lambda, ControlMode, OccamConfig,
    OccamTrace, TrainSettings,
};
