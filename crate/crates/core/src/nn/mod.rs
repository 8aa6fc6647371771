//! Small reverse-mode autodiff engine, parameter storage with Adam, and the
//! actor-critic network built on top of them.

mod graph;
mod net;
mod params;

pub use graph::{ConvGeom, Graph, Tensor, Var};
pub use net::{
    log_prob_and_entropy, orthogonal, ActorCritic, ArchConfig, ConvSpec, GaussianHead, NetInput, ACTION_DIM,
    EXTRA_INPUTS, LOG_STD_MAX, LOG_STD_MIN,
};
pub use params::{AdamConfig, Gradients, Param, ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
