//! Open-loop control of ensembles of parameterized linear stochastic systems
//! `dX = (A(t,β) X + B(t,β) u) dt + G(t,β) dS`, where `S` is Brownian motion
//! or a vector of Poisson counters.
//!
//! A single control `u` is synthesized for every `β` in a compact set `K` by
//! discretizing the input-to-state integral operator and inverting it with a
//! truncated SVD ([`synthesis`]). The result is checked by simulation
//! ([`sde`]) against the theoretical minimum mean-square error ([`stats`]).

pub mod expr;
pub mod model;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod synthesis;
pub mod transition;

pub use expr::{Expr, ExprError};
pub use model::{
    builtin_example, EnsembleSystem, ModelError, NoiseKind, NoiseSpec, ParameterGrid, Preset, SystemSpec,
    TimeGrid, PRESET_NAMES,
};
pub use sde::{Scheme, SimulationConfig, SimulationError, TrajectorySample, TrialSet};
pub use stats::{EnsembleStatistics, StatsError};
pub use synthesis::{ControlSignal, Synthesis, SynthesisError, SynthesisOptions};
pub use transition::{TransitionMethod, TransitionOptions};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("expr: {0}")]
    Expr(#[from] ExprError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("synthesis: {0}")]
    Synthesis(#[from] SynthesisError),
    #[error("sde: {0}")]
    Simulation(#[from] SimulationError),
    #[error("stats: {0}")]
    Stats(#[from] StatsError),
}
