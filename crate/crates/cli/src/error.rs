use std::path::{Path, PathBuf};

use ensemble_control::synthesis::SynthesisError;
use ensemble_control::{Error as CoreError, ExprError, ModelError, SimulationError, StatsError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    ControlFile { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{failed} of {total} verification checks failed")]
    VerificationFailed { failed: usize, total: usize },
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core!(ExprError, ModelError, SynthesisError, SimulationError, StatsError);

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 runtime, 2 configuration or validation, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ControlFile { .. } => 2,
            CliError::Core(CoreError::Expr(_) | CoreError::Model(_)) => 2,
            CliError::Core(CoreError::Synthesis(
                SynthesisError::OverdeterminedGrid { .. }
                | SynthesisError::InvalidRank(_)
                | SynthesisError::Model(_),
            )) => 2,
            CliError::Core(CoreError::Simulation(
                SimulationError::StepDoesNotDivideHorizon { .. }
                | SimulationError::InvalidStep(_)
                | SimulationError::IncompatibleScheme { .. }
                | SimulationError::DimensionMismatch(_)
                | SimulationError::Model(_),
            )) => 2,
            CliError::Core(CoreError::Stats(StatsError::InsufficientTrials { .. })) => 2,
            CliError::VerificationFailed { .. } => 3,
            _ => 1,
        }
    }

    /// Module-qualified error code such as `synthesis::OverdeterminedGrid`.
    pub fn code(&self) -> String {
        fn variant<T: std::fmt::Debug>(v: &T) -> String {
            let s = format!("{v:?}");
            s.split(|c: char| !c.is_alphanumeric() && c != '_')
                .next()
                .unwrap_or("")
                .to_string()
        }
        match self {
            CliError::Config(_) => "cli::Config".into(),
            CliError::Io { .. } => "cli::Io".into(),
            CliError::ControlFile { .. } => "cli::ControlFile".into(),
            CliError::VerificationFailed { .. } => "cli::VerificationFailed".into(),
            CliError::Core(e) => match e {
                CoreError::Expr(e) => format!("expr::{}", variant(e)),
                CoreError::Model(e) => format!("model::{}", variant(e)),
                CoreError::Synthesis(e) => format!("synthesis::{}", variant(e)),
                CoreError::Simulation(e) => format!("sde::{}", variant(e)),
                CoreError::Stats(e) => format!("stats::{}", variant(e)),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_exit_status() {
        let e: CliError = SynthesisError::OverdeterminedGrid { rows: 3, cols: 2 }.into();
        assert_eq!(e.code(), "synthesis::OverdeterminedGrid");
        assert_eq!(e.exit_code(), 2);
        let e: CliError = SynthesisError::ConvergenceFailure.into();
        assert_eq!(e.code(), "synthesis::ConvergenceFailure");
        assert_eq!(e.exit_code(), 1);
        let e: CliError = StatsError::InsufficientTrials {
            beta_index: 0,
            trials: 1,
        }
        .into();
        assert_eq!(e.code(), "stats::InsufficientTrials");
        assert_eq!(
            CliError::VerificationFailed { failed: 1, total: 2 }.exit_code(),
            3
        );
    }
}
