//! Run configuration: the TOML (or JSON) file accepted by `--config`, and the
//! effective configuration written back as `run_meta.toml`.

use std::path::{Path, PathBuf};

use ensemble_control::sde::Scheme;
use ensemble_control::transition::TransitionMethod;
use ensemble_control::{builtin_example, SystemSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSource {
    Preset { preset: String },
    Inline(SystemSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCount {
    Uniform(usize),
    PerComponent(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Time intervals `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Parameter samples `P`, one count or one per component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleCount>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_condition: Option<f64>,
    /// RK4 substeps per grid interval for time-varying drift matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    /// `auto` (exponential when A is constant in t), `rk4` or `exponential`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionMethod>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Parameter grid indices to simulate (zero-based); all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_steps: Option<usize>,
    /// Compute statistics after simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub control: bool,
    pub singular_values: bool,
    pub diagnostic: bool,
    pub terminals: bool,
    pub stats: bool,
    pub trajectories: bool,
    /// Keep every k-th integration step in trajectory files.
    pub trajectory_stride: usize,
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("out"),
            control: true,
            singular_values: true,
            diagnostic: true,
            terminals: true,
            stats: true,
            trajectories: false,
            trajectory_stride: 10,
            plot: true,
        }
    }
}

/// Values recorded after a run. Ignored on input, so a `run_meta.toml` can be
/// fed back as a configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numerical_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2_emp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j2_theory: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_extension: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_passed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSource,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<RunResults>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Self {
        RunConfig {
            system: SystemSource::Preset {
                preset: name.to_string(),
            },
            grids: GridConfig::default(),
            synthesis: SynthesisConfig::default(),
            simulation: SimulationSection::default(),
            outputs: OutputConfig::default(),
            results: None,
        }
    }

    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?
        };
        cfg.results = None;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn preset_name(&self) -> Option<&str> {
        match &self.system {
            SystemSource::Preset { preset } => Some(preset),
            SystemSource::Inline(_) => None,
        }
    }

    /// Fail early on an unknown preset.
    pub fn check_preset(&self) -> Result<(), CliError> {
        if let Some(name) = self.preset_name() {
            builtin_example(name)?;
        }
        Ok(())
    }
}
