//! Resolution of a [`RunConfig`] into concrete objects, and the `synthesize`
//! and `simulate` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ensemble_control::sde::{run_ensemble, Scheme, SimulationConfig, TrialSet};
use ensemble_control::stats::{monte_carlo_stats, theoretical_mse, EnsembleStatistics, DEFAULT_QUAD_STEPS};
use ensemble_control::synthesis::{synthesize, SynthesisError};
use ensemble_control::{
    builtin_example, ControlSignal, EnsembleSystem, ParameterGrid, Preset, Synthesis, SynthesisOptions,
    TimeGrid, TransitionOptions,
};

use crate::config::{RunConfig, RunResults, SampleCount, SystemSource};
use crate::error::CliError;
use crate::output::{self, PlotInputs};

/// Per-preset simulation defaults: scheme, step, trials, simulated indices.
fn preset_defaults(name: &str) -> (Scheme, f64, usize, Option<Vec<usize>>) {
    match name {
        "bm-oscillator" => (Scheme::EulerMaruyama, 5e-4, 400, None),
        "poisson-oscillator" => (Scheme::Poisson, 1e-3, 400, None),
        "scalar-tv" => (Scheme::EulerMaruyama, 1e-3, 100, None),
        "quantum-transport" => (Scheme::Sri15, 1e-3, 1000, Some(vec![0, 50, 100])),
        _ => (Scheme::Rk4, 1e-3, 100, None),
    }
}

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_MAX_CONDITION: f64 = 1e4;

/// Everything a command needs, with defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Effective configuration; re-running it reproduces the run.
    pub config: RunConfig,
    pub preset: Option<Preset>,
    pub system: EnsembleSystem,
    pub tgrid: TimeGrid,
    pub pgrid: ParameterGrid,
    pub synthesis: SynthesisOptions,
    pub simulation: SimulationConfig,
    pub beta_indices: Vec<usize>,
    pub quad_steps: usize,
    pub compute_stats: bool,
}

impl Resolved {
    pub fn out_dir(&self) -> &Path {
        &self.config.outputs.directory
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.out_dir().join(file)
    }

    pub fn reported_q(&self) -> Option<usize> {
        self.preset.as_ref().and_then(|p| p.reported_q)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.beta_indices
            .iter()
            .map(|&j| self.pgrid.weights()[j])
            .collect()
    }
}

pub fn resolve(cfg: &RunConfig) -> Result<Resolved, CliError> {
    let mut cfg = cfg.clone();
    cfg.results = None;
    let (preset, system) = match &cfg.system {
        SystemSource::Preset { preset } => {
            let p = builtin_example(preset)?;
            let sys = p.system.clone();
            (Some(p), sys)
        }
        SystemSource::Inline(spec) => (None, EnsembleSystem::from_spec(spec)?),
    };

    let steps = match (cfg.grids.steps, &preset) {
        (Some(n), _) => n,
        (None, Some(p)) => p.time_grid.steps(),
        (None, None) => {
            return Err(CliError::Config(
                "grids.steps is required for an inline system".into(),
            ))
        }
    };
    let tgrid = TimeGrid::new(system.horizon(), steps)?;
    let samples = match (&cfg.grids.samples, &preset) {
        (Some(SampleCount::Uniform(p)), _) => vec![*p; system.param_dim()],
        (Some(SampleCount::PerComponent(ps)), _) => ps.clone(),
        (None, Some(p)) => vec![p.parameter_grid.len(); 1],
        (None, None) => {
            return Err(CliError::Config(
                "grids.samples is required for an inline system".into(),
            ))
        }
    };
    let pgrid = ParameterGrid::uniform_per_dim(system.bounds(), &samples)?;
    cfg.grids.steps = Some(steps);
    cfg.grids.samples = Some(if samples.len() == 1 {
        SampleCount::Uniform(samples[0])
    } else {
        SampleCount::PerComponent(samples)
    });

    let rows = system.state_dim() * pgrid.len();
    let cols = system.input_dim() * steps;
    if rows > cols {
        return Err(SynthesisError::OverdeterminedGrid { rows, cols }.into());
    }
    if let Some(q) = cfg.synthesis.q {
        if q == 0 || q > pgrid.len() {
            return Err(SynthesisError::InvalidRank(format!(
                "q = {q} must satisfy 1 <= q <= P = {}",
                pgrid.len()
            ))
            .into());
        }
    }
    let max_condition = cfg.synthesis.max_condition.unwrap_or(DEFAULT_MAX_CONDITION);
    if max_condition.is_nan() || max_condition <= 1.0 {
        return Err(CliError::Config(format!(
            "max_condition must exceed 1, got {max_condition}"
        )));
    }
    let substeps = cfg.synthesis.substeps.unwrap_or(1).max(1);
    cfg.synthesis.max_condition = Some(max_condition);
    cfg.synthesis.substeps = Some(substeps);
    let method = cfg.synthesis.transition.unwrap_or_default();
    cfg.synthesis.transition = Some(method);
    let synthesis = SynthesisOptions {
        transition: TransitionOptions { substeps, method },
        q: cfg.synthesis.q,
        max_condition,
        q_max: None,
    };

    let (d_scheme, d_h, d_trials, d_indices) = match &preset {
        Some(p) => preset_defaults(p.name),
        None => (
            Scheme::default_for(system.noise().kind()),
            system.horizon() / 1000.0,
            100,
            None,
        ),
    };
    let sim = &mut cfg.simulation;
    let scheme = *sim.scheme.get_or_insert(d_scheme);
    let h = *sim.h.get_or_insert(d_h);
    let trials = *sim.trials.get_or_insert(d_trials);
    let seed = *sim.seed.get_or_insert(DEFAULT_SEED);
    let quad_steps = *sim.quad_steps.get_or_insert(DEFAULT_QUAD_STEPS);
    let compute_stats = *sim.stats.get_or_insert(true);
    if sim.beta_indices.is_none() {
        sim.beta_indices = d_indices;
    }
    let beta_indices = sim
        .beta_indices
        .clone()
        .unwrap_or_else(|| (0..pgrid.len()).collect());
    if let Some(&bad) = beta_indices.iter().find(|&&j| j >= pgrid.len()) {
        return Err(CliError::Config(format!(
            "simulation.beta_indices contains {bad}, but the grid has {} samples",
            pgrid.len()
        )));
    }
    if trials == 0 {
        return Err(CliError::Config("simulation.trials must be positive".into()));
    }
    let record_every = cfg
        .outputs
        .trajectories
        .then_some(cfg.outputs.trajectory_stride.max(1));
    let simulation = SimulationConfig {
        scheme,
        step: h,
        seed,
        trials,
        horizon: None,
        record_every,
    };

    Ok(Resolved {
        config: cfg,
        preset,
        system,
        tgrid,
        pgrid,
        synthesis,
        simulation,
        beta_indices,
        quad_steps,
        compute_stats,
    })
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Writes `run_meta.toml`: the effective configuration plus `[results]`.
pub fn write_meta(res: &Resolved, mut results: RunResults, started: Instant) -> Result<(), CliError> {
    results.wall_time_s = Some(started.elapsed().as_secs_f64());
    results.timestamp = Some(timestamp());
    let mut cfg = res.config.clone();
    cfg.results = Some(results);
    output::write_text(&res.out("run_meta.toml"), &cfg.to_toml()?)
}

pub fn synthesis_results(res: &Resolved, s: &Synthesis) -> RunResults {
    RunResults {
        q: Some(s.q()),
        reported_q: res.reported_q(),
        numerical_rank: Some(s.factorization.rank()),
        condition_ratio: s.factorization.condition_ratio(),
        residual: Some(s.residual().norm()),
        projection_residual: Some(s.diagnostic.residual),
        control_norm: Some(s.control.norm_squared().sqrt()),
        ..RunResults::default()
    }
}

/// Synthesize and write `control.csv`, `singular_values.csv` and
/// `diagnostic.csv` as enabled.
pub fn run_synthesis(res: &Resolved) -> Result<Synthesis, CliError> {
    let s = synthesize(&res.system, &res.tgrid, &res.pgrid, &res.synthesis)?;
    prepare_dir(res.out_dir())?;
    let o = &res.config.outputs;
    if o.control {
        output::write_control(&res.out("control.csv"), &s.control)?;
    }
    if o.singular_values {
        output::write_singular_values(&res.out("singular_values.csv"), &s.factorization.svd)?;
    }
    if o.diagnostic {
        output::write_diagnostic(&res.out("diagnostic.csv"), &s.factorization.svd, &s.diagnostic)?;
    }
    Ok(s)
}

pub fn write_plot(res: &Resolved, control: bool, stats: bool, sweeps: bool) -> Result<(), CliError> {
    if !res.config.outputs.plot {
        return Ok(());
    }
    let o = &res.config.outputs;
    let script = output::plot_script(&PlotInputs {
        control: control && o.control,
        singular_values: control && o.singular_values,
        stats: stats && o.stats,
        sweeps,
        state_dim: res.system.state_dim(),
        input_dim: res.system.input_dim(),
    });
    output::write_text(&res.out("plot.gp"), &script)
}

#[derive(Debug, Clone)]
pub struct SynthesizeOutcome {
    pub resolved: Resolved,
    pub synthesis: Synthesis,
    pub results: RunResults,
}

pub fn cmd_synthesize(cfg: &RunConfig) -> Result<SynthesizeOutcome, CliError> {
    let started = Instant::now();
    let res = resolve(cfg)?;
    let synthesis = run_synthesis(&res)?;
    let mut results = synthesis_results(&res, &synthesis);
    results.command = Some("synthesize".into());
    write_plot(&res, true, false, false)?;
    write_meta(&res, results.clone(), started)?;
    Ok(SynthesizeOutcome {
        resolved: res,
        synthesis,
        results,
    })
}

/// Trials at the configured parameter samples, with statistics when enabled.
pub fn simulate_and_summarize(
    res: &Resolved,
    control: Option<&ControlSignal>,
) -> Result<(Vec<TrialSet>, Option<EnsembleStatistics>), CliError> {
    let sets = run_ensemble(
        &res.system,
        control,
        &res.pgrid,
        Some(&res.beta_indices),
        &res.simulation,
    )?;
    let o = &res.config.outputs;
    let (n, d) = (res.system.state_dim(), res.system.param_dim());
    if o.terminals {
        output::write_terminals(&res.out("terminals.csv"), &sets, n, d)?;
    }
    if o.trajectories {
        output::write_trajectories(&res.out("trajectories"), &sets, n)?;
    }
    if !res.compute_stats {
        return Ok((sets, None));
    }
    let theory = sets
        .iter()
        .map(|s| theoretical_mse(&res.system, res.system.horizon(), &s.beta, res.quad_steps))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = monte_carlo_stats(&res.system, &sets, &res.weights(), &theory)?;
    if o.stats {
        output::write_stats(&res.out("stats.csv"), &stats, n, d)?;
        output::write_summary(&res.out("summary.csv"), &stats)?;
    }
    Ok((sets, Some(stats)))
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub resolved: Resolved,
    pub synthesis: Option<Synthesis>,
    pub sets: Vec<TrialSet>,
    pub stats: Option<EnsembleStatistics>,
    pub results: RunResults,
}

/// Simulate under the control in `control_file`, or under a freshly
/// synthesized one when no file is given.
pub fn cmd_simulate(cfg: &RunConfig, control_file: Option<&Path>) -> Result<SimulateOutcome, CliError> {
    let started = Instant::now();
    let res = resolve(cfg)?;
    prepare_dir(res.out_dir())?;
    let (synthesis, control, mut results) = match control_file {
        Some(path) => (
            None,
            output::read_control(path, &res.system)?,
            RunResults::default(),
        ),
        None => {
            let s = run_synthesis(&res)?;
            let r = synthesis_results(&res, &s);
            let c = s.control.clone();
            (Some(s), c, r)
        }
    };
    let (sets, stats) = simulate_and_summarize(&res, Some(&control))?;
    results.command = Some("simulate".into());
    if let Some(st) = &stats {
        results.j1 = Some(st.j1);
        results.j2_emp = Some(st.j2_empirical);
        results.j2_theory = Some(st.j2_theory);
    }
    write_plot(&res, synthesis.is_some(), stats.is_some(), false)?;
    write_meta(&res, results.clone(), started)?;
    Ok(SimulateOutcome {
        resolved: res,
        synthesis,
        sets,
        stats,
        results,
    })
}
