//! Minimum achievable MSE, Monte Carlo terminal statistics and the ensemble
//! objectives.
//!
//! The noise-injected covariance at time `T` is
//! `C(T,β) = ∫₀ᵀ Φ(T,σ,β) G M Gᵀ Φ(T,σ,β)ᵀ dσ` with `M = I` for Brownian noise
//! and `M = Λ` (intensities) for Poisson counters. No open-loop control can
//! push `E‖X(T) − X_F‖²` below `tr C(T,β)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{EnsembleSystem, ModelError, NoiseSpec};
use crate::sde::{run_at_points, SimulationConfig, SimulationError, TrialSet};
use crate::synthesis::ControlSignal;
use crate::transition::{transitions_to_end, TransitionMethod};

pub const DEFAULT_QUAD_STEPS: usize = 4000;
pub const MIN_QUAD_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("at least 2 trials are needed per parameter sample, got {trials} (beta index {beta_index})")]
    InsufficientTrials { beta_index: usize, trials: usize },
    #[error("quadrature needs at least {MIN_QUAD_STEPS} steps, got {0}")]
    InvalidQuadrature(usize),
    #[error("evaluation horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

fn check_quadrature(t_eval: f64, quad_steps: usize) -> Result<(), StatsError> {
    if quad_steps < MIN_QUAD_STEPS {
        return Err(StatsError::InvalidQuadrature(quad_steps));
    }
    if !(t_eval > 0.0 && t_eval.is_finite()) {
        return Err(StatsError::InvalidHorizon(t_eval));
    }
    Ok(())
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// `tr C(t_eval, β)` by the composite trapezoid rule on `quad_steps` intervals.
pub fn theoretical_mse(
    sys: &EnsembleSystem,
    t_eval: f64,
    beta: &[f64],
    quad_steps: usize,
) -> Result<f64, StatsError> {
    check_quadrature(t_eval, quad_steps)?;
    let weights: Vec<f64> = match sys.noise() {
        NoiseSpec::None => return Ok(0.0),
        NoiseSpec::Brownian => vec![1.0; sys.noise_dim()],
        NoiseSpec::Poisson { intensities } => intensities.clone(),
    };
    let phis = transitions_to_end(sys, t_eval, beta, quad_steps, TransitionMethod::Auto)?;
    let h = t_eval / quad_steps as f64;
    let integrand = phis
        .iter()
        .enumerate()
        .map(|(i, phi)| {
            let sigma = if i == quad_steps { t_eval } else { i as f64 * h };
            let g = sys.noise_matrix().eval_checked("G", sigma, beta)?;
            let pg = phi * g;
            Ok(pg
                .column_iter()
                .zip(&weights)
                .map(|(col, w)| w * col.norm_squared())
                .sum())
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(trapezoid(&integrand, h))
}

/// Terminal mean with zero control, `Φ(T,0)X₀ + ∫₀ᵀ Φ(T,σ) G λ dσ` (the
/// integral is present for Poisson noise only).
pub fn uncontrolled_mean(
    sys: &EnsembleSystem,
    t_eval: f64,
    beta: &[f64],
    quad_steps: usize,
) -> Result<DVector<f64>, StatsError> {
    check_quadrature(t_eval, quad_steps)?;
    let phis = transitions_to_end(sys, t_eval, beta, quad_steps, TransitionMethod::Auto)?;
    let mut mean = &phis[0] * sys.initial_state(beta)?;
    if let Some(lambda) = sys.noise().intensities() {
        let lambda = DVector::from_column_slice(lambda);
        let h = t_eval / quad_steps as f64;
        let n = sys.state_dim();
        let mut values = vec![DVector::zeros(n); quad_steps + 1];
        for (i, phi) in phis.iter().enumerate() {
            let sigma = if i == quad_steps { t_eval } else { i as f64 * h };
            let g = sys.noise_matrix().eval_checked("G", sigma, beta)?;
            values[i] = phi * (g * &lambda);
        }
        for c in 0..n {
            let comp: Vec<f64> = values.iter().map(|v| v[c]).collect();
            mean[c] += trapezoid(&comp, h);
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaStatistics {
    pub beta_index: usize,
    pub beta: Vec<f64>,
    pub trials: usize,
    pub mean_terminal: DVector<f64>,
    /// Componentwise standard error of the mean.
    pub mean_se: DVector<f64>,
    /// `sqrt(tr Σ̂ / trials)`, a standard error for `‖mean − X_F‖`.
    pub mean_norm_se: f64,
    pub mse_empirical: f64,
    pub mse_se: f64,
    pub mse_theory: f64,
}

impl BetaStatistics {
    pub fn mean_error(&self, xf: &DVector<f64>) -> f64 {
        (&self.mean_terminal - xf).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStatistics {
    pub per_beta: Vec<BetaStatistics>,
    /// `sqrt(Σ_j w_j ‖mean_j − X_F(β_j)‖²)`
    pub j1: f64,
    pub j2_empirical: f64,
    pub j2_theory: f64,
    /// `sqrt(Σ_j w_j² se_j²)` for `j2_empirical`.
    pub j2_se: f64,
}

/// Sample statistics of the terminal states. `weights[j]` and
/// `mse_theory[j]` belong to `sets[j]`.
pub fn monte_carlo_stats(
    sys: &EnsembleSystem,
    sets: &[TrialSet],
    weights: &[f64],
    mse_theory: &[f64],
) -> Result<EnsembleStatistics, StatsError> {
    if weights.len() != sets.len() || mse_theory.len() != sets.len() {
        return Err(StatsError::DimensionMismatch(format!(
            "{} trial sets, {} weights, {} theoretical values",
            sets.len(),
            weights.len(),
            mse_theory.len()
        )));
    }
    let mut per_beta = Vec::with_capacity(sets.len());
    let (mut j1_sq, mut j2, mut j2_th, mut j2_var) = (0.0, 0.0, 0.0, 0.0);
    for ((set, &w), &theory) in sets.iter().zip(weights).zip(mse_theory) {
        let xf = sys.target_state(&set.beta)?;
        let stats = beta_statistics(set, &xf, theory)?;
        j1_sq += w * (&stats.mean_terminal - &xf).norm_squared();
        j2 += w * stats.mse_empirical;
        j2_th += w * theory;
        j2_var += (w * stats.mse_se).powi(2);
        per_beta.push(stats);
    }
    Ok(EnsembleStatistics {
        per_beta,
        j1: j1_sq.sqrt(),
        j2_empirical: j2,
        j2_theory: j2_th,
        j2_se: j2_var.sqrt(),
    })
}

fn beta_statistics(set: &TrialSet, xf: &DVector<f64>, mse_theory: f64) -> Result<BetaStatistics, StatsError> {
    let trials = set.samples.len();
    if trials < 2 {
        return Err(StatsError::InsufficientTrials {
            beta_index: set.beta_index,
            trials,
        });
    }
    let nf = trials as f64;
    let n = xf.len();
    let mut mean = DVector::zeros(n);
    for x in set.terminals() {
        mean += x;
    }
    mean /= nf;
    let mut var = DVector::<f64>::zeros(n);
    for x in set.terminals() {
        var += (x - &mean).map(|d| d * d);
    }
    var /= nf - 1.0;
    let errs: Vec<f64> = set.terminals().map(|x| (x - xf).norm_squared()).collect();
    let mse = errs.iter().sum::<f64>() / nf;
    let mse_var = errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(BetaStatistics {
        beta_index: set.beta_index,
        beta: set.beta.clone(),
        trials,
        mean_se: var.map(|v| (v / nf).sqrt()),
        mean_norm_se: (var.sum() / nf).sqrt(),
        mean_terminal: mean,
        mse_empirical: mse,
        mse_se: (mse_var / nf).sqrt(),
        mse_theory,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Parameter values at a fixed evaluation horizon.
    Beta { horizon: f64, betas: Vec<Vec<f64>> },
    /// Evaluation horizons at a fixed parameter value.
    Horizon { beta: Vec<f64>, horizons: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// First parameter component or the horizon.
    pub value: f64,
    pub mse_empirical: f64,
    pub mse_se: f64,
    pub mse_theory: f64,
}

/// Empirical against theoretical MSE along a sweep. Sweep point `i` uses
/// random stream index `i`; the control is zero past its own horizon.
pub fn mse_sweep(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    sweep: &Sweep,
    cfg: &SimulationConfig,
    quad_steps: usize,
) -> Result<Vec<SweepRow>, StatsError> {
    let points: Vec<(f64, Vec<f64>, f64)> = match sweep {
        Sweep::Beta { horizon, betas } => betas.iter().map(|b| (b[0], b.clone(), *horizon)).collect(),
        Sweep::Horizon { beta, horizons } => horizons.iter().map(|&t| (t, beta.clone(), t)).collect(),
    };
    points
        .par_iter()
        .enumerate()
        .map(|(i, (value, beta, horizon))| {
            let cfg = SimulationConfig {
                horizon: Some(*horizon),
                ..*cfg
            };
            let set = run_at_points(sys, control, &[(i, beta.clone())], &cfg)?.remove(0);
            let xf = sys.target_state(beta)?;
            let theory = theoretical_mse(sys, *horizon, beta, quad_steps)?;
            let s = beta_statistics(&set, &xf, theory)?;
            Ok(SweepRow {
                value: *value,
                mse_empirical: s.mse_empirical,
                mse_se: s.mse_se,
                mse_theory: theory,
            })
        })
        .collect()
}

/// Sample covariance of the terminal states, for diagnostics.
pub fn terminal_covariance(set: &TrialSet) -> Option<DMatrix<f64>> {
    let trials = set.samples.len();
    let first = set.samples.first()?;
    if trials < 2 {
        return None;
    }
    let n = first.terminal.len();
    let mean = set.terminals().fold(DVector::zeros(n), |acc, x| acc + x) / trials as f64;
    let mut cov = DMatrix::zeros(n, n);
    for x in set.terminals() {
        let d = x - &mean;
        cov += &d * d.transpose();
    }
    Some(cov / (trials as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example, NoiseConfig, NoiseKind, ParameterGrid, SystemSpec};
    use crate::sde::{run_ensemble, Scheme, TrajectorySample};

    fn set(beta_index: usize, terminals: &[&[f64]]) -> TrialSet {
        TrialSet {
            beta_index,
            beta: vec![0.0],
            samples: terminals
                .iter()
                .map(|x| TrajectorySample {
                    beta: vec![0.0],
                    times: vec![0.0, 1.0],
                    states: vec![],
                    terminal: DVector::from_column_slice(x),
                    jump_times: vec![],
                })
                .collect(),
        }
    }

    fn origin_target_system() -> EnsembleSystem {
        builtin_example("bm-oscillator").unwrap().system
    }

    #[test]
    fn hand_arithmetic() {
        let sys = origin_target_system();
        let s = monte_carlo_stats(&sys, &[set(0, &[&[1.0, 0.0], &[-1.0, 0.0]])], &[1.0], &[0.05]).unwrap();
        let b = &s.per_beta[0];
        assert_eq!(b.mean_terminal.as_slice(), &[0.0, 0.0]);
        assert_eq!(b.mse_empirical, 1.0);
        assert_eq!(b.mse_se, 0.0);
        assert_eq!(s.j1, 0.0);
        assert_eq!(s.j2_theory, 0.05);
    }

    #[test]
    fn exact_terminals_give_zero_objectives() {
        let sys = origin_target_system();
        let s = monte_carlo_stats(
            &sys,
            &[
                set(0, &[&[0.0, 0.0], &[0.0, 0.0]]),
                set(1, &[&[0.0, 0.0], &[0.0, 0.0]]),
            ],
            &[0.5, 0.5],
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!((s.j1, s.j2_empirical), (0.0, 0.0));
    }

    #[test]
    fn single_trial_is_rejected() {
        let sys = origin_target_system();
        assert_eq!(
            monte_carlo_stats(&sys, &[set(4, &[&[0.0, 0.0]])], &[1.0], &[0.0]).unwrap_err(),
            StatsError::InsufficientTrials {
                beta_index: 4,
                trials: 1
            }
        );
    }

    #[test]
    fn oscillator_mse_is_frequency_invariant() {
        let p = builtin_example("bm-oscillator").unwrap();
        let vals: Vec<f64> = p
            .parameter_grid
            .points()
            .map(|b| theoretical_mse(&p.system, 1.0, b, DEFAULT_QUAD_STEPS).unwrap())
            .collect();
        for v in &vals {
            assert!((v - 0.05).abs() < 1e-6);
            assert!((v - vals[0]).abs() < 1e-10);
        }
        let p = builtin_example("poisson-oscillator").unwrap();
        let v = theoretical_mse(&p.system, 1.0, &[3.0], DEFAULT_QUAD_STEPS).unwrap();
        assert!((v - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_and_bad_quadrature() {
        let p = builtin_example("scalar-tv").unwrap();
        let quiet = p.system.with_noise(NoiseSpec::None).unwrap();
        assert_eq!(theoretical_mse(&quiet, 2.0, &[1.0], 100).unwrap(), 0.0);
        assert_eq!(
            theoretical_mse(&p.system, 2.0, &[1.0], 8).unwrap_err(),
            StatsError::InvalidQuadrature(8)
        );
    }

    fn scalar_tv_mse_oracle(t: f64, beta: f64, cells: usize) -> f64 {
        // midpoint rule on exp[(2/β)(cos βT − cos βσ)]
        let h = t / cells as f64;
        (0..cells)
            .map(|i| {
                let s = (i as f64 + 0.5) * h;
                let e = if beta == 0.0 {
                    0.0
                } else {
                    2.0 / beta * ((beta * t).cos() - (beta * s).cos())
                };
                e.exp() * h
            })
            .sum()
    }

    #[test]
    fn scalar_tv_mse_against_independent_quadrature() {
        let p = builtin_example("scalar-tv").unwrap();
        for (t, b) in [(2.0, 2.0), (1.0, -3.5), (3.0, 0.0)] {
            let v = theoretical_mse(&p.system, t, &[b], DEFAULT_QUAD_STEPS).unwrap();
            let oracle = scalar_tv_mse_oracle(t, b, 200_000);
            assert!(
                (v - oracle).abs() <= 1e-6 * oracle,
                "T={t} β={b}: {v} vs {oracle}"
            );
        }
        let v = theoretical_mse(&p.system, 2.0, &[2.0], DEFAULT_QUAD_STEPS).unwrap();
        let v2 = theoretical_mse(&p.system, 2.0, &[2.0], 2 * DEFAULT_QUAD_STEPS).unwrap();
        assert!((v - v2).abs() <= 1e-6 * v);
        let ts: Vec<f64> = (0..=20).map(|i| 1.0 + 0.1 * i as f64).collect();
        let cs: Vec<f64> = ts
            .iter()
            .map(|&t| theoretical_mse(&p.system, t, &[2.0], 400).unwrap())
            .collect();
        assert!(cs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn quadrature_is_converged_on_presets() {
        for name in crate::model::PRESET_NAMES {
            let p = builtin_example(name).unwrap();
            let horizon = p.system.horizon();
            let (lo, hi) = p.system.bounds()[0];
            for beta in [lo, 0.5 * (lo + hi), hi] {
                let v = theoretical_mse(&p.system, horizon, &[beta], DEFAULT_QUAD_STEPS).unwrap();
                let v2 = theoretical_mse(&p.system, horizon, &[beta], 2 * DEFAULT_QUAD_STEPS).unwrap();
                assert!((v - v2).abs() <= 1e-6 * v, "{name} β={beta}: {v} vs {v2}");
            }
        }
    }

    #[test]
    fn uncontrolled_poisson_mean_includes_drift() {
        let sys = EnsembleSystem::from_spec(&SystemSpec {
            name: None,
            bounds: vec![[0.0, 1.0]],
            horizon: 1.0,
            a: vec![vec!["-1".into()]],
            b: vec![vec!["1".into()]],
            g: vec![vec!["1".into()]],
            x0: vec!["2".into()],
            xf: vec!["0".into()],
            noise: NoiseConfig {
                kind: NoiseKind::Poisson,
                intensities: vec![3.0],
            },
        })
        .unwrap();
        let m = uncontrolled_mean(&sys, 1.0, &[0.5], 1000).unwrap();
        let exact = 2.0 * (-1f64).exp() + 3.0 * (1.0 - (-1f64).exp());
        assert!((m[0] - exact).abs() < 1e-6);
    }

    #[test]
    fn fubini_and_variance_decomposition() {
        let p = builtin_example("bm-oscillator").unwrap();
        let pgrid = ParameterGrid::uniform(p.system.bounds(), 4).unwrap();
        let cfg = SimulationConfig {
            seed: 3,
            trials: 50,
            ..SimulationConfig::new(Scheme::EulerMaruyama, 0.01)
        };
        let sets = run_ensemble(&p.system, None, &pgrid, None, &cfg).unwrap();
        let theory = vec![0.05; 4];
        let s = monte_carlo_stats(&p.system, &sets, pgrid.weights(), &theory).unwrap();
        let pooled: f64 = sets
            .iter()
            .zip(pgrid.weights())
            .flat_map(|(set, w)| {
                set.terminals()
                    .map(move |x| w / set.samples.len() as f64 * x.norm_squared())
            })
            .sum();
        assert!((pooled - s.j2_empirical).abs() <= 1e-12 * s.j2_empirical);
        assert!(s.j2_empirical >= s.j1 * s.j1);
        let cov = terminal_covariance(&sets[0]).unwrap();
        assert!((cov.trace().sqrt() / (50f64).sqrt() - s.per_beta[0].mean_norm_se).abs() < 1e-12);
    }

    #[test]
    fn sweep_rows() {
        let p = builtin_example("scalar-tv").unwrap();
        let quiet = p.system.with_noise(NoiseSpec::None).unwrap();
        let cfg = SimulationConfig {
            trials: 2,
            ..SimulationConfig::new(Scheme::Rk4, 0.01)
        };
        let rows = mse_sweep(
            &quiet,
            None,
            &Sweep::Horizon {
                beta: vec![2.0],
                horizons: vec![1.0, 1.5, 2.0],
            },
            &cfg,
            64,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mse_theory == 0.0 && r.mse_se == 0.0));
        assert_eq!(rows[1].value, 1.5);
    }
}
