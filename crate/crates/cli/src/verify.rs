//! `verify`: run the full pipeline and compare against the closed-form
//! quantities known for each preset.

use std::fmt;
use std::time::Instant;

use ensemble_control::rng::trial_rng;
use ensemble_control::sde::{run_ensemble, Scheme, SimulationConfig};
use ensemble_control::stats::{mse_sweep, theoretical_mse, uncontrolled_mean, EnsembleStatistics, Sweep};
use ensemble_control::transition::{transition_forward, TransitionMethod};
use ensemble_control::Synthesis;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, fmt_f64};
use crate::pipeline::{self, Resolved};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    AtLeast,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub limit: f64,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: Relation::AtMost,
            limit,
        }
    }

    pub fn at_least(name: &str, measured: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: Relation::AtLeast,
            limit,
        }
    }

    pub fn passed(&self) -> bool {
        match self.relation {
            Relation::AtMost => self.measured <= self.limit,
            Relation::AtLeast => self.measured >= self.limit,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: measured {} {} {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            fmt_f64(self.measured),
            self.relation,
            fmt_f64(self.limit)
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }

    pub fn all_passed(&self) -> bool {
        self.failures() == 0
    }
}

/// `|x| / se`, with `0/0 = 0`.
fn z(x: f64, se: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs() / se
    }
}

fn worst(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

/// Above this many simulated parameter values the 3-SE checks report the
/// fraction of points inside the band instead of the worst point.
const MAX_POINTWISE: usize = 21;
const MIN_FRACTION: f64 = 0.95;

fn monte_carlo_checks(
    res: &Resolved,
    synthesis: &Synthesis,
    stats: &EnsembleStatistics,
    componentwise_mean: bool,
    out: &mut Vec<Check>,
) {
    // Componentwise against X_F plus the offset the truncation leaves behind.
    let offsets = synthesis.predicted_terminal_offsets();
    let mut mse_z = Vec::new();
    let mut mean_z = Vec::new();
    let mut norm_z = Vec::new();
    for b in &stats.per_beta {
        mse_z.push(z(b.mse_empirical - b.mse_theory, b.mse_se));
        let xf = res
            .system
            .target_state(&b.beta)
            .expect("validated during synthesis");
        let predicted = &offsets[b.beta_index];
        let diff = &b.mean_terminal - &xf - predicted;
        mean_z.push(worst((0..diff.len()).map(|c| z(diff[c], b.mean_se[c]))));
        norm_z.push(z(b.mean_error(&xf) - predicted.norm(), b.mean_norm_se));
    }
    let mut push = |name: &str, zs: &[f64]| {
        if zs.len() > MAX_POINTWISE {
            let inside = zs.iter().filter(|&&v| v <= 3.0).count() as f64 / zs.len() as f64;
            out.push(Check::at_least(
                &format!("{name}_fraction_within_3se"),
                inside,
                MIN_FRACTION,
            ));
        } else {
            out.push(Check::at_most(
                &format!("{name}_within_3se"),
                worst(zs.iter().copied()),
                3.0,
            ));
        }
    };
    push("mse", &mse_z);
    if componentwise_mean {
        push("mean", &mean_z);
    }
    push("mean_norm", &norm_z);
    out.push(Check::at_least(
        "j2_minus_j1_squared",
        stats.j2_empirical - stats.j1 * stats.j1,
        -3.0 * stats.j2_se,
    ));
}

fn deterministic_check(res: &Resolved, synthesis: &Synthesis, limit: f64) -> Result<Check, CliError> {
    let cfg = SimulationConfig {
        scheme: Scheme::Rk4,
        trials: 1,
        record_every: None,
        ..res.simulation
    };
    let quiet = run_ensemble(&res.system, Some(&synthesis.control), &res.pgrid, None, &cfg)?;
    let mut err = 0.0f64;
    for set in &quiet {
        let xf = res.system.target_state(&set.beta)?;
        err = err.max((&set.samples[0].terminal - xf).norm());
    }
    Ok(Check::at_most("deterministic_terminal_error", err, limit))
}

fn theory_checks(res: &Resolved, value: f64, out: &mut Vec<Check>) -> Result<(), CliError> {
    let all = res
        .pgrid
        .points()
        .map(|b| theoretical_mse(&res.system, res.system.horizon(), b, res.quad_steps))
        .collect::<Result<Vec<_>, _>>()?;
    out.push(Check::at_most(
        "theory_mse_value",
        worst(all.iter().map(|v| (v - value).abs())),
        1e-6,
    ));
    let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    out.push(Check::at_most("theory_mse_invariance", hi - lo, 1e-10));
    Ok(())
}

fn drift_check(res: &Resolved, out: &mut Vec<Check>) -> Result<(), CliError> {
    let sets = run_ensemble(
        &res.system,
        None,
        &res.pgrid,
        Some(&res.beta_indices),
        &res.simulation,
    )?;
    let mut worst_z = 0.0f64;
    for set in &sets {
        let expected = uncontrolled_mean(&res.system, res.system.horizon(), &set.beta, res.quad_steps)?;
        let n = set.samples.len() as f64;
        for c in 0..expected.len() {
            let xs: Vec<f64> = set.terminals().map(|x| x[c]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            worst_z = worst_z.max(z(mean - expected[c], (var / n).sqrt()));
        }
    }
    out.push(Check::at_most("uncontrolled_mean_within_3se", worst_z, 3.0));
    Ok(())
}

fn scalar_tv_checks(res: &Resolved, synthesis: &Synthesis, out: &mut Vec<Check>) -> Result<(), CliError> {
    let closed = |t: f64, t0: f64, b: f64| {
        if b == 0.0 {
            1.0
        } else {
            ((b * t).cos() / b - (b * t0).cos() / b).exp()
        }
    };
    let mut rng = trial_rng(res.simulation.seed, u32::MAX as usize, 0);
    let mut err = 0.0f64;
    for _ in 0..100 {
        let t: f64 = rng.random_range(0.0..3.0);
        let t0: f64 = rng.random_range(0.0..3.0);
        let b: f64 = rng.random_range(-5.0..5.0);
        let phi = transition_forward(&res.system, t, t0, &[b], 3000, TransitionMethod::Rk4)?;
        err = err.max((phi[(0, 0)] - closed(t, t0, b)).abs());
    }
    out.push(Check::at_most("transition_closed_form", err, 1e-6));

    let sweep_cfg = SimulationConfig {
        record_every: None,
        ..res.simulation
    };
    let betas: Vec<Vec<f64>> = (0..=20).map(|i| vec![-5.0 + 0.5 * i as f64]).collect();
    let by_beta = mse_sweep(
        &res.system,
        Some(&synthesis.control),
        &Sweep::Beta { horizon: 2.0, betas },
        &sweep_cfg,
        res.quad_steps,
    )?;
    let horizons: Vec<f64> = (0..=20).map(|i| 1.0 + 0.1 * i as f64).collect();
    let by_t = mse_sweep(
        &res.system,
        Some(&synthesis.control),
        &Sweep::Horizon {
            beta: vec![2.0],
            horizons,
        },
        &sweep_cfg,
        res.quad_steps,
    )?;
    output::write_sweep(&res.out("sweep_beta.csv"), "beta", &by_beta)?;
    output::write_sweep(&res.out("sweep_horizon.csv"), "T", &by_t)?;
    let within = |rows: &[ensemble_control::stats::SweepRow]| {
        rows.iter()
            .filter(|r| z(r.mse_empirical - r.mse_theory, r.mse_se) <= 3.0)
            .count() as f64
            / rows.len() as f64
    };
    out.push(Check::at_least("sweep_beta_within_3se", within(&by_beta), 0.95));
    out.push(Check::at_least("sweep_horizon_within_3se", within(&by_t), 0.95));
    let dips = by_t
        .windows(2)
        .filter(|w| w[1].mse_theory < w[0].mse_theory)
        .count();
    out.push(Check::at_most("theory_mse_monotone_in_t", dips as f64, 0.0));
    Ok(())
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub resolved: Resolved,
    pub report: VerifyReport,
}

/// Full pipeline plus checks; writes every artifact and `verify.csv`.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyOutcome, CliError> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.simulation.stats = Some(true);
    let res = pipeline::resolve(&cfg)?;
    let synthesis = pipeline::run_synthesis(&res)?;
    let mut results = pipeline::synthesis_results(&res, &synthesis);
    let (_, stats) = pipeline::simulate_and_summarize(&res, Some(&synthesis.control))?;
    let stats = stats.expect("statistics enabled");

    let mut checks = Vec::new();
    let preset = res.preset.as_ref().map(|p| p.name);
    match preset {
        Some("bm-oscillator") => {
            checks.push(deterministic_check(&res, &synthesis, 2e-3)?);
            theory_checks(&res, 0.05, &mut checks)?;
        }
        Some("poisson-oscillator") => {
            theory_checks(&res, 0.1, &mut checks)?;
            drift_check(&res, &mut checks)?;
        }
        Some("scalar-tv") => scalar_tv_checks(&res, &synthesis, &mut checks)?,
        _ => {}
    }
    // The transport ensemble is judged on the norm of the mean only.
    let componentwise = preset != Some("quantum-transport");
    monte_carlo_checks(&res, &synthesis, &stats, componentwise, &mut checks);
    let report = VerifyReport { checks };

    let header = ["check", "measured", "relation", "limit", "status"].map(String::from);
    let rows = report.checks.iter().map(|c| {
        vec![
            c.name.clone(),
            fmt_f64(c.measured),
            c.relation.to_string(),
            fmt_f64(c.limit),
            if c.passed() { "PASS" } else { "FAIL" }.to_string(),
        ]
    });
    output::write_csv(&res.out("verify.csv"), &header, rows)?;

    results.command = Some("verify".into());
    results.j1 = Some(stats.j1);
    results.j2_emp = Some(stats.j2_empirical);
    results.j2_theory = Some(stats.j2_theory);
    results.verify_passed = Some(report.all_passed());
    if preset == Some("scalar-tv") {
        results.control_extension = Some("zero beyond the synthesis horizon".into());
    }
    pipeline::write_plot(&res, true, true, preset == Some("scalar-tv"))?;
    pipeline::write_meta(&res, results, started)?;
    Ok(VerifyOutcome {
        resolved: res,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_lines() {
        let c = Check::at_most("x", 1.5, 3.0);
        assert!(c.passed());
        assert_eq!(c.to_string(), "PASS x: measured 1.5 <= 3");
        let c = Check::at_least("frac", 0.9, 0.95);
        assert!(!c.passed());
        assert!(c.to_string().starts_with("FAIL frac"));
        assert_eq!(z(0.0, 0.0), 0.0);
        assert_eq!(z(-1.0, 0.5), 2.0);
    }
}
