//! State transition matrices `Φ(t, t0, β)` of `dX/dt = A(t,β) X`.
//!
//! Forward transitions integrate `dΦ/dt = A Φ`. The backward factors
//! `Φ(0, t_k, β)` needed by the input-to-state kernel come from the adjoint
//! equation `dΨ/dt = -Ψ A`, integrated forward from `Ψ(0) = I`, so no matrix
//! is ever inverted. When `A` does not vary in time at the given `β`, both
//! are replaced by products of matrix exponentials.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{EnsembleSystem, ModelError, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMethod {
    /// Matrix exponential when `A` is time-invariant at this β, RK4 otherwise.
    #[default]
    Auto,
    Rk4,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionOptions {
    /// RK4 steps per time-grid interval.
    pub substeps: usize,
    pub method: TransitionMethod,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        TransitionOptions {
            substeps: 1,
            method: TransitionMethod::Auto,
        }
    }
}

/// `Φ(0, t_k, β)` for every node of a time grid, plus `Φ(T, 0, β)`.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub beta: Vec<f64>,
    pub grid: TimeGrid,
    pub phi_0t: Vec<DMatrix<f64>>,
    pub phi_t0: DMatrix<f64>,
}

impl TransitionTable {
    /// `Φ(0, T, β)`.
    pub fn phi_0_end(&self) -> &DMatrix<f64> {
        &self.phi_0t[self.grid.steps()]
    }
}

/// Whether `A(·, β)` is constant, judged by sampling three distinct times.
pub fn is_time_invariant(sys: &EnsembleSystem, beta: &[f64]) -> Result<bool, ModelError> {
    let horizon = sys.horizon();
    let a0 = sys.drift_matrix().eval_checked("A", 0.0, beta)?;
    for t in [0.381_966_011_250_105_1 * horizon, horizon] {
        let a = sys.drift_matrix().eval_checked("A", t, beta)?;
        if a.iter().zip(a0.iter()).any(|(x, y)| (x - y).abs() > 1e-14) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn use_exponential(sys: &EnsembleSystem, beta: &[f64], method: TransitionMethod) -> Result<bool, ModelError> {
    match method {
        TransitionMethod::Rk4 => Ok(false),
        TransitionMethod::Exponential => Ok(true),
        TransitionMethod::Auto => is_time_invariant(sys, beta),
    }
}

fn drift(sys: &EnsembleSystem, t: f64, beta: &[f64]) -> Result<DMatrix<f64>, ModelError> {
    sys.drift_matrix().eval_checked("A", t, beta)
}

// One RK4 step of dΦ/dt = A(t)Φ; `h` may be negative.
fn rk4_forward_step(
    sys: &EnsembleSystem,
    phi: &DMatrix<f64>,
    t: f64,
    h: f64,
    beta: &[f64],
) -> Result<DMatrix<f64>, ModelError> {
    let a0 = drift(sys, t, beta)?;
    let am = drift(sys, t + 0.5 * h, beta)?;
    let a1 = drift(sys, t + h, beta)?;
    let k1 = &a0 * phi;
    let k2 = &am * (phi + &k1 * (0.5 * h));
    let k3 = &am * (phi + &k2 * (0.5 * h));
    let k4 = &a1 * (phi + &k3 * h);
    Ok(phi + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

// One RK4 step of dΨ/dt = -Ψ A(t); `h` may be negative.
fn rk4_adjoint_step(
    sys: &EnsembleSystem,
    psi: &DMatrix<f64>,
    t: f64,
    h: f64,
    beta: &[f64],
) -> Result<DMatrix<f64>, ModelError> {
    let a0 = drift(sys, t, beta)?;
    let am = drift(sys, t + 0.5 * h, beta)?;
    let a1 = drift(sys, t + h, beta)?;
    let k1 = -(psi * &a0);
    let k2 = -((psi + &k1 * (0.5 * h)) * &am);
    let k3 = -((psi + &k2 * (0.5 * h)) * &am);
    let k4 = -((psi + &k3 * h) * &a1);
    Ok(psi + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// `Φ(t1, t0, β)` using `steps` uniform RK4 steps (backward when `t1 < t0`),
/// or the matrix exponential `exp((t1 - t0) A)` for time-invariant `A`.
pub fn transition_forward(
    sys: &EnsembleSystem,
    t1: f64,
    t0: f64,
    beta: &[f64],
    steps: usize,
    method: TransitionMethod,
) -> Result<DMatrix<f64>, ModelError> {
    let n = sys.state_dim();
    if t1 == t0 {
        return Ok(DMatrix::identity(n, n));
    }
    if use_exponential(sys, beta, method)? {
        let a = drift(sys, t0, beta)?;
        return Ok((a * (t1 - t0)).exp());
    }
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut phi = DMatrix::identity(n, n);
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        phi = rk4_forward_step(sys, &phi, t, h, beta)?;
    }
    Ok(phi)
}

/// Backward factors `Φ(0, t_k, β)` on `grid`, built incrementally in O(N)
/// matrix steps, and the forward map `Φ(T, 0, β)`.
pub fn transition_table(
    sys: &EnsembleSystem,
    grid: &TimeGrid,
    beta: &[f64],
    opts: &TransitionOptions,
) -> Result<TransitionTable, ModelError> {
    let n = sys.state_dim();
    let steps = grid.steps();
    let substeps = opts.substeps.max(1);
    let mut phi_0t = Vec::with_capacity(steps + 1);
    phi_0t.push(DMatrix::identity(n, n));
    let phi_t0;
    if use_exponential(sys, beta, opts.method)? {
        let a = drift(sys, 0.0, beta)?;
        let back = (&a * -grid.step()).exp();
        for k in 1..=steps {
            let next = &phi_0t[k - 1] * &back;
            phi_0t.push(next);
        }
        phi_t0 = (a * grid.horizon()).exp();
    } else {
        let h = grid.step() / substeps as f64;
        for k in 1..=steps {
            let mut psi = phi_0t[k - 1].clone();
            let start = grid.node(k - 1);
            for s in 0..substeps {
                psi = rk4_adjoint_step(sys, &psi, start + s as f64 * h, h, beta)?;
            }
            phi_0t.push(psi);
        }
        phi_t0 = transition_forward(
            sys,
            grid.horizon(),
            0.0,
            beta,
            steps * substeps,
            TransitionMethod::Rk4,
        )?;
    }
    Ok(TransitionTable {
        beta: beta.to_vec(),
        grid: *grid,
        phi_0t,
        phi_t0,
    })
}

/// `Φ(t_end, σ_i, β)` for `σ_i = i·t_end/steps`, `i = 0..=steps`, obtained by
/// integrating `d/dσ Φ(t_end, σ) = -Φ(t_end, σ) A(σ)` backward from `σ = t_end`.
pub fn transitions_to_end(
    sys: &EnsembleSystem,
    t_end: f64,
    beta: &[f64],
    steps: usize,
    method: TransitionMethod,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let n = sys.state_dim();
    let steps = steps.max(1);
    let h = t_end / steps as f64;
    let mut out = vec![DMatrix::identity(n, n); steps + 1];
    if use_exponential(sys, beta, method)? {
        let step = (drift(sys, 0.0, beta)? * h).exp();
        for i in (0..steps).rev() {
            out[i] = &out[i + 1] * &step;
        }
    } else {
        for i in (0..steps).rev() {
            let sigma = if i + 1 == steps { t_end } else { (i + 1) as f64 * h };
            out[i] = rk4_adjoint_step(sys, &out[i + 1], sigma, -h, beta)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_example;
    use proptest::prelude::*;

    fn rotation(angle: f64) -> DMatrix<f64> {
        let (s, c) = angle.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    fn scalar_tv_closed_form(t: f64, t0: f64, beta: f64) -> f64 {
        if beta == 0.0 {
            1.0
        } else {
            ((beta * t).cos() / beta - (beta * t0).cos() / beta).exp()
        }
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn oscillator_transition_is_a_rotation() {
        let sys = builtin_example("bm-oscillator").unwrap().system;
        let rk = transition_forward(&sys, 0.37, 0.0, &[7.0], 2000, TransitionMethod::Rk4).unwrap();
        assert!(max_abs_diff(&rk, &rotation(7.0 * 0.37)) <= 1e-10);
        let ex = transition_forward(&sys, 0.37, 0.0, &[7.0], 1, TransitionMethod::Auto).unwrap();
        assert!(max_abs_diff(&ex, &rotation(7.0 * 0.37)) <= 1e-13);
        assert!(max_abs_diff(&ex, &rk) <= 1e-10);
    }

    #[test]
    fn zero_elapsed_time_is_identity() {
        for name in crate::model::PRESET_NAMES {
            let sys = builtin_example(name).unwrap().system;
            let n = sys.state_dim();
            let beta = [sys.bounds()[0].1];
            let phi = transition_forward(&sys, 0.5, 0.5, &beta, 10, TransitionMethod::Rk4).unwrap();
            assert_eq!(phi, DMatrix::identity(n, n));
        }
    }

    #[test]
    fn scalar_tv_matches_closed_form_forward_and_backward() {
        let sys = builtin_example("scalar-tv").unwrap().system;
        for &(t, t0, b) in &[(0.8, 0.1, 5.0), (0.2, 0.9, -3.0), (1.0, 0.0, 0.0)] {
            let phi = transition_forward(&sys, t, t0, &[b], 1000, TransitionMethod::Auto).unwrap();
            assert!((phi[(0, 0)] - scalar_tv_closed_form(t, t0, b)).abs() <= 1e-12);
        }
        assert!(!is_time_invariant(&sys, &[5.0]).unwrap());
        assert!(is_time_invariant(&sys, &[0.0]).unwrap());
    }

    #[test]
    fn oscillator_table_rotates_backward() {
        let sys = builtin_example("bm-oscillator").unwrap().system;
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let table = transition_table(&sys, &grid, &[7.0], &TransitionOptions::default()).unwrap();
        assert_eq!(table.phi_0t[0], DMatrix::identity(2, 2));
        for k in (0..=400).step_by(37) {
            assert!(max_abs_diff(&table.phi_0t[k], &rotation(-7.0 * grid.node(k))) <= 1e-12);
        }
        let rk = transition_table(
            &sys,
            &grid,
            &[7.0],
            &TransitionOptions {
                substeps: 4,
                method: TransitionMethod::Rk4,
            },
        )
        .unwrap();
        for k in (0..=400).step_by(41) {
            assert!(max_abs_diff(&rk.phi_0t[k], &rotation(-7.0 * grid.node(k))) <= 1e-10);
        }
        assert!(max_abs_diff(&rk.phi_t0, &rotation(7.0)) <= 1e-10);
    }

    #[test]
    fn table_inverts_forward_transition() {
        let sys = builtin_example("quantum-transport").unwrap().system;
        let grid = TimeGrid::new(10.0, 2000).unwrap();
        let table = transition_table(
            &sys,
            &grid,
            &[0.9],
            &TransitionOptions {
                substeps: 1,
                method: TransitionMethod::Rk4,
            },
        )
        .unwrap();
        for k in [1, 250, 999, 2000] {
            let fwd =
                transition_forward(&sys, grid.node(k), 0.0, &[0.9], 4 * k, TransitionMethod::Rk4).unwrap();
            let prod = &table.phi_0t[k] * fwd;
            assert!(max_abs_diff(&prod, &DMatrix::identity(3, 3)) <= 1e-8);
        }
    }

    #[test]
    fn scalar_tv_table_matches_closed_form() {
        let sys = builtin_example("scalar-tv").unwrap().system;
        let grid = TimeGrid::new(1.0, 20_000).unwrap();
        let table = transition_table(&sys, &grid, &[5.0], &TransitionOptions::default()).unwrap();
        let worst = (0..=20_000)
            .map(|k| (table.phi_0t[k][(0, 0)] - scalar_tv_closed_form(0.0, grid.node(k), 5.0)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{worst}");
        assert!((table.phi_t0[(0, 0)] - scalar_tv_closed_form(1.0, 0.0, 5.0)).abs() <= 1e-10);
    }

    #[test]
    fn transitions_to_end_agree_with_forward() {
        let sys = builtin_example("scalar-tv").unwrap().system;
        let back = transitions_to_end(&sys, 2.0, &[2.0], 400, TransitionMethod::Auto).unwrap();
        assert_eq!(back[400][(0, 0)], 1.0);
        for i in [0, 100, 399] {
            let sigma = i as f64 * 2.0 / 400.0;
            assert!((back[i][(0, 0)] - scalar_tv_closed_form(2.0, sigma, 2.0)).abs() <= 1e-9);
        }
        let osc = builtin_example("bm-oscillator").unwrap().system;
        let back = transitions_to_end(&osc, 1.0, &[-3.0], 100, TransitionMethod::Auto).unwrap();
        assert!(max_abs_diff(&back[25], &rotation(-3.0 * 0.75)) <= 1e-13);
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let sys = builtin_example("scalar-tv").unwrap().system;
        let exact = scalar_tv_closed_form(1.0, 0.0, 4.0);
        let errs: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&steps| {
                let phi = transition_forward(&sys, 1.0, 0.0, &[4.0], steps, TransitionMethod::Rk4).unwrap();
                (phi[(0, 0)] - exact).abs()
            })
            .collect();
        for pair in errs.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!(order > 3.5, "{errs:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn transitions_compose(
            preset in 0usize..4,
            frac in 0.0f64..1.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            c in 0.0f64..1.0,
        ) {
            let p = builtin_example(crate::model::PRESET_NAMES[preset]).unwrap();
            let sys = p.system;
            let (lo, hi) = sys.bounds()[0];
            let beta = [lo + frac * (hi - lo)];
            let horizon = sys.horizon();
            let (t0, t1, t2) = (a * horizon, b * horizon, c * horizon);
            let steps = |x: f64, y: f64| ((x - y).abs() / horizon * 2000.0).ceil() as usize + 1;
            let method = TransitionMethod::Rk4;
            let p10 = transition_forward(&sys, t1, t0, &beta, steps(t1, t0), method).unwrap();
            let p21 = transition_forward(&sys, t2, t1, &beta, steps(t2, t1), method).unwrap();
            let p20 = transition_forward(&sys, t2, t0, &beta, steps(t2, t0), method).unwrap();
            let scale = 1.0 + p20.abs().max();
            prop_assert!(max_abs_diff(&(&p21 * &p10), &p20) <= 1e-8 * scale);
            let back = transition_forward(&sys, t0, t1, &beta, steps(t1, t0), method).unwrap();
            let n = sys.state_dim();
            prop_assert!(max_abs_diff(&(&back * &p10), &DMatrix::identity(n, n)) <= 1e-8 * scale);
        }
    }
}
