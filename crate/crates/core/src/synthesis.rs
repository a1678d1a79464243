//! Discretized input-to-state operator and minimum-norm ensemble control.
//!
//! The steering condition `∫₀ᵀ Φ(0,σ,β) B(σ,β) u(σ) dσ = Φ(0,T,β) X_F(β) − X_0(β)`
//! is sampled at parameter points `β_j` and approximated with a right-endpoint
//! rectangle rule on the time grid, giving `W ĝ = ξ̂` with
//! `W_{jk} = δ Φ(0,t_k,β_j) B(t_k,β_j)` (rows grouped by `β_j`, columns by
//! `t_k`, `k = 1..N`). The control is the truncated singular series
//! `ĝ* = Σ_{j ≤ mq} (ξ̂ᵀū_j / s_j) v̄_j`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{EnsembleSystem, ModelError, ParameterGrid, TimeGrid};
use crate::transition::{transition_table, TransitionOptions, TransitionTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error(
        "overdetermined grid: n*P = {rows} exceeds m*N = {cols}; \
         choose grids with n*P <= m*N"
    )]
    OverdeterminedGrid { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operator contains non-finite entries")]
    NonFiniteOperator,
    #[error("singular value decomposition did not converge")]
    ConvergenceFailure,
    #[error(
        "no usable rank: condition ratio {ratio:.3e} of the first {m} singular values \
         is not below {max_condition:.3e}"
    )]
    NoUsableRank {
        ratio: f64,
        m: usize,
        max_condition: f64,
    },
    #[error("truncation rank not selected")]
    RankNotSelected,
    #[error("invalid truncation rank: {0}")]
    InvalidRank(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `W`, stacked block row by block row.
pub fn assemble_operator(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    pgrid: &ParameterGrid,
    tables: &[TransitionTable],
) -> Result<DMatrix<f64>, SynthesisError> {
    check_shapes(sys, tgrid, pgrid)?;
    if tables.len() != pgrid.len() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "{} transition tables for {} parameter samples",
            tables.len(),
            pgrid.len()
        )));
    }
    let n = sys.state_dim();
    let mut w = DMatrix::zeros(n * pgrid.len(), sys.input_dim() * tgrid.steps());
    for (j, table) in tables.iter().enumerate() {
        let block = block_row(sys, tgrid, table)?;
        w.rows_mut(j * n, n).copy_from(&block);
    }
    Ok(w)
}

fn check_shapes(sys: &EnsembleSystem, tgrid: &TimeGrid, pgrid: &ParameterGrid) -> Result<(), SynthesisError> {
    let rows = sys.state_dim() * pgrid.len();
    let cols = sys.input_dim() * tgrid.steps();
    if rows > cols {
        return Err(SynthesisError::OverdeterminedGrid { rows, cols });
    }
    if pgrid.dim() != sys.param_dim() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "parameter grid has dimension {}, system has {}",
            pgrid.dim(),
            sys.param_dim()
        )));
    }
    if tgrid.horizon() != sys.horizon() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "time grid horizon {} differs from system horizon {}",
            tgrid.horizon(),
            sys.horizon()
        )));
    }
    Ok(())
}

// n × mN block row for one parameter sample.
fn block_row(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    table: &TransitionTable,
) -> Result<DMatrix<f64>, SynthesisError> {
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let delta = tgrid.step();
    let mut block = DMatrix::zeros(n, m * tgrid.steps());
    for k in 1..=tgrid.steps() {
        let b = sys.input_matrix().eval_checked("B", tgrid.node(k), &table.beta)?;
        let entry = &table.phi_0t[k] * b * delta;
        block.columns_mut((k - 1) * m, m).copy_from(&entry);
    }
    Ok(block)
}

/// Right-hand side `ξ̂` of `W ĝ = ξ̂`, one `n`-block per parameter sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub values: DVector<f64>,
    /// Expected jump contribution `Σ_k δ Φ(0,t_k,β_j) G(t_k,β_j) λ` already
    /// subtracted from `values` (Poisson noise only).
    pub drift: Option<DVector<f64>>,
    /// Parameter quadrature weights, for norms over `K`.
    pub weights: Vec<f64>,
    pub state_dim: usize,
}

impl TargetVector {
    pub fn block(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.values.rows(j * self.state_dim, self.state_dim)
    }
}

/// Mean jump contribution for one parameter sample, using the same rectangle
/// rule as `W`.
pub fn poisson_drift(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    table: &TransitionTable,
) -> Result<Option<DVector<f64>>, SynthesisError> {
    let Some(lambda) = sys.noise().intensities() else {
        return Ok(None);
    };
    let lambda = DVector::from_column_slice(lambda);
    let delta = tgrid.step();
    let mut drift = DVector::zeros(sys.state_dim());
    for k in 1..=tgrid.steps() {
        let g = sys.noise_matrix().eval_checked("G", tgrid.node(k), &table.beta)?;
        drift += &table.phi_0t[k] * (g * &lambda) * delta;
    }
    Ok(Some(drift))
}

fn target_block(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    table: &TransitionTable,
) -> Result<(DVector<f64>, Option<DVector<f64>>), SynthesisError> {
    let x0 = sys.initial_state(&table.beta)?;
    let xf = sys.target_state(&table.beta)?;
    let mut xi = table.phi_0_end() * xf - x0;
    let drift = poisson_drift(sys, tgrid, table)?;
    if let Some(d) = &drift {
        xi -= d;
    }
    Ok((xi, drift))
}

pub fn target_vector(
    sys: &EnsembleSystem,
    pgrid: &ParameterGrid,
    tables: &[TransitionTable],
    tgrid: &TimeGrid,
) -> Result<TargetVector, SynthesisError> {
    if tables.len() != pgrid.len() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "{} transition tables for {} parameter samples",
            tables.len(),
            pgrid.len()
        )));
    }
    let blocks = tables
        .iter()
        .map(|t| target_block(sys, tgrid, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(stack_targets(sys.state_dim(), pgrid, blocks))
}

fn stack_targets(
    n: usize,
    pgrid: &ParameterGrid,
    blocks: Vec<(DVector<f64>, Option<DVector<f64>>)>,
) -> TargetVector {
    let mut values = DVector::zeros(n * blocks.len());
    let poisson = blocks.first().is_some_and(|b| b.1.is_some());
    let mut drift = poisson.then(|| DVector::zeros(n * blocks.len()));
    for (j, (xi, d)) in blocks.into_iter().enumerate() {
        values.rows_mut(j * n, n).copy_from(&xi);
        if let (Some(all), Some(d)) = (drift.as_mut(), d) {
            all.rows_mut(j * n, n).copy_from(&d);
        }
    }
    TargetVector {
        values,
        drift,
        weights: pgrid.weights().to_vec(),
        state_dim: n,
    }
}

/// Thin SVD restricted to the numerical rank `r`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

type Triples = (DMatrix<f64>, Vec<f64>, DMatrix<f64>);

fn faer_svd(a: &DMatrix<f64>) -> Result<Triples, SynthesisError> {
    let (rows, cols) = a.shape();
    let dec = faer::MatRef::from_column_major_slice(a.as_slice(), rows, cols)
        .thin_svd()
        .map_err(|_| SynthesisError::ConvergenceFailure)?;
    let (u, v) = (dec.U(), dec.V());
    let values = dec.S().column_vector();
    let k = values.nrows();
    Ok((
        DMatrix::from_fn(rows, k, |i, j| u[(i, j)]),
        (0..k).map(|i| values[i]).collect(),
        DMatrix::from_fn(cols, k, |i, j| v[(i, j)]),
    ))
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Thin SVD restricted to the numerical rank `s_j > s_1·max(rows,cols)·ε`.
///
/// The kept right singular subspace from faer's SVD is refined by a
/// Rayleigh–Ritz step: with `W V₀ = Ũ Σ Zᵀ` (a small SVD), `U = Ũ`,
/// `V = V₀ Z`. Householder errors on the long side grow like `max(rows,cols)·ε`
/// and would otherwise dominate `‖W V − U Σ‖` for triples near the cutoff.
///
/// Singular values are sorted nonincreasing and each `U` column is signed so
/// its largest-magnitude entry is positive.
pub fn svd(w: &DMatrix<f64>) -> Result<Svd, SynthesisError> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(SynthesisError::NonFiniteOperator);
    }
    let (rows, cols) = w.shape();
    if rows == 0 || cols == 0 {
        return Err(SynthesisError::DimensionMismatch("empty operator".into()));
    }
    let (_, values, v_full) = faer_svd(w)?;
    let order = descending(&values);
    let s1 = order.first().map_or(0.0, |&i| values[i]);
    let tol = s1 * rows.max(cols) as f64 * f64::EPSILON;
    let kept: Vec<usize> = order.into_iter().filter(|&i| values[i] > tol).collect();
    if kept.is_empty() {
        return Ok(Svd {
            u: DMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        });
    }
    let v0 = v_full.select_columns(&kept);
    let (u_small, values, z) = faer_svd(&(w * &v0))?;
    let v_small = v0 * z;

    let order = descending(&values);
    let mut u = DMatrix::zeros(rows, order.len());
    let mut v = DMatrix::zeros(cols, order.len());
    let mut s = DVector::zeros(order.len());
    for (c, &i) in order.iter().enumerate() {
        s[c] = values[i];
        let ucol = u_small.column(i);
        let pivot = ucol.iamax();
        let sign = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        u.set_column(c, &(ucol * sign));
        v.set_column(c, &(v_small.column(i) * sign));
    }
    Ok(Svd { u, s, v })
}

/// Largest `q ≤ q_max` such that the `m·q` leading singular values satisfy
/// `s_1 / s_{mq} < max_condition`.
pub fn select_rank(s: &[f64], m: usize, max_condition: f64, q_max: usize) -> Result<usize, SynthesisError> {
    if m == 0 {
        return Err(SynthesisError::InvalidRank("input dimension is zero".into()));
    }
    let ratio = |count: usize| s[0] / s[count - 1];
    if q_max == 0 || s.len() < m || ratio(m) >= max_condition {
        let r = if s.len() >= m && !s.is_empty() {
            ratio(m)
        } else {
            f64::INFINITY
        };
        return Err(SynthesisError::NoUsableRank {
            ratio: r,
            m,
            max_condition,
        });
    }
    let mut q = 1;
    while q < q_max && m * (q + 1) <= s.len() && ratio(m * (q + 1)) < max_condition {
        q += 1;
    }
    Ok(q)
}

/// `W` together with its SVD and (once chosen) the truncation count `q`.
#[derive(Debug, Clone)]
pub struct OperatorFactorization {
    pub w: DMatrix<f64>,
    pub svd: Svd,
    pub state_dim: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub steps: usize,
    pub q: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractReport {
    /// `‖W V − U diag(s)‖_F / s_1`
    pub reconstruction: f64,
    pub u_orthonormality: f64,
    pub v_orthonormality: f64,
    pub rank: usize,
}

impl OperatorFactorization {
    pub fn new(
        w: DMatrix<f64>,
        state_dim: usize,
        input_dim: usize,
        samples: usize,
        steps: usize,
    ) -> Result<Self, SynthesisError> {
        if w.shape() != (state_dim * samples, input_dim * steps) {
            return Err(SynthesisError::DimensionMismatch(format!(
                "operator is {}x{}, expected {}x{}",
                w.nrows(),
                w.ncols(),
                state_dim * samples,
                input_dim * steps
            )));
        }
        let svd = svd(&w)?;
        Ok(OperatorFactorization {
            w,
            svd,
            state_dim,
            input_dim,
            samples,
            steps,
            q: None,
        })
    }

    pub fn with_rank(mut self, q: usize) -> Result<Self, SynthesisError> {
        if q == 0 {
            return Err(SynthesisError::InvalidRank("q must be at least 1".into()));
        }
        self.q = Some(q);
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.svd.rank()
    }

    /// Singular triples actually summed: `min(m·q, r)`.
    pub fn used_triples(&self) -> Option<usize> {
        self.q.map(|q| (q * self.input_dim).min(self.rank()))
    }

    /// `s_1 / s_{used}` for the selected rank.
    pub fn condition_ratio(&self) -> Option<f64> {
        let used = self.used_triples()?;
        (used > 0).then(|| self.svd.s[0] / self.svd.s[used - 1])
    }

    pub fn check_contract(&self) -> ContractReport {
        let Svd { u, s, v } = &self.svd;
        let r = s.len();
        let s1 = if r > 0 { s[0] } else { 1.0 };
        let wv = &self.w * v;
        let us = u * DMatrix::from_diagonal(s);
        let eye = DMatrix::<f64>::identity(r, r);
        ContractReport {
            reconstruction: (wv - us).norm() / s1,
            u_orthonormality: (u.tr_mul(u) - &eye).norm(),
            v_orthonormality: (v.tr_mul(v) - eye).norm(),
            rank: r,
        }
    }
}

/// Piecewise-constant control on `(t_{k-1}, t_k]`, `k = 1..N`; zero beyond `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    grid: TimeGrid,
    input_dim: usize,
    values: Vec<f64>,
}

impl ControlSignal {
    pub fn new(grid: TimeGrid, input_dim: usize, values: Vec<f64>) -> Result<Self, SynthesisError> {
        if input_dim == 0 || values.len() != input_dim * grid.steps() {
            return Err(SynthesisError::DimensionMismatch(format!(
                "{} control values for {} steps of dimension {input_dim}",
                values.len(),
                grid.steps()
            )));
        }
        Ok(ControlSignal {
            grid,
            input_dim,
            values,
        })
    }

    pub fn zero(grid: TimeGrid, input_dim: usize) -> Self {
        ControlSignal {
            grid,
            input_dim,
            values: vec![0.0; input_dim * grid.steps()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `û(t_k)` for `k = 1..=N`.
    pub fn value(&self, k: usize) -> &[f64] {
        let m = self.input_dim;
        &self.values[(k - 1) * m..k * m]
    }

    /// Interval index `k` with `t ∈ (t_{k-1}, t_k]`; `t = 0` maps to `k = 1`.
    pub fn interval_at(&self, t: f64) -> Option<usize> {
        if !(0.0..=self.grid.horizon()).contains(&t) {
            return None;
        }
        let k = (t / self.grid.step()).ceil() as usize;
        Some(k.clamp(1, self.grid.steps()))
    }

    pub fn at(&self, t: f64) -> Option<&[f64]> {
        self.interval_at(t).map(|k| self.value(k))
    }

    /// Mean of the control over `[a, b]`, counting zero beyond the horizon.
    pub fn average_into(&self, a: f64, b: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let end = b.min(self.grid.horizon());
        if b <= a || end <= a {
            return;
        }
        let m = self.input_dim;
        let mut i = ((a / self.grid.step()).floor() as usize).min(self.grid.steps() - 1);
        while i < self.grid.steps() {
            let lo = self.grid.node(i).max(a);
            let hi = self.grid.node(i + 1).min(end);
            if lo >= end {
                break;
            }
            if hi > lo {
                let vals = &self.values[i * m..(i + 1) * m];
                for (o, v) in out.iter_mut().zip(vals) {
                    *o += (hi - lo) * v;
                }
            }
            i += 1;
        }
        let scale = 1.0 / (b - a);
        out.iter_mut().for_each(|o| *o *= scale);
    }

    /// Discrete `L₂` norm squared `Σ_k δ ‖û_k‖²`.
    pub fn norm_squared(&self) -> f64 {
        self.grid.step() * self.values.iter().map(|v| v * v).sum::<f64>()
    }
}

fn projection_coefficients(fact: &OperatorFactorization, xi: &TargetVector) -> DVector<f64> {
    fact.svd.u.tr_mul(&xi.values)
}

fn check_target(fact: &OperatorFactorization, xi: &TargetVector) -> Result<(), SynthesisError> {
    if xi.values.len() != fact.w.nrows() {
        return Err(SynthesisError::DimensionMismatch(format!(
            "target has {} entries, operator has {} rows",
            xi.values.len(),
            fact.w.nrows()
        )));
    }
    Ok(())
}

/// Stacked minimum-norm solution `ĝ*` (length `mN`).
pub fn minimum_norm_solution(
    fact: &OperatorFactorization,
    xi: &TargetVector,
) -> Result<DVector<f64>, SynthesisError> {
    check_target(fact, xi)?;
    let used = fact.used_triples().ok_or(SynthesisError::RankNotSelected)?;
    let coef = projection_coefficients(fact, xi);
    let scaled = DVector::from_fn(used, |j, _| coef[j] / fact.svd.s[j]);
    Ok(fact.svd.v.columns(0, used) * scaled)
}

pub fn synthesize_control(
    fact: &OperatorFactorization,
    xi: &TargetVector,
    grid: &TimeGrid,
) -> Result<ControlSignal, SynthesisError> {
    if grid.steps() != fact.steps {
        return Err(SynthesisError::DimensionMismatch(format!(
            "grid has {} steps, operator was built on {}",
            grid.steps(),
            fact.steps
        )));
    }
    let g = minimum_norm_solution(fact, xi)?;
    ControlSignal::new(*grid, fact.input_dim, g.as_slice().to_vec())
}

/// Per-channel grouping of the series: part `c` sums the triples with index
/// `c + m(j-1)`, `j = 1..q`. The parts add up to `ĝ*`.
pub fn channel_partition(
    fact: &OperatorFactorization,
    xi: &TargetVector,
) -> Result<Vec<DVector<f64>>, SynthesisError> {
    check_target(fact, xi)?;
    let used = fact.used_triples().ok_or(SynthesisError::RankNotSelected)?;
    let m = fact.input_dim;
    let coef = projection_coefficients(fact, xi);
    let mut parts = vec![DVector::zeros(fact.w.ncols()); m];
    for j in 0..used {
        parts[j % m].axpy(coef[j] / fact.svd.s[j], &fact.svd.v.column(j), 1.0);
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllabilityDiagnostic {
    /// `Σ_{i ≤ j} (ξ̂ᵀū_i)² / s_i²` over all `r` triples.
    pub partial_sums: Vec<f64>,
    /// `‖ξ̂ − U Uᵀ ξ̂‖ / ‖ξ̂‖`.
    pub residual: f64,
    pub coefficients: Vec<f64>,
}

pub fn controllability_diagnostic(
    fact: &OperatorFactorization,
    xi: &TargetVector,
) -> ControllabilityDiagnostic {
    let coef = projection_coefficients(fact, xi);
    let mut acc = 0.0;
    let partial_sums = coef
        .iter()
        .zip(fact.svd.s.iter())
        .map(|(c, s)| {
            acc += (c / s).powi(2);
            acc
        })
        .collect();
    let norm = xi.values.norm();
    let residual = if norm == 0.0 {
        0.0
    } else {
        (&xi.values - &fact.svd.u * &coef).norm() / norm
    };
    ControllabilityDiagnostic {
        partial_sums,
        residual,
        coefficients: coef.iter().copied().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub transition: TransitionOptions,
    /// Fixed truncation count; selected by condition ratio when `None`.
    pub q: Option<usize>,
    pub max_condition: f64,
    /// Upper bound on `q`; defaults to the number of parameter samples.
    pub q_max: Option<usize>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            transition: TransitionOptions::default(),
            q: None,
            max_condition: 1e4,
            q_max: None,
        }
    }
}

/// Output of the full discretize → factorize → invert pipeline.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub factorization: OperatorFactorization,
    pub target: TargetVector,
    pub control: ControlSignal,
    pub diagnostic: ControllabilityDiagnostic,
    /// `Φ(T, 0, β_j)` per parameter sample.
    pub phi_t0: Vec<DMatrix<f64>>,
}

pub type Discretization = (DMatrix<f64>, TargetVector, Vec<DMatrix<f64>>);

/// Build `W`, `ξ̂` and `Φ(T,0,β_j)` with one transition table per sample,
/// computed in parallel and dropped after use.
pub fn discretize(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    pgrid: &ParameterGrid,
    opts: &TransitionOptions,
) -> Result<Discretization, SynthesisError> {
    check_shapes(sys, tgrid, pgrid)?;
    let n = sys.state_dim();
    let pieces = (0..pgrid.len())
        .into_par_iter()
        .map(|j| {
            let table = transition_table(sys, tgrid, pgrid.point(j), opts)?;
            let block = block_row(sys, tgrid, &table)?;
            let target = target_block(sys, tgrid, &table)?;
            Ok((block, target, table.phi_t0))
        })
        .collect::<Result<Vec<_>, SynthesisError>>()?;
    let mut w = DMatrix::zeros(n * pgrid.len(), sys.input_dim() * tgrid.steps());
    let mut targets = Vec::with_capacity(pieces.len());
    let mut phi_t0 = Vec::with_capacity(pieces.len());
    for (j, (block, target, phi)) in pieces.into_iter().enumerate() {
        w.rows_mut(j * n, n).copy_from(&block);
        targets.push(target);
        phi_t0.push(phi);
    }
    Ok((w, stack_targets(n, pgrid, targets), phi_t0))
}

pub fn synthesize(
    sys: &EnsembleSystem,
    tgrid: &TimeGrid,
    pgrid: &ParameterGrid,
    opts: &SynthesisOptions,
) -> Result<Synthesis, SynthesisError> {
    let (w, target, phi_t0) = discretize(sys, tgrid, pgrid, &opts.transition)?;
    let fact = OperatorFactorization::new(w, sys.state_dim(), sys.input_dim(), pgrid.len(), tgrid.steps())?;
    let q_max = opts.q_max.unwrap_or(pgrid.len());
    let q = match opts.q {
        Some(q) if q > q_max => {
            return Err(SynthesisError::InvalidRank(format!(
                "q = {q} exceeds the limit {q_max}"
            )))
        }
        Some(q) => q,
        None => select_rank(fact.svd.s.as_slice(), sys.input_dim(), opts.max_condition, q_max)?,
    };
    let factorization = fact.with_rank(q)?;
    let control = synthesize_control(&factorization, &target, tgrid)?;
    let diagnostic = controllability_diagnostic(&factorization, &target);
    Ok(Synthesis {
        factorization,
        target,
        control,
        diagnostic,
        phi_t0,
    })
}

impl Synthesis {
    pub fn q(&self) -> usize {
        self.factorization.q.unwrap_or(0)
    }

    /// `W ĝ* − ξ̂`.
    pub fn residual(&self) -> DVector<f64> {
        let g = DVector::from_column_slice(self.control.as_slice());
        &self.factorization.w * g - &self.target.values
    }

    /// Predicted `E X(T, β_j) − X_F(β_j) = Φ(T,0,β_j) (W ĝ* − ξ̂)_j`.
    pub fn predicted_terminal_offsets(&self) -> Vec<DVector<f64>> {
        let r = self.residual();
        let n = self.target.state_dim;
        self.phi_t0
            .iter()
            .enumerate()
            .map(|(j, phi)| phi * r.rows(j * n, n))
            .collect()
    }
}
