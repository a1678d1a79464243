//! Ensemble systems `dX = (A(t,β)X + B(t,β)u)dt + G(t,β)dS`, their
//! discretization grids and the built-in example systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("entry {matrix}[{row},{col}]: {source}")]
    InvalidEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
        source: ExprError,
    },
    #[error("non-finite entry {matrix}[{row},{col}] = {value} at t={t}, beta={beta:?}")]
    NonFiniteEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
        t: f64,
        beta: Vec<f64>,
        value: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid horizon {0}: must be positive and finite")]
    InvalidHorizon(f64),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error(
        "unknown example `{0}` (known: bm-oscillator, poisson-oscillator, scalar-tv, quantum-transport)"
    )]
    UnknownExample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Brownian,
    Poisson,
}

/// Additive noise driving the ensemble. Poisson intensities are stored as the
/// vector λ; the diagonal matrix Λ is never materialized.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    None,
    Brownian,
    Poisson { intensities: Vec<f64> },
}

impl NoiseSpec {
    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseSpec::None => NoiseKind::None,
            NoiseSpec::Brownian => NoiseKind::Brownian,
            NoiseSpec::Poisson { .. } => NoiseKind::Poisson,
        }
    }

    pub fn intensities(&self) -> Option<&[f64]> {
        match self {
            NoiseSpec::Poisson { intensities } => Some(intensities),
            _ => None,
        }
    }
}

/// Matrix whose entries are expressions of `(t, β)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixExpr {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl MatrixExpr {
    pub fn parse(name: &'static str, rows: &[Vec<String>], param_dim: usize) -> Result<Self, ModelError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if nrows == 0 || ncols == 0 {
            return Err(ModelError::DimensionMismatch(format!("matrix {name} is empty")));
        }
        let mut entries = Vec::with_capacity(nrows * ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(ModelError::DimensionMismatch(format!(
                    "matrix {name}: row {i} has {} entries, expected {ncols}",
                    row.len()
                )));
            }
            for (j, src) in row.iter().enumerate() {
                let e = Expr::parse(src, param_dim).map_err(|source| ModelError::InvalidEntry {
                    matrix: name,
                    row: i,
                    col: j,
                    source,
                })?;
                entries.push(e);
            }
        }
        Ok(MatrixExpr {
            rows: nrows,
            cols: ncols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> &Expr {
        &self.entries[row * self.cols + col]
    }

    pub fn depends_on_time(&self) -> bool {
        self.entries.iter().any(Expr::depends_on_time)
    }

    /// Evaluate into a row-major buffer, without finiteness checks.
    pub fn eval_row_major(&self, t: f64, beta: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.entries) {
            *o = e.eval(t, beta);
        }
    }

    pub fn eval_checked(&self, name: &'static str, t: f64, beta: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let value = self.entry(i, j).eval(t, beta);
                if !value.is_finite() {
                    return Err(ModelError::NonFiniteEntry {
                        matrix: name,
                        row: i,
                        col: j,
                        t,
                        beta: beta.to_vec(),
                        value,
                    });
                }
                m[(i, j)] = value;
            }
        }
        Ok(m)
    }

    fn to_strings(&self) -> Vec<Vec<String>> {
        self.entries
            .chunks(self.cols)
            .map(|row| row.iter().map(ToString::to_string).collect())
            .collect()
    }
}

/// Serializable description of a system, with every entry written as an
/// expression string. This is the schema of the `[system]` table in run
/// configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Parameter box `[[low, high], …]`, one pair per parameter component.
    pub bounds: Vec<[f64; 2]>,
    pub horizon: f64,
    pub a: Vec<Vec<String>>,
    pub b: Vec<Vec<String>>,
    pub g: Vec<Vec<String>>,
    pub x0: Vec<String>,
    pub xf: Vec<String>,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intensities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSystem {
    name: Option<String>,
    n: usize,
    m: usize,
    k: usize,
    d: usize,
    a: MatrixExpr,
    b: MatrixExpr,
    g: MatrixExpr,
    noise: NoiseSpec,
    bounds: Vec<(f64, f64)>,
    horizon: f64,
    x0: Vec<Expr>,
    xf: Vec<Expr>,
}

impl EnsembleSystem {
    pub fn from_spec(spec: &SystemSpec) -> Result<Self, ModelError> {
        let d = spec.bounds.len();
        if d == 0 {
            return Err(ModelError::InvalidBounds("no parameter components".into()));
        }
        let bounds: Vec<(f64, f64)> = spec.bounds.iter().map(|&[lo, hi]| (lo, hi)).collect();
        check_bounds(&bounds)?;
        if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
            return Err(ModelError::InvalidHorizon(spec.horizon));
        }
        let a = MatrixExpr::parse("A", &spec.a, d)?;
        let b = MatrixExpr::parse("B", &spec.b, d)?;
        let g = MatrixExpr::parse("G", &spec.g, d)?;
        let n = a.rows();
        if a.cols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != n || g.rows() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "B and G must have {n} rows (got {} and {})",
                b.rows(),
                g.rows()
            )));
        }
        let parse_vec = |name: &'static str, v: &[String]| -> Result<Vec<Expr>, ModelError> {
            if v.len() != n {
                return Err(ModelError::DimensionMismatch(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
            v.iter()
                .enumerate()
                .map(|(i, s)| {
                    let e = Expr::parse(s, d).map_err(|source| ModelError::InvalidEntry {
                        matrix: name,
                        row: i,
                        col: 0,
                        source,
                    })?;
                    if e.depends_on_time() {
                        return Err(ModelError::InvalidEntry {
                            matrix: name,
                            row: i,
                            col: 0,
                            source: ExprError::UnknownIdentifier("t".into()),
                        });
                    }
                    Ok(e)
                })
                .collect()
        };
        let x0 = parse_vec("X0", &spec.x0)?;
        let xf = parse_vec("XF", &spec.xf)?;
        let k = g.cols();
        let noise = match spec.noise.kind {
            NoiseKind::None => NoiseSpec::None,
            NoiseKind::Brownian => NoiseSpec::Brownian,
            NoiseKind::Poisson => {
                let lambda = &spec.noise.intensities;
                if lambda.len() != k {
                    return Err(ModelError::InvalidNoise(format!(
                        "{} intensities given for {k} noise channels",
                        lambda.len()
                    )));
                }
                if lambda.iter().any(|&l| !(l.is_finite() && l >= 0.0)) {
                    return Err(ModelError::InvalidNoise(
                        "intensities must be finite and nonnegative".into(),
                    ));
                }
                NoiseSpec::Poisson {
                    intensities: lambda.clone(),
                }
            }
        };
        Ok(EnsembleSystem {
            name: spec.name.clone(),
            n,
            m: b.cols(),
            k,
            d,
            a,
            b,
            g,
            noise,
            bounds,
            horizon: spec.horizon,
            x0,
            xf,
        })
    }

    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            name: self.name.clone(),
            bounds: self.bounds.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            horizon: self.horizon,
            a: self.a.to_strings(),
            b: self.b.to_strings(),
            g: self.g.to_strings(),
            x0: self.x0.iter().map(ToString::to_string).collect(),
            xf: self.xf.iter().map(ToString::to_string).collect(),
            noise: NoiseConfig {
                kind: self.noise.kind(),
                intensities: self.noise.intensities().map(<[f64]>::to_vec).unwrap_or_default(),
            },
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn noise_dim(&self) -> usize {
        self.k
    }

    pub fn param_dim(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn drift_matrix(&self) -> &MatrixExpr {
        &self.a
    }

    pub fn input_matrix(&self) -> &MatrixExpr {
        &self.b
    }

    pub fn noise_matrix(&self) -> &MatrixExpr {
        &self.g
    }

    /// Same system with a different noise model; used to run the noise-free
    /// counterpart of a stochastic example.
    pub fn with_noise(&self, noise: NoiseSpec) -> Result<Self, ModelError> {
        let mut spec = self.to_spec();
        spec.noise = NoiseConfig {
            kind: noise.kind(),
            intensities: noise.intensities().map(<[f64]>::to_vec).unwrap_or_default(),
        };
        Self::from_spec(&spec)
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self, ModelError> {
        let mut spec = self.to_spec();
        spec.horizon = horizon;
        Self::from_spec(&spec)
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        beta.len() == self.d
            && beta
                .iter()
                .zip(&self.bounds)
                .all(|(&b, &(lo, hi))| b >= lo && b <= hi)
    }

    /// `(A, B, G)` at `(t, β)`.
    pub fn evaluate_matrices(&self, t: f64, beta: &[f64]) -> Result<[DMatrix<f64>; 3], ModelError> {
        if beta.len() != self.d {
            return Err(ModelError::DimensionMismatch(format!(
                "beta has {} components, system has {}",
                beta.len(),
                self.d
            )));
        }
        Ok([
            self.a.eval_checked("A", t, beta)?,
            self.b.eval_checked("B", t, beta)?,
            self.g.eval_checked("G", t, beta)?,
        ])
    }

    pub fn initial_state(&self, beta: &[f64]) -> Result<DVector<f64>, ModelError> {
        eval_state("X0", &self.x0, beta)
    }

    pub fn target_state(&self, beta: &[f64]) -> Result<DVector<f64>, ModelError> {
        eval_state("XF", &self.xf, beta)
    }

    /// Check that every entry is finite on the given grids.
    pub fn validate_on(&self, tgrid: &TimeGrid, pgrid: &ParameterGrid) -> Result<(), ModelError> {
        for beta in pgrid.points() {
            self.initial_state(beta)?;
            self.target_state(beta)?;
            for k in 0..=tgrid.steps() {
                self.evaluate_matrices(tgrid.node(k), beta)?;
            }
        }
        Ok(())
    }
}

fn eval_state(name: &'static str, entries: &[Expr], beta: &[f64]) -> Result<DVector<f64>, ModelError> {
    let mut v = DVector::zeros(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let value = e.eval(0.0, beta);
        if !value.is_finite() {
            return Err(ModelError::NonFiniteEntry {
                matrix: name,
                row: i,
                col: 0,
                t: 0.0,
                beta: beta.to_vec(),
                value,
            });
        }
        v[i] = value;
    }
    Ok(v)
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<(), ModelError> {
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ModelError::InvalidBounds(format!(
                "component {}: [{lo}, {hi}] must satisfy low < high",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Equispaced time nodes `t_k = kδ`, `k = 0..=N`, with `t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::InvalidHorizon(horizon));
        }
        if steps == 0 {
            return Err(ModelError::InvalidGrid(
                "time grid needs at least one step".into(),
            ));
        }
        Ok(TimeGrid { steps, horizon })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }
}

/// Parameter samples in `K` with quadrature weights summing to `|K|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ParameterGrid {
    /// Equispaced samples including both endpoints with composite trapezoid
    /// weights, tensorized over components (first component varies slowest).
    /// A single sample per component is placed at the midpoint.
    pub fn uniform(bounds: &[(f64, f64)], samples_per_dim: usize) -> Result<Self, ModelError> {
        Self::uniform_per_dim(bounds, &vec![samples_per_dim; bounds.len().max(1)])
    }

    /// As [`ParameterGrid::uniform`] with a sample count per component.
    pub fn uniform_per_dim(bounds: &[(f64, f64)], samples: &[usize]) -> Result<Self, ModelError> {
        if bounds.is_empty() {
            return Err(ModelError::InvalidBounds("no parameter components".into()));
        }
        check_bounds(bounds)?;
        if samples.len() != bounds.len() {
            return Err(ModelError::InvalidGrid(format!(
                "{} sample counts for {} parameter components",
                samples.len(),
                bounds.len()
            )));
        }
        if samples.contains(&0) {
            return Err(ModelError::InvalidGrid(
                "parameter grid needs at least one sample".into(),
            ));
        }
        let axes: Vec<(Vec<f64>, Vec<f64>)> = bounds
            .iter()
            .zip(samples)
            .map(|(&(lo, hi), &p)| trapezoid_axis(lo, hi, p))
            .collect();
        let dim = bounds.len();
        let total: usize = samples.iter().product();
        let mut points = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0; dim];
            for c in (0..dim).rev() {
                idx[c] = rem % samples[c];
                rem /= samples[c];
            }
            let mut w = 1.0;
            for (c, &i) in idx.iter().enumerate() {
                points.push(axes[c].0[i]);
                w *= axes[c].1[i];
            }
            weights.push(w);
        }
        Ok(ParameterGrid { dim, points, weights })
    }

    /// Explicit points (row-major, `dim` components each) and weights.
    pub fn from_points(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if dim == 0 || points.len() != dim * weights.len() || weights.is_empty() {
            return Err(ModelError::InvalidGrid("point/weight count mismatch".into()));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(ModelError::InvalidGrid("weights must be positive".into()));
        }
        Ok(ParameterGrid { dim, points, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn trapezoid_axis(lo: f64, hi: f64, p: usize) -> (Vec<f64>, Vec<f64>) {
    let len = hi - lo;
    if p == 1 {
        return (vec![0.5 * (lo + hi)], vec![len]);
    }
    let spacing = len / (p - 1) as f64;
    let points = (0..p)
        .map(|i| if i == p - 1 { hi } else { lo + i as f64 * spacing })
        .collect();
    let weights = (0..p)
        .map(|i| {
            if i == 0 || i == p - 1 {
                0.5 * spacing
            } else {
                spacing
            }
        })
        .collect();
    (points, weights)
}

/// One of the four reference ensembles together with the grids used for it.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub system: EnsembleSystem,
    pub time_grid: TimeGrid,
    pub parameter_grid: ParameterGrid,
    /// Reference truncation count for this example, when one is known.
    /// Synthesis defaults to the condition-ratio rule instead; see the README.
    pub reported_q: Option<usize>,
}

pub const PRESET_NAMES: [&str; 4] = [
    "bm-oscillator",
    "poisson-oscillator",
    "scalar-tv",
    "quantum-transport",
];

fn strings<const R: usize, const C: usize>(rows: [[&str; C]; R]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| r.iter().map(|s| s.to_string()).collect())
        .collect()
}

fn vector<const N: usize>(v: [&str; N]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn builtin_example(name: &str) -> Result<Preset, ModelError> {
    let oscillator = |g: [[&str; 1]; 2], noise: NoiseConfig| SystemSpec {
        name: None,
        bounds: vec![[-10.0, 10.0]],
        horizon: 1.0,
        a: strings([["0", "-b"], ["b", "0"]]),
        b: strings([["1", "0"], ["0", "1"]]),
        g: strings(g),
        x0: vector(["1", "0"]),
        xf: vector(["0", "0"]),
        noise,
    };
    let (description, mut spec, steps, samples, reported_q) = match name {
        "bm-oscillator" => (
            "harmonic oscillators, omega in [-10,10], additive Brownian noise G=(0.1,0.2)'",
            oscillator(
                [["0.1"], ["0.2"]],
                NoiseConfig {
                    kind: NoiseKind::Brownian,
                    intensities: vec![],
                },
            ),
            40_000,
            21,
            Some(5),
        ),
        "poisson-oscillator" => (
            "harmonic oscillators, omega in [-10,10], Poisson jumps rate 20 with G=(0.05,0.05)'",
            oscillator(
                [["0.05"], ["0.05"]],
                NoiseConfig {
                    kind: NoiseKind::Poisson,
                    intensities: vec![20.0],
                },
            ),
            40_000,
            21,
            None,
        ),
        "scalar-tv" => (
            "scalar time-varying drift -sin(beta t), beta in [-5,5], X0=1 to XF=0.2",
            SystemSpec {
                name: None,
                bounds: vec![[-5.0, 5.0]],
                horizon: 1.0,
                a: strings([["-sin(b*t)"]]),
                b: strings([["1"]]),
                g: strings([["1"]]),
                x0: vector(["1"]),
                xf: vector(["0.2"]),
                noise: NoiseConfig {
                    kind: NoiseKind::Brownian,
                    intensities: vec![],
                },
            },
            20_000,
            101,
            Some(9),
        ),
        "quantum-transport" => (
            "three-state transport ensemble, omega in [0.8,1], sigma=0.02, T=10 \
             (40001 nodes on [0,10], not [0,20])",
            SystemSpec {
                name: None,
                bounds: vec![[0.8, 1.0]],
                horizon: 10.0,
                a: strings([["0", "1", "0"], ["-b^2", "0", "b^2"], ["0", "0", "0"]]),
                b: strings([["0"], ["0"], ["1"]]),
                g: strings([["0"], ["0"], ["0.02"]]),
                x0: vector(["0", "0", "1"]),
                xf: vector(["0", "0", "0"]),
                noise: NoiseConfig {
                    kind: NoiseKind::Brownian,
                    intensities: vec![],
                },
            },
            40_000,
            101,
            None,
        ),
        other => return Err(ModelError::UnknownExample(other.to_string())),
    };
    let name = PRESET_NAMES
        .iter()
        .copied()
        .find(|&p| p == name)
        .unwrap_or("custom");
    spec.name = Some(name.to_string());
    let system = EnsembleSystem::from_spec(&spec)?;
    let time_grid = TimeGrid::new(system.horizon(), steps)?;
    let parameter_grid = ParameterGrid::uniform(system.bounds(), samples)?;
    Ok(Preset {
        name,
        description,
        system,
        time_grid,
        parameter_grid,
        reported_q,
    })
}
