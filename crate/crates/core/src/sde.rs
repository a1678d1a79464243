//! Sample paths of `dX = (A X + B u) dt + G dS` under a fixed open-loop control.
//!
//! Four integrators are provided: classical RK4 for the noise-free system,
//! Euler–Maruyama and an order-1.5 predictor–corrector for additive Brownian
//! noise, and an event-driven scheme for Poisson counters that integrates
//! exactly between arrivals with RK4. The RK4 path and the Poisson path share
//! one integrator, so a Poisson run without arrivals reproduces the
//! deterministic run bit for bit.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EnsembleSystem, ModelError, NoiseKind, NoiseSpec, ParameterGrid};
use crate::rng::trial_rng;
use crate::synthesis::ControlSignal;

/// States with any component above this magnitude abort the trial.
pub const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("step {step} does not divide the horizon {horizon}")]
    StepDoesNotDivideHorizon { step: f64, horizon: f64 },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("non-finite or blown-up state at t = {t} (beta index {beta_index}, trial {trial})")]
    NonFiniteState { t: f64, beta_index: usize, trial: usize },
    #[error("scheme {scheme} cannot simulate {noise} noise")]
    IncompatibleScheme { scheme: Scheme, noise: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "rk4")]
    Rk4,
    #[serde(rename = "em")]
    EulerMaruyama,
    #[serde(rename = "sri15")]
    Sri15,
    #[serde(rename = "poisson")]
    Poisson,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Rk4, Scheme::EulerMaruyama, Scheme::Sri15, Scheme::Poisson];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rk4 => "rk4",
            Scheme::EulerMaruyama => "em",
            Scheme::Sri15 => "sri15",
            Scheme::Poisson => "poisson",
        }
    }

    /// Natural scheme for a noise model.
    pub fn default_for(noise: NoiseKind) -> Scheme {
        match noise {
            NoiseKind::None => Scheme::Rk4,
            NoiseKind::Brownian => Scheme::EulerMaruyama,
            NoiseKind::Poisson => Scheme::Poisson,
        }
    }

    fn supports(self, noise: NoiseKind) -> bool {
        match self {
            Scheme::Rk4 => true,
            Scheme::EulerMaruyama | Scheme::Sri15 => noise == NoiseKind::Brownian,
            Scheme::Poisson => noise == NoiseKind::Poisson,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}' (expected rk4, em, sri15 or poisson)"))
    }
}

fn noise_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::None => "no",
        NoiseKind::Brownian => "Brownian",
        NoiseKind::Poisson => "Poisson",
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub scheme: Scheme,
    /// Integration step `h`. Must divide the horizon.
    pub step: f64,
    pub seed: u64,
    pub trials: usize,
    /// Simulation horizon; the system horizon when `None`. The control is
    /// zero beyond its own grid.
    pub horizon: Option<f64>,
    /// Keep every `k`-th step of the path (plus the final state); only the
    /// endpoints when `None`.
    pub record_every: Option<usize>,
}

impl SimulationConfig {
    pub fn new(scheme: Scheme, step: f64) -> Self {
        SimulationConfig {
            scheme,
            step,
            seed: 0,
            trials: 1,
            horizon: None,
            record_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub beta: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub terminal: DVector<f64>,
    /// Arrival times per counter (Poisson scheme only).
    pub jump_times: Vec<Vec<f64>>,
}

impl TrajectorySample {
    pub fn jump_count(&self) -> usize {
        self.jump_times.iter().map(Vec::len).sum()
    }
}

/// Row-major `A`, `B`, `G` at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub g: Vec<f64>,
    varying: [bool; 3],
}

impl Coefficients {
    /// Constant coefficients, for tests and hand-built problems.
    pub fn constant(n: usize, m: usize, r: usize, a: Vec<f64>, b: Vec<f64>, g: Vec<f64>) -> Self {
        assert_eq!((a.len(), b.len(), g.len()), (n * n, n * m, n * r));
        Coefficients {
            n,
            m,
            r,
            a,
            b,
            g,
            varying: [false; 3],
        }
    }

    pub fn at(sys: &EnsembleSystem, t: f64, beta: &[f64]) -> Self {
        let (n, m, r) = (sys.state_dim(), sys.input_dim(), sys.noise_dim());
        let mut c = Coefficients {
            n,
            m,
            r,
            a: vec![0.0; n * n],
            b: vec![0.0; n * m],
            g: vec![0.0; n * r],
            varying: [
                sys.drift_matrix().depends_on_time(),
                sys.input_matrix().depends_on_time(),
                sys.noise_matrix().depends_on_time(),
            ],
        };
        sys.drift_matrix().eval_row_major(t, beta, &mut c.a);
        sys.input_matrix().eval_row_major(t, beta, &mut c.b);
        sys.noise_matrix().eval_row_major(t, beta, &mut c.g);
        c
    }

    /// Re-evaluate the time-dependent matrices at `t`.
    pub fn refresh(&mut self, sys: &EnsembleSystem, t: f64, beta: &[f64]) {
        if self.varying[0] {
            sys.drift_matrix().eval_row_major(t, beta, &mut self.a);
        }
        if self.varying[1] {
            sys.input_matrix().eval_row_major(t, beta, &mut self.b);
        }
        if self.varying[2] {
            sys.noise_matrix().eval_row_major(t, beta, &mut self.g);
        }
    }

    fn noise_varies(&self) -> bool {
        self.varying[2]
    }

    /// `out = A x + B u`.
    pub fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        matvec(&self.a, self.n, x, out);
        matvec_add(&self.b, self.m, u, out);
    }
}

fn matvec(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    if cols == 0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn matvec_add(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
}

/// Scratch buffers for the steppers.
#[derive(Debug, Clone)]
pub struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    noise: Vec<f64>,
}

impl Workspace {
    pub fn new(n: usize, r: usize) -> Self {
        Workspace {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            noise: vec![0.0; r],
        }
    }
}

/// `x ← x + (A x + B u) h + G ΔW`.
pub fn em_step(c: &Coefficients, x: &mut [f64], u: &[f64], h: f64, dw: &[f64], ws: &mut Workspace) {
    let drift = &mut ws.k[0];
    c.drift(x, u, drift);
    matvec_add(&c.g, c.r, dw, drift_noise(drift, h));
    for (xi, d) in x.iter_mut().zip(drift.iter()) {
        *xi += d;
    }
}

// Scales the drift by h in place and returns it so the noise can be added.
fn drift_noise(drift: &mut [f64], h: f64) -> &mut [f64] {
    drift.iter_mut().for_each(|d| *d *= h);
    drift
}

/// One step of the additive-noise order-1.5 scheme from `t_n` (`c0`) to
/// `t_{n+1}` (`c1`):
///
/// `Ȳ = Y + a(t_n,Y) h + G_n ΔW`,
/// `Y ← Y + ½(a(t_n,Y) + a(t_{n+1},Ȳ)) h + G_n ΔW + A_n G_n (ΔZ − ½hΔW)
///      + (G_{n+1} − G_n)(ΔW − ΔZ/h)`,
///
/// with `a(t,x) = A(t)x + B(t)u` and `ΔZ = ∫ (W_s − W_{t_n}) ds`.
#[allow(clippy::too_many_arguments)]
pub fn sri15_step(
    c0: &Coefficients,
    c1: &Coefficients,
    x: &mut [f64],
    u: &[f64],
    h: f64,
    dw: &[f64],
    dz: &[f64],
    ws: &mut Workspace,
) {
    let [a0, a1, gdw, corr] = &mut ws.k;
    c0.drift(x, u, a0);
    matvec(&c0.g, c0.r, dw, gdw);
    for ((t, xi), (d, g)) in ws.tmp.iter_mut().zip(x.iter()).zip(a0.iter().zip(gdw.iter())) {
        *t = xi + d * h + g;
    }
    c1.drift(&ws.tmp, u, a1);
    // A_n G_n (ΔZ − ½hΔW)
    for (nz, (w, z)) in ws.noise.iter_mut().zip(dw.iter().zip(dz)) {
        *nz = z - 0.5 * h * w;
    }
    matvec(&c0.g, c0.r, &ws.noise, &mut ws.tmp);
    matvec(&c0.a, c0.n, &ws.tmp, corr);
    if c0.noise_varies() || c1.noise_varies() {
        for (nz, (w, z)) in ws.noise.iter_mut().zip(dw.iter().zip(dz)) {
            *nz = w - z / h;
        }
        matvec_add(&c1.g, c1.r, &ws.noise, corr);
        ws.noise.iter_mut().for_each(|v| *v = -*v);
        matvec_add(&c0.g, c0.r, &ws.noise, corr);
    }
    for i in 0..x.len() {
        x[i] += 0.5 * (a0[i] + a1[i]) * h + gdw[i] + corr[i];
    }
}

/// Classical RK4 step for `x' = A(t)x + B(t)u` with `u` held fixed.
/// `coef` must hold the coefficients at `t`; it is left at `t + h`.
#[allow(clippy::too_many_arguments)]
fn rk4_step(
    sys: &EnsembleSystem,
    beta: &[f64],
    coef: &mut Coefficients,
    t: f64,
    h: f64,
    x: &mut [f64],
    u: &[f64],
    ws: &mut Workspace,
) {
    let [k1, k2, k3, k4] = &mut ws.k;
    let tmp = &mut ws.tmp;
    coef.drift(x, u, k1);
    coef.refresh(sys, t + 0.5 * h, beta);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    coef.drift(tmp, u, k2);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    coef.drift(tmp, u, k3);
    coef.refresh(sys, t + h, beta);
    for i in 0..x.len() {
        tmp[i] = x[i] + h * k3[i];
    }
    coef.drift(tmp, u, k4);
    for i in 0..x.len() {
        x[i] += h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
    }
}

fn check_state(x: &[f64], t: f64) -> Result<(), f64> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= BLOW_UP) {
        Ok(())
    } else {
        Err(t)
    }
}

struct Recorder {
    every: Option<usize>,
    count: usize,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
}

impl Recorder {
    fn new(every: Option<usize>, x0: &[f64]) -> Self {
        Recorder {
            every: every.map(|k| k.max(1)),
            count: 0,
            times: vec![0.0],
            states: vec![DVector::from_column_slice(x0)],
        }
    }

    fn step(&mut self, t: f64, x: &[f64]) {
        self.count += 1;
        if let Some(k) = self.every {
            if self.count.is_multiple_of(k) {
                self.times.push(t);
                self.states.push(DVector::from_column_slice(x));
            }
        }
    }

    fn finish(mut self, beta: &[f64], t_end: f64, x: &[f64], jump_times: Vec<Vec<f64>>) -> TrajectorySample {
        if self.times.last() != Some(&t_end) {
            self.times.push(t_end);
            self.states.push(DVector::from_column_slice(x));
        }
        TrajectorySample {
            beta: beta.to_vec(),
            times: self.times,
            states: self.states,
            terminal: DVector::from_column_slice(x),
            jump_times,
        }
    }
}

/// Identifies a trial in error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrialTag {
    pub beta_index: usize,
    pub trial: usize,
}

struct Setup {
    horizon: f64,
    steps: usize,
    h: f64,
    x0: Vec<f64>,
}

fn setup(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
    expected: Scheme,
) -> Result<Setup, SimulationError> {
    if !expected.supports(sys.noise().kind()) {
        return Err(SimulationError::IncompatibleScheme {
            scheme: expected,
            noise: noise_name(sys.noise().kind()),
        });
    }
    if beta.len() != sys.param_dim() {
        return Err(SimulationError::DimensionMismatch(format!(
            "beta has {} components, system has {}",
            beta.len(),
            sys.param_dim()
        )));
    }
    if let Some(c) = control {
        if c.input_dim() != sys.input_dim() {
            return Err(SimulationError::DimensionMismatch(format!(
                "control has {} channels, system has {} inputs",
                c.input_dim(),
                sys.input_dim()
            )));
        }
    }
    let horizon = cfg.horizon.unwrap_or(sys.horizon());
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(SimulationError::InvalidStep(cfg.step));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimulationError::Model(ModelError::InvalidHorizon(horizon)));
    }
    let ratio = horizon / cfg.step;
    let steps = ratio.round();
    if steps < 1.0 || (steps * cfg.step - horizon).abs() > 1e-12 * horizon {
        return Err(SimulationError::StepDoesNotDivideHorizon {
            step: cfg.step,
            horizon,
        });
    }
    let steps = steps as usize;
    Ok(Setup {
        horizon,
        steps,
        h: horizon / steps as f64,
        x0: sys.initial_state(beta)?.as_slice().to_vec(),
    })
}

fn step_time(setup: &Setup, i: usize) -> f64 {
    if i == setup.steps {
        setup.horizon
    } else {
        i as f64 * setup.h
    }
}

fn blow_up(t: f64, tag: TrialTag) -> SimulationError {
    SimulationError::NonFiniteState {
        t,
        beta_index: tag.beta_index,
        trial: tag.trial,
    }
}

/// RK4 between breakpoints (control nodes and `events`), at most `h` per
/// step, applying `G[:, counter]` at each event.
#[allow(clippy::too_many_arguments)]
fn integrate_piecewise(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    setup: &Setup,
    events: &[(f64, usize)],
    record_every: Option<usize>,
    tag: TrialTag,
    jump_times: Vec<Vec<f64>>,
) -> Result<TrajectorySample, SimulationError> {
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let mut x = setup.x0.clone();
    let mut coef = Coefficients::at(sys, 0.0, beta);
    let mut ws = Workspace::new(n, sys.noise_dim());
    let mut rec = Recorder::new(record_every, &x);
    let zero = vec![0.0; m];
    let horizon = setup.horizon;
    let (ctrl_steps, ctrl_end) = control.map_or((0, 0.0), |c| (c.grid().steps(), c.grid().horizon()));
    let mut k = 1;
    let mut e = 0;
    let mut t = 0.0;
    while t < horizon {
        let ctrl_break = if k <= ctrl_steps {
            control.unwrap().grid().node(k)
        } else {
            f64::INFINITY
        };
        let event_break = events.get(e).map_or(f64::INFINITY, |ev| ev.0);
        let end = ctrl_break.min(event_break).min(horizon);
        let u: &[f64] = match control {
            Some(c) if k <= ctrl_steps && t < ctrl_end => c.value(k),
            _ => &zero,
        };
        if end > t {
            let sub = ((end - t) / setup.h * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let dt = (end - t) / sub as f64;
            coef.refresh(sys, t, beta);
            for s in 0..sub {
                let ts = t + s as f64 * dt;
                rk4_step(sys, beta, &mut coef, ts, dt, &mut x, u, &mut ws);
                let now = if s + 1 == sub { end } else { ts + dt };
                check_state(&x, now).map_err(|t| blow_up(t, tag))?;
                rec.step(now, &x);
            }
        }
        while e < events.len() && events[e].0 <= end {
            let (te, counter) = events[e];
            coef.refresh(sys, te, beta);
            for (i, xi) in x.iter_mut().enumerate().take(n) {
                *xi += coef.g[i * coef.r + counter];
            }
            check_state(&x, te).map_err(|t| blow_up(t, tag))?;
            e += 1;
        }
        if ctrl_break <= end {
            k += 1;
        }
        t = end;
    }
    Ok(rec.finish(beta, horizon, &x, jump_times))
}

/// Noise-free path by classical RK4; `G` is ignored.
pub fn simulate_deterministic(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
) -> Result<TrajectorySample, SimulationError> {
    let setup = setup(sys, control, beta, cfg, Scheme::Rk4)?;
    integrate_piecewise(
        sys,
        control,
        beta,
        &setup,
        &[],
        cfg.record_every,
        TrialTag::default(),
        Vec::new(),
    )
}

fn normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], scale: f64) {
    for v in out.iter_mut() {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
}

fn control_average(control: Option<&ControlSignal>, a: f64, b: f64, out: &mut [f64]) {
    match control {
        Some(c) => c.average_into(a, b, out),
        None => out.iter_mut().for_each(|v| *v = 0.0),
    }
}

/// Euler–Maruyama with `A`, `B`, `G` frozen at the left end of each step. The
/// control enters through its exact average over the step.
pub fn simulate_brownian_em<R: Rng + ?Sized>(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
    rng: &mut R,
    tag: TrialTag,
) -> Result<TrajectorySample, SimulationError> {
    let setup = setup(sys, control, beta, cfg, Scheme::EulerMaruyama)?;
    let mut x = setup.x0.clone();
    let mut coef = Coefficients::at(sys, 0.0, beta);
    let mut ws = Workspace::new(sys.state_dim(), sys.noise_dim());
    let mut u = vec![0.0; sys.input_dim()];
    let mut dw = vec![0.0; sys.noise_dim()];
    let mut rec = Recorder::new(cfg.record_every, &x);
    let sqrt_h = setup.h.sqrt();
    for i in 0..setup.steps {
        let (t0, t1) = (step_time(&setup, i), step_time(&setup, i + 1));
        coef.refresh(sys, t0, beta);
        control_average(control, t0, t1, &mut u);
        normals(rng, &mut dw, sqrt_h);
        em_step(&coef, &mut x, &u, t1 - t0, &dw, &mut ws);
        check_state(&x, t1).map_err(|t| blow_up(t, tag))?;
        rec.step(t1, &x);
    }
    Ok(rec.finish(beta, setup.horizon, &x, Vec::new()))
}

/// Order-1.5 scheme for additive noise; see [`sri15_step`]. Per component
/// `ΔW = √h ξ₁`, `ΔZ = ½ h^{3/2} (ξ₁ + ξ₂/√3)`.
pub fn simulate_brownian_sri15<R: Rng + ?Sized>(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
    rng: &mut R,
    tag: TrialTag,
) -> Result<TrajectorySample, SimulationError> {
    let setup = setup(sys, control, beta, cfg, Scheme::Sri15)?;
    let r = sys.noise_dim();
    let mut x = setup.x0.clone();
    let mut c0 = Coefficients::at(sys, 0.0, beta);
    let mut c1 = c0.clone();
    let mut ws = Workspace::new(sys.state_dim(), r);
    let mut u = vec![0.0; sys.input_dim()];
    let (mut dw, mut dz) = (vec![0.0; r], vec![0.0; r]);
    let mut rec = Recorder::new(cfg.record_every, &x);
    let inv_sqrt3 = 1.0 / 3f64.sqrt();
    for i in 0..setup.steps {
        let (t0, t1) = (step_time(&setup, i), step_time(&setup, i + 1));
        let h = t1 - t0;
        let (sqrt_h, half_h32) = (h.sqrt(), 0.5 * h * h.sqrt());
        c1.refresh(sys, t1, beta);
        control_average(control, t0, t1, &mut u);
        for c in 0..r {
            let xi1: f64 = rng.sample(StandardNormal);
            let xi2: f64 = rng.sample(StandardNormal);
            dw[c] = sqrt_h * xi1;
            dz[c] = half_h32 * (xi1 + xi2 * inv_sqrt3);
        }
        sri15_step(&c0, &c1, &mut x, &u, h, &dw, &dz, &mut ws);
        check_state(&x, t1).map_err(|t| blow_up(t, tag))?;
        rec.step(t1, &x);
        std::mem::swap(&mut c0, &mut c1);
    }
    Ok(rec.finish(beta, setup.horizon, &x, Vec::new()))
}

/// Arrival times in `[0, horizon)` of independent Poisson counters.
pub fn poisson_arrivals<R: Rng + ?Sized>(rng: &mut R, intensities: &[f64], horizon: f64) -> Vec<Vec<f64>> {
    intensities
        .iter()
        .map(|&lambda| {
            let mut times = Vec::new();
            if lambda > 0.0 {
                let mut t = 0.0;
                loop {
                    let gap: f64 = rng.sample(Exp1);
                    t += gap / lambda;
                    if t >= horizon {
                        break;
                    }
                    times.push(t);
                }
            }
            times
        })
        .collect()
}

/// Jump process: RK4 between arrivals and control breakpoints, and
/// `X ← X + G[:, i](t)` at each arrival of counter `i`.
pub fn simulate_poisson<R: Rng + ?Sized>(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
    rng: &mut R,
    tag: TrialTag,
) -> Result<TrajectorySample, SimulationError> {
    let setup = setup(sys, control, beta, cfg, Scheme::Poisson)?;
    let intensities = match sys.noise() {
        NoiseSpec::Poisson { intensities } => intensities.clone(),
        _ => unreachable!("checked by setup"),
    };
    let jump_times = poisson_arrivals(rng, &intensities, setup.horizon);
    let mut events: Vec<(f64, usize)> = jump_times
        .iter()
        .enumerate()
        .flat_map(|(c, ts)| ts.iter().map(move |&t| (t, c)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    integrate_piecewise(
        sys,
        control,
        beta,
        &setup,
        &events,
        cfg.record_every,
        tag,
        jump_times,
    )
}

/// One trial on its own random stream.
pub fn simulate_trial(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    beta: &[f64],
    cfg: &SimulationConfig,
    tag: TrialTag,
) -> Result<TrajectorySample, SimulationError> {
    if !cfg.scheme.supports(sys.noise().kind()) {
        return Err(SimulationError::IncompatibleScheme {
            scheme: cfg.scheme,
            noise: noise_name(sys.noise().kind()),
        });
    }
    let mut rng = trial_rng(cfg.seed, tag.beta_index, tag.trial);
    let result = match cfg.scheme {
        Scheme::Rk4 => simulate_deterministic(sys, control, beta, cfg),
        Scheme::EulerMaruyama => simulate_brownian_em(sys, control, beta, cfg, &mut rng, tag),
        Scheme::Sri15 => simulate_brownian_sri15(sys, control, beta, cfg, &mut rng, tag),
        Scheme::Poisson => simulate_poisson(sys, control, beta, cfg, &mut rng, tag),
    };
    result.map_err(|e| match e {
        SimulationError::NonFiniteState { t, .. } => blow_up(t, tag),
        other => other,
    })
}

/// All trials for one parameter sample, in trial order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub beta_index: usize,
    pub beta: Vec<f64>,
    pub samples: Vec<TrajectorySample>,
}

impl TrialSet {
    pub fn terminals(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.samples.iter().map(|s| &s.terminal)
    }
}

/// `cfg.trials` trials at each selected sample of `pgrid` (all when
/// `indices` is `None`), run in parallel and returned in order.
pub fn run_ensemble(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    pgrid: &ParameterGrid,
    indices: Option<&[usize]>,
    cfg: &SimulationConfig,
) -> Result<Vec<TrialSet>, SimulationError> {
    let selected: Vec<usize> = match indices {
        Some(ix) => {
            if let Some(&bad) = ix.iter().find(|&&j| j >= pgrid.len()) {
                return Err(SimulationError::DimensionMismatch(format!(
                    "parameter index {bad} out of range for {} samples",
                    pgrid.len()
                )));
            }
            ix.to_vec()
        }
        None => (0..pgrid.len()).collect(),
    };
    let points: Vec<(usize, Vec<f64>)> = selected.iter().map(|&j| (j, pgrid.point(j).to_vec())).collect();
    run_at_points(sys, control, &points, cfg)
}

/// Like [`run_ensemble`] for explicit `(stream index, β)` pairs.
pub fn run_at_points(
    sys: &EnsembleSystem,
    control: Option<&ControlSignal>,
    points: &[(usize, Vec<f64>)],
    cfg: &SimulationConfig,
) -> Result<Vec<TrialSet>, SimulationError> {
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(p, trial)| {
            let (beta_index, beta) = &points[p];
            simulate_trial(
                sys,
                control,
                beta,
                cfg,
                TrialTag {
                    beta_index: *beta_index,
                    trial,
                },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut samples = samples.into_iter();
    Ok(points
        .iter()
        .map(|(beta_index, beta)| TrialSet {
            beta_index: *beta_index,
            beta: beta.clone(),
            samples: samples.by_ref().take(cfg.trials).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example, NoiseConfig, SystemSpec, TimeGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: &str, g: &str, noise: NoiseKind, intensities: Vec<f64>) -> EnsembleSystem {
        EnsembleSystem::from_spec(&SystemSpec {
            name: None,
            bounds: vec![[0.0, 1.0]],
            horizon: 1.0,
            a: vec![vec![a.into()]],
            b: vec![vec!["1".into()]],
            g: vec![vec![g.into()]],
            x0: vec!["1".into()],
            xf: vec!["0".into()],
            noise: NoiseConfig {
                kind: noise,
                intensities,
            },
        })
        .unwrap()
    }

    #[test]
    fn rotation_closed_form() {
        let p = builtin_example("bm-oscillator").unwrap();
        let cfg = SimulationConfig::new(Scheme::Rk4, 5e-4);
        let s = simulate_deterministic(&p.system, None, &[7.0], &cfg).unwrap();
        assert!((s.terminal[0] - 7f64.cos()).abs() <= 1e-8);
        assert!((s.terminal[1] - 7f64.sin()).abs() <= 1e-8);
        assert_eq!(s.times, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_drift_keeps_initial_state() {
        let sys = scalar("0", "0", NoiseKind::None, vec![]);
        let s = simulate_deterministic(&sys, None, &[0.5], &SimulationConfig::new(Scheme::Rk4, 0.1)).unwrap();
        assert_eq!(s.terminal[0], 1.0);
    }

    #[test]
    fn step_must_divide_horizon() {
        let sys = scalar("0", "0", NoiseKind::None, vec![]);
        let err =
            simulate_deterministic(&sys, None, &[0.5], &SimulationConfig::new(Scheme::Rk4, 0.3)).unwrap_err();
        assert!(matches!(err, SimulationError::StepDoesNotDivideHorizon { .. }));
        assert!(simulate_deterministic(&sys, None, &[0.5], &SimulationConfig::new(Scheme::Rk4, 0.1)).is_ok());
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = scalar("100", "0", NoiseKind::None, vec![]);
        let err = simulate_deterministic(&sys, None, &[0.5], &SimulationConfig::new(Scheme::Rk4, 0.01))
            .unwrap_err();
        assert!(matches!(err, SimulationError::NonFiniteState { .. }));
    }

    #[test]
    fn incompatible_scheme_is_rejected() {
        let sys = scalar("0", "1", NoiseKind::Poisson, vec![1.0]);
        let cfg = SimulationConfig::new(Scheme::Sri15, 0.1);
        assert!(matches!(
            simulate_trial(&sys, None, &[0.5], &cfg, TrialTag::default()),
            Err(SimulationError::IncompatibleScheme { .. })
        ));
    }

    #[test]
    fn piecewise_control_is_integrated_exactly() {
        // x' = u with u = 1 on (0, 0.5], 3 on (0.5, 1]: x(1) = 1 + 0.5 + 1.5
        let sys = scalar("0", "0", NoiseKind::None, vec![]);
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let u = ControlSignal::new(grid, 1, vec![1.0, 3.0]).unwrap();
        let s = simulate_deterministic(&sys, Some(&u), &[0.5], &SimulationConfig::new(Scheme::Rk4, 0.25))
            .unwrap();
        assert!((s.terminal[0] - 3.0).abs() < 1e-14);
        // beyond the control horizon the input is zero
        let cfg = SimulationConfig {
            horizon: Some(2.0),
            ..SimulationConfig::new(Scheme::Rk4, 0.25)
        };
        let s = simulate_deterministic(&sys, Some(&u), &[0.5], &cfg).unwrap();
        assert!((s.terminal[0] - 3.0).abs() < 1e-14);
        // EM uses the step average of the control
        let sys = scalar("0", "0", NoiseKind::Brownian, vec![]);
        let cfg = SimulationConfig::new(Scheme::EulerMaruyama, 1.0 / 3.0);
        let s = simulate_trial(&sys, Some(&u), &[0.5], &cfg, TrialTag::default()).unwrap();
        assert!((s.terminal[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn poisson_without_arrivals_matches_rk4_bitwise() {
        let p = builtin_example("poisson-oscillator").unwrap();
        let sys = p
            .system
            .with_noise(NoiseSpec::Poisson {
                intensities: vec![0.0],
            })
            .unwrap();
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let vals: Vec<f64> = (0..800).map(|i| ((i as f64) * 0.37).sin()).collect();
        let u = ControlSignal::new(grid, 2, vals).unwrap();
        let cfg = SimulationConfig::new(Scheme::Poisson, 1e-3);
        let a = simulate_trial(&sys, Some(&u), &[3.0], &cfg, TrialTag::default()).unwrap();
        let b = simulate_deterministic(&sys, Some(&u), &[3.0], &SimulationConfig::new(Scheme::Rk4, 1e-3))
            .unwrap();
        assert_eq!(a.terminal, b.terminal);
        assert_eq!(a.jump_count(), 0);
    }

    #[test]
    fn zero_noise_em_and_sri_approach_rk4() {
        let p = builtin_example("bm-oscillator").unwrap();
        let sys = p.system.with_noise(NoiseSpec::Brownian).unwrap();
        let quiet = EnsembleSystem::from_spec(&SystemSpec {
            g: vec![vec!["0".into()], vec!["0".into()]],
            ..sys.to_spec()
        })
        .unwrap();
        let exact =
            simulate_deterministic(&quiet, None, &[2.0], &SimulationConfig::new(Scheme::Rk4, 1e-3)).unwrap();
        let err = |scheme, h| {
            let s = simulate_trial(
                &quiet,
                None,
                &[2.0],
                &SimulationConfig::new(scheme, h),
                TrialTag::default(),
            )
            .unwrap();
            (s.terminal - &exact.terminal).norm()
        };
        let (e1, e2) = (err(Scheme::EulerMaruyama, 1e-2), err(Scheme::EulerMaruyama, 5e-3));
        assert!((e1 / e2 - 2.0).abs() < 0.2, "EM ratio {}", e1 / e2);
        let (s1, s2) = (err(Scheme::Sri15, 1e-2), err(Scheme::Sri15, 5e-3));
        assert!(s1 / s2 > 3.6, "SRI ratio {}", s1 / s2);
    }

    #[test]
    fn trials_are_reproducible() {
        let p = builtin_example("bm-oscillator").unwrap();
        let pgrid = ParameterGrid::uniform(p.system.bounds(), 3).unwrap();
        for scheme in [Scheme::EulerMaruyama, Scheme::Sri15] {
            let cfg = SimulationConfig {
                seed: 9,
                trials: 4,
                ..SimulationConfig::new(scheme, 0.01)
            };
            let a = run_ensemble(&p.system, None, &pgrid, None, &cfg).unwrap();
            let b = run_ensemble(&p.system, None, &pgrid, Some(&[0, 1, 2]), &cfg).unwrap();
            assert_eq!(a, b);
            assert_ne!(a[0].samples[0].terminal, a[0].samples[1].terminal);
            assert_ne!(a[0].samples[0].terminal, a[1].samples[0].terminal);
        }
    }

    #[test]
    fn consecutive_trials_are_uncorrelated() {
        let sys = scalar("-1", "1", NoiseKind::Brownian, vec![]);
        let pgrid = ParameterGrid::uniform(sys.bounds(), 1).unwrap();
        for scheme in [Scheme::EulerMaruyama, Scheme::Sri15] {
            let cfg = SimulationConfig {
                seed: 3,
                trials: 2000,
                ..SimulationConfig::new(scheme, 0.05)
            };
            let sets = run_ensemble(&sys, None, &pgrid, None, &cfg).unwrap();
            let x: Vec<f64> = sets[0].terminals().map(|v| v[0]).collect();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            let lag = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>();
            let rho = lag / var;
            assert!(rho.abs() <= 3.0 / (x.len() as f64).sqrt(), "{scheme:?}: {rho}");
        }
    }

    #[test]
    fn recording_stride() {
        let sys = scalar("-1", "0", NoiseKind::None, vec![]);
        let cfg = SimulationConfig {
            record_every: Some(2),
            ..SimulationConfig::new(Scheme::Rk4, 0.1)
        };
        let s = simulate_deterministic(&sys, None, &[0.5], &cfg).unwrap();
        assert_eq!(s.times.len(), 6);
        assert_eq!(s.times[0], 0.0);
        assert_eq!(*s.times.last().unwrap(), 1.0);
        assert_eq!(s.states.last().unwrap(), &s.terminal);
    }

    #[test]
    fn poisson_mean_increment() {
        let sys = scalar("0", "1", NoiseKind::Poisson, vec![20.0]);
        let pgrid = ParameterGrid::uniform(sys.bounds(), 1).unwrap();
        let cfg = SimulationConfig {
            seed: 1,
            trials: 1000,
            ..SimulationConfig::new(Scheme::Poisson, 0.1)
        };
        let sets = run_ensemble(&sys, None, &pgrid, None, &cfg).unwrap();
        let d: Vec<f64> = sets[0].terminals().map(|x| x[0] - 1.0).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let se = (var / d.len() as f64).sqrt();
        assert!((mean - 20.0).abs() <= 3.0 * se, "mean {mean} se {se}");
        // every jump is a unit increment
        for s in &sets[0].samples {
            assert_eq!(s.terminal[0] - 1.0, s.jump_count() as f64);
        }
    }

    fn ou_increments(rng: &mut ChaCha8Rng, fine: usize, h: f64) -> Vec<(f64, f64)> {
        let inv_sqrt3 = 1.0 / 3f64.sqrt();
        (0..fine)
            .map(|_| {
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                (h.sqrt() * x1, 0.5 * h * h.sqrt() * (x1 + x2 * inv_sqrt3))
            })
            .collect()
    }

    // (ΔW, ΔZ) over two adjacent steps of length h.
    fn coarsen(incs: &[(f64, f64)], h: f64) -> Vec<(f64, f64)> {
        incs.chunks(2)
            .map(|p| (p[0].0 + p[1].0, p[0].1 + h * p[0].0 + p[1].1))
            .collect()
    }

    // exp(a(T−s)) integrated against dW with a first-order correction per step
    fn ou_exact(a: f64, sigma: f64, x0: f64, t_end: f64, incs: &[(f64, f64)], h: f64) -> f64 {
        let mut x = (a * t_end).exp() * x0;
        for (i, &(dw, dz)) in incs.iter().enumerate() {
            let f = (a * (t_end - i as f64 * h)).exp();
            x += sigma * (f * dw - a * f * (h * dw - dz));
        }
        x
    }

    #[test]
    fn sri15_strong_order_on_ou() {
        let (a, sigma, x0) = (-1.0, 0.5, 1.0);
        let c = Coefficients::constant(1, 1, 1, vec![a], vec![0.0], vec![sigma]);
        let fine_level = 14;
        let levels = [6, 7, 8, 9, 10];
        let mut sq = [0.0; 5];
        let paths = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..paths {
            let hf = 0.5f64.powi(fine_level);
            let mut incs = ou_increments(&mut rng, 1 << fine_level, hf);
            let exact = ou_exact(a, sigma, x0, 1.0, &incs, hf);
            let mut h = hf;
            for lvl in (levels[0]..fine_level).rev() {
                incs = coarsen(&incs, h);
                h *= 2.0;
                if let Some(pos) = levels.iter().position(|&l| l == lvl) {
                    let mut x = [x0];
                    let mut ws = Workspace::new(1, 1);
                    for &(dw, dz) in &incs {
                        sri15_step(&c, &c, &mut x, &[0.0], h, &[dw], &[dz], &mut ws);
                    }
                    sq[pos] += (x[0] - exact).powi(2);
                }
            }
        }
        let errs: Vec<f64> = sq.iter().map(|s| (s / paths as f64).sqrt()).collect();
        let slope = fit_slope(&levels.map(|l| 0.5f64.powi(l)), &errs);
        assert!(slope >= 1.4, "strong slope {slope}, errors {errs:?}");
    }

    fn fit_slope(h: &[f64], e: &[f64]) -> f64 {
        let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = e.iter().map(|v| v.ln()).collect();
        let (mx, my) = (
            xs.iter().sum::<f64>() / xs.len() as f64,
            ys.iter().sum::<f64>() / ys.len() as f64,
        );
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn em_weak_order_on_ou() {
        let (a, sigma, x0) = (-1.0, 0.5, 1.0);
        let c = Coefficients::constant(1, 1, 1, vec![a], vec![0.0], vec![sigma]);
        let fine_level = 10;
        let levels = [3, 4, 5, 6, 7];
        let mut diff = [0.0; 5];
        let paths = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..paths {
            let hf = 0.5f64.powi(fine_level);
            let mut incs = ou_increments(&mut rng, 1 << fine_level, hf);
            let exact = ou_exact(a, sigma, x0, 1.0, &incs, hf);
            let mut h = hf;
            for lvl in (levels[0]..fine_level).rev() {
                incs = coarsen(&incs, h);
                h *= 2.0;
                if let Some(pos) = levels.iter().position(|&l| l == lvl) {
                    let mut x = [x0];
                    let mut ws = Workspace::new(1, 1);
                    for &(dw, _) in &incs {
                        em_step(&c, &mut x, &[0.0], h, &[dw], &mut ws);
                    }
                    diff[pos] += x[0] - exact;
                }
            }
        }
        let errs: Vec<f64> = diff.iter().map(|d| (d / paths as f64).abs()).collect();
        let slope = fit_slope(&levels.map(|l| 0.5f64.powi(l)), &errs);
        assert!(slope >= 0.8, "weak slope {slope}, errors {errs:?}");
    }
}
