//! Time integrators for the two-scale system
//!
//! ```text
//! dX = f(X, Y, u) dt + √2 σ^ε(X, Y, u) dW
//! dY = (1/ε) b(X, Y) dt + √(2/(εβ)) dW
//! ```
//!
//! with `b = −∇_yΦ`, for its deterministic averaged limit (RK4) and for the
//! averaged SDE (Euler–Maruyama). All noise comes from a [`BrownianStore`]
//! so that paths are reproducible and shareable across control laws.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::CoupledPotential;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("step fraction {fraction} exceeds the stability limit {limit} (h·(L + 1/γ)/ε must stay ≤ {limit})")]
    UnstableStep { fraction: f64, limit: f64 },
    #[error("Brownian store mismatch: {0}")]
    StoreMismatch(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("averaged covariance has eigenvalue {0:e} < -1e-8")]
    InvalidCovariance(f64),
    #[error("coefficient evaluation failed: {0}")]
    Evaluation(String),
}

/// Largest admissible `h·(L + 1/γ)/ε`.
pub const MAX_STEP_FRACTION: f64 = 0.1;

/// Default number of RK4 steps over the horizon.
pub const ODE_STEPS: usize = 2000;

/// A control as a function of time, slow state and fast state. Standard
/// controls ignore `y`; extended controls do not.
pub trait Policy: Sync {
    fn control(&self, t: f64, x: &[f64], y: &[f64]) -> f64;

    /// The control at `(t, x)` when it does not depend on `y` there.
    fn y_free_value(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }
}

impl<F: Fn(f64, &[f64], &[f64]) -> f64 + Sync> Policy for F {
    fn control(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        self(t, x, y)
    }
}

/// Uses a fresh ChaCha stream to derive an independent child seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag.wrapping_add(1 << 32));
    rng.next_u64()
}

/// Gaussian increments with variance `grid_dt` per component; path `p`
/// reads stream `p` of a ChaCha generator keyed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrownianStore {
    pub seed: u64,
    pub dim: usize,
    pub grid_dt: f64,
}

pub struct PathIncrements {
    rng: ChaCha8Rng,
    scale: f64,
}

impl PathIncrements {
    #[inline]
    pub fn next_into(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *o = self.scale * z;
        }
    }
}

impl BrownianStore {
    pub fn new(seed: u64, dim: usize, grid_dt: f64) -> Self {
        Self { seed, dim, grid_dt }
    }

    pub fn path(&self, path: usize) -> PathIncrements {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        PathIncrements {
            rng,
            scale: self.grid_dt.sqrt(),
        }
    }

    /// Increment `(path, k)`, regenerated from the start of the path.
    pub fn increment(&self, path: usize, k: usize) -> Vec<f64> {
        let mut it = self.path(path);
        let mut out = vec![0.0; self.dim];
        for _ in 0..=k {
            it.next_into(&mut out);
        }
        out
    }
}

/// Slow diffusion coefficient; every variant is an `n × n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diffusion {
    Zero,
    /// `c·I`.
    Constant { c: f64 },
    /// `c·u·I`.
    ControlScaled { c: f64 },
    /// Constant matrix, row-major.
    Matrix { rows: Vec<Vec<f64>> },
    /// `√ε · base`.
    Vanishing { base: Box<Diffusion> },
}

impl Diffusion {
    pub fn is_zero(&self) -> bool {
        match self {
            Diffusion::Zero => true,
            Diffusion::Constant { c } | Diffusion::ControlScaled { c } => *c == 0.0,
            Diffusion::Matrix { rows } => rows.iter().flatten().all(|v| *v == 0.0),
            Diffusion::Vanishing { base } => base.is_zero(),
        }
    }

    /// The `ε → 0` limit.
    pub fn limit(&self) -> Diffusion {
        match self {
            Diffusion::Vanishing { .. } => Diffusion::Zero,
            other => other.clone(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SdeError> {
        match self {
            Diffusion::Matrix { rows } if rows.len() != n || rows.iter().any(|r| r.len() != n) => {
                Err(SdeError::InvalidSpec(format!("diffusion matrix must be {n}x{n}")))
            }
            Diffusion::Vanishing { base } => base.validate(n),
            _ => Ok(()),
        }
    }

    /// `out = σ dW`.
    pub fn apply(&self, eps: f64, u: f64, dw: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Diffusion::Constant { c } => out.iter_mut().zip(dw).for_each(|(o, w)| *o = c * w),
            Diffusion::ControlScaled { c } => out.iter_mut().zip(dw).for_each(|(o, w)| *o = c * u * w),
            Diffusion::Matrix { rows } => {
                for (o, r) in out.iter_mut().zip(rows) {
                    *o = r.iter().zip(dw).map(|(a, b)| a * b).sum();
                }
            }
            Diffusion::Vanishing { base } => {
                base.apply(eps, u, dw, out);
                let s = eps.sqrt();
                out.iter_mut().for_each(|o| *o *= s);
            }
        }
    }

    pub fn matrix(&self, eps: f64, u: f64, n: usize) -> DMatrix<f64> {
        match self {
            Diffusion::Zero => DMatrix::zeros(n, n),
            Diffusion::Constant { c } => DMatrix::identity(n, n) * *c,
            Diffusion::ControlScaled { c } => DMatrix::identity(n, n) * (c * u),
            Diffusion::Matrix { rows } => DMatrix::from_fn(n, n, |i, j| rows[i][j]),
            Diffusion::Vanishing { base } => base.matrix(eps, u, n) * eps.sqrt(),
        }
    }
}

type DriftFn = dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync;

/// Slow drift `f(x, y, u)`.
#[derive(Clone)]
pub enum SlowDrift {
    /// `−u (x − y)/γ`, the learning-rate-controlled descent drift.
    Model,
    /// Arbitrary `(x, y, u, out)`.
    Custom(Arc<DriftFn>),
}

impl fmt::Debug for SlowDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlowDrift::Model => write!(f, "Model"),
            SlowDrift::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl SlowDrift {
    #[inline]
    pub fn eval(&self, pot: &CoupledPotential, x: &[f64], y: &[f64], u: f64, out: &mut [f64]) {
        match self {
            SlowDrift::Model => {
                let k = -u / pot.gamma;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = k * (a - b);
                }
            }
            SlowDrift::Custom(f) => f(x, y, u, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoScaleSpec {
    pub pot: Arc<CoupledPotential>,
    pub epsilon: f64,
    pub sigma_slow: Diffusion,
    /// Drive `X` and `Y` by the same Brownian components.
    pub shared_noise: bool,
    pub drift: SlowDrift,
    /// `h·(L + 1/γ)/ε`, at most [`MAX_STEP_FRACTION`].
    pub step_fraction: f64,
    /// Keep `X` at `x0` (fast subsystem only).
    pub freeze_slow: bool,
}

impl TwoScaleSpec {
    pub fn new(pot: Arc<CoupledPotential>, epsilon: f64) -> Self {
        Self {
            pot,
            epsilon,
            sigma_slow: Diffusion::Zero,
            shared_noise: true,
            drift: SlowDrift::Model,
            step_fraction: MAX_STEP_FRACTION,
            freeze_slow: false,
        }
    }

    pub fn with_sigma(mut self, sigma: Diffusion) -> Self {
        self.sigma_slow = sigma;
        self
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(SdeError::InvalidSpec(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_fraction > 0.0) {
            return Err(SdeError::InvalidSpec("step fraction must be positive".into()));
        }
        if self.step_fraction > MAX_STEP_FRACTION {
            return Err(SdeError::UnstableStep {
                fraction: self.step_fraction,
                limit: MAX_STEP_FRACTION,
            });
        }
        self.sigma_slow.validate(self.pot.dim())
    }

    /// Fast noise coefficient `√(2/(εβ))`.
    pub fn fast_noise(&self) -> f64 {
        (2.0 / (self.epsilon * self.pot.beta)).sqrt()
    }

    /// Uniform step dividing `T`: `min(fraction·ε/(L + 1/γ), 10⁻³ T)`
    /// rounded down to `T/K`.
    pub fn step(&self, horizon: f64) -> (f64, usize) {
        let h = (self.step_fraction * self.epsilon / self.pot.stiffness()).min(1e-3 * horizon);
        let k = (horizon / h * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        (horizon / k as f64, k)
    }

    fn slow_noisy(&self) -> bool {
        !self.sigma_slow.is_zero() && !self.freeze_slow
    }

    /// Brownian dimension: `n` with shared noise (or no slow noise),
    /// `2n` with independent slow and fast components.
    pub fn noise_dim(&self) -> usize {
        let n = self.pot.dim();
        if self.slow_noisy() && !self.shared_noise {
            2 * n
        } else {
            n
        }
    }

    pub fn brownian_store(&self, seed: u64, horizon: f64) -> BrownianStore {
        BrownianStore::new(seed, self.noise_dim(), self.step(horizon).0)
    }
}

/// Receives every grid state of one path.
pub trait PathObserver {
    type Output: Send;
    /// `u` is the control applied over `[t_k, t_{k+1})`; at the final node
    /// it is the control evaluated there.
    fn observe(&mut self, k: usize, t: f64, x: &[f64], y: &[f64], u: f64);
    fn finish(self) -> Self::Output;
}

fn check_store(store: &BrownianStore, dim: usize, h: f64) -> Result<(), SdeError> {
    if store.dim != dim {
        return Err(SdeError::StoreMismatch(format!("dimension {} but integrator needs {dim}", store.dim)));
    }
    if (store.grid_dt - h).abs() > 1e-12 * h {
        return Err(SdeError::StoreMismatch(format!("grid_dt {} but integrator step is {h}", store.grid_dt)));
    }
    Ok(())
}

/// Euler–Maruyama over `[0, T]` for every path, streaming states to one
/// observer per path. Results are ordered by path index.
pub fn simulate_two_scale<P, O, F>(
    spec: &TwoScaleSpec,
    law: &P,
    x0: &[f64],
    y0: &[f64],
    horizon: f64,
    n_paths: usize,
    store: &BrownianStore,
    make_observer: F,
) -> Result<Vec<O::Output>, SdeError>
where
    P: Policy + ?Sized,
    O: PathObserver,
    F: Fn(usize) -> O + Sync,
{
    spec.validate()?;
    let n = spec.pot.dim();
    if x0.len() != n || y0.len() != n {
        return Err(SdeError::InvalidSpec(format!("initial states must have dimension {n}")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(SdeError::InvalidSpec(format!("horizon must be positive, got {horizon}")));
    }
    let (h, steps) = spec.step(horizon);
    check_store(store, spec.noise_dim(), h)?;
    let pot = &*spec.pot;
    let eps = spec.epsilon;
    let fast_k = h / eps;
    let fast_noise = spec.fast_noise();
    let slow_noisy = spec.slow_noisy();
    let r = spec.noise_dim();
    let run = |path: usize| -> Result<O::Output, SdeError> {
        let mut obs = make_observer(path);
        let mut noise = store.path(path);
        let mut x = x0.to_vec();
        let mut y = y0.to_vec();
        let mut fx = vec![0.0; n];
        let mut by = vec![0.0; n];
        let mut dw = vec![0.0; r];
        let mut sdw = vec![0.0; n];
        for k in 0..steps {
            let t = k as f64 * h;
            let u = law.control(t, &x, &y);
            obs.observe(k, t, &x, &y, u);
            noise.next_into(&mut dw);
            pot.fast_drift(&x, &y, &mut by);
            let dw_fast = if slow_noisy && !spec.shared_noise { &dw[n..] } else { &dw[..n] };
            if !spec.freeze_slow {
                spec.drift.eval(pot, &x, &y, u, &mut fx);
                if slow_noisy {
                    spec.sigma_slow.apply(eps, u, &dw[..n], &mut sdw);
                    for i in 0..n {
                        x[i] += h * fx[i] + std::f64::consts::SQRT_2 * sdw[i];
                    }
                } else {
                    for i in 0..n {
                        x[i] += h * fx[i];
                    }
                }
            }
            for i in 0..n {
                y[i] += fast_k * by[i] + fast_noise * dw_fast[i];
            }
            if !(x.iter().all(|v| v.is_finite()) && y.iter().all(|v| v.is_finite())) {
                return Err(SdeError::NonFinite { path, step: k + 1 });
            }
        }
        let u = law.control(horizon, &x, &y);
        obs.observe(steps, horizon, &x, &y, u);
        Ok(obs.finish())
    };
    (0..n_paths).into_par_iter().map(run).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleMeta {
    pub kind: &'static str,
    pub epsilon: Option<f64>,
    pub step: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub record_stride: usize,
}

/// Recorded paths on the grid `times` (every `record_stride`-th step plus
/// the final time). States are stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    pub dim_x: usize,
    pub dim_y: usize,
    pub x_paths: Vec<Vec<f64>>,
    pub y_paths: Vec<Vec<f64>>,
    pub controls_applied: Vec<Vec<f64>>,
    pub meta: BundleMeta,
}

impl TrajectoryBundle {
    pub fn n_paths(&self) -> usize {
        self.x_paths.len()
    }

    pub fn x(&self, path: usize, k: usize) -> &[f64] {
        &self.x_paths[path][k * self.dim_x..(k + 1) * self.dim_x]
    }

    pub fn y(&self, path: usize, k: usize) -> &[f64] {
        &self.y_paths[path][k * self.dim_y..(k + 1) * self.dim_y]
    }

    pub fn terminal_x(&self, path: usize) -> &[f64] {
        self.x(path, self.times.len() - 1)
    }

    /// CSV rows `path, t, x…, y…, u`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..self.dim_x).map(|d| format!("x{d}")));
        header.extend((0..self.dim_y).map(|d| format!("y{d}")));
        header.push("u".into());
        writeln!(out, "{}", header.join(","))?;
        for p in 0..self.n_paths() {
            for (k, t) in self.times.iter().enumerate() {
                write!(out, "{p},{t}")?;
                for v in self.x(p, k) {
                    write!(out, ",{v}")?;
                }
                if self.dim_y > 0 {
                    for v in self.y(p, k) {
                        write!(out, ",{v}")?;
                    }
                }
                writeln!(out, ",{}", self.controls_applied[p][k])?;
            }
        }
        Ok(())
    }
}

struct Recorder {
    stride: usize,
    last: usize,
    times: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    u: Vec<f64>,
}

impl PathObserver for Recorder {
    type Output = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

    fn observe(&mut self, k: usize, t: f64, x: &[f64], y: &[f64], u: f64) {
        if k % self.stride == 0 || k == self.last {
            self.times.push(t);
            self.x.extend_from_slice(x);
            self.y.extend_from_slice(y);
            self.u.push(u);
        }
    }

    fn finish(self) -> Self::Output {
        (self.times, self.x, self.y, self.u)
    }
}

fn assemble(parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>, dim_x: usize, dim_y: usize, meta: BundleMeta) -> TrajectoryBundle {
    let times = parts.first().map(|p| p.0.clone()).unwrap_or_default();
    let mut x_paths = Vec::with_capacity(parts.len());
    let mut y_paths = Vec::with_capacity(parts.len());
    let mut controls = Vec::with_capacity(parts.len());
    for (_, x, y, u) in parts {
        x_paths.push(x);
        y_paths.push(y);
        controls.push(u);
    }
    TrajectoryBundle {
        times,
        dim_x,
        dim_y,
        x_paths,
        y_paths,
        controls_applied: controls,
        meta,
    }
}

pub fn integrate_two_scale<P: Policy + ?Sized>(
    spec: &TwoScaleSpec,
    law: &P,
    x0: &[f64],
    y0: &[f64],
    horizon: f64,
    n_paths: usize,
    store: &BrownianStore,
    record_stride: usize,
) -> Result<TrajectoryBundle, SdeError> {
    let stride = record_stride.max(1);
    let (h, steps) = spec.step(horizon);
    let parts = simulate_two_scale(spec, law, x0, y0, horizon, n_paths, store, |_| Recorder {
        stride,
        last: steps,
        times: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        u: Vec::new(),
    })?;
    let n = spec.pot.dim();
    Ok(assemble(
        parts,
        n,
        n,
        BundleMeta {
            kind: "two_scale",
            epsilon: Some(spec.epsilon),
            step: h,
            seed: store.seed,
            n_paths,
            record_stride: stride,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeScheme {
    Rk4,
    Euler,
}

/// Deterministic path with the drift at each node, for Hermite
/// interpolation between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub drifts: Vec<Vec<f64>>,
}

impl DeterministicTrajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn step(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Cubic Hermite interpolation (clamped to the grid).
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if n == 1 {
            return self.states[0].clone();
        }
        let h = self.step();
        let s = ((t - self.times[0]) / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let w = s - i as f64;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * w) * (1.0 - w) * (1.0 - w),
            w * (1.0 - w) * (1.0 - w),
            w * w * (3.0 - 2.0 * w),
            w * w * (w - 1.0),
        );
        (0..self.states[i].len())
            .map(|d| {
                h00 * self.states[i][d] + h10 * h * self.drifts[i][d] + h01 * self.states[i + 1][d] + h11 * h * self.drifts[i + 1][d]
            })
            .collect()
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Integrates `dx/dt = f̄(t, x)` on `[0, T]` with `steps` uniform steps.
pub fn integrate_effective_ode<F>(mut fbar: F, x0: &[f64], horizon: f64, steps: usize, scheme: OdeScheme) -> Result<DeterministicTrajectory, SdeError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SdeError>,
{
    if steps == 0 || !(horizon > 0.0) {
        return Err(SdeError::InvalidSpec("ODE needs a positive horizon and at least one step".into()));
    }
    let h = horizon / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut drifts = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = fbar(t, &x)?;
        let next = match scheme {
            OdeScheme::Euler => axpy(&x, h, &k1),
            OdeScheme::Rk4 => {
                let k2 = fbar(t + 0.5 * h, &axpy(&x, 0.5 * h, &k1))?;
                let k3 = fbar(t + 0.5 * h, &axpy(&x, 0.5 * h, &k2))?;
                let k4 = fbar(t + h, &axpy(&x, h, &k3))?;
                (0..x.len())
                    .map(|d| x[d] + h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]))
                    .collect()
            }
        };
        times.push(t);
        states.push(x);
        drifts.push(k1);
        if !finite(&next) {
            return Err(SdeError::NonFinite { path: 0, step: k + 1 });
        }
        x = next;
    }
    let fx = fbar(horizon, &x)?;
    times.push(horizon);
    states.push(x);
    drifts.push(fx);
    Ok(DeterministicTrajectory { times, states, drifts })
}

/// Symmetric PSD square root by eigendecomposition; eigenvalues in
/// `[−1e−8, 0)` are clamped to zero.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, SdeError> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 {
        return Err(SdeError::InvalidCovariance(min));
    }
    let roots = eig.eigenvalues.map(|l| if l <= 1e-12 { 0.0 } else { l.sqrt() });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Euler–Maruyama for `dX = f̄ dt + √2 σ̄ dW` with observers per path.
pub fn simulate_effective_sde<F, S, O, M>(
    fbar: &F,
    sigbar: &S,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    n_paths: usize,
    store: &BrownianStore,
    make_observer: M,
) -> Result<Vec<O::Output>, SdeError>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>, SdeError> + Sync,
    S: Fn(f64, &[f64]) -> Result<DMatrix<f64>, SdeError> + Sync,
    O: PathObserver,
    M: Fn(usize) -> O + Sync,
{
    if steps == 0 || !(horizon > 0.0) {
        return Err(SdeError::InvalidSpec("SDE needs a positive horizon and at least one step".into()));
    }
    let n = x0.len();
    let h = horizon / steps as f64;
    check_store(store, n, h)?;
    let run = |path: usize| -> Result<O::Output, SdeError> {
        let mut obs = make_observer(path);
        let mut noise = store.path(path);
        let mut x = x0.to_vec();
        let mut dw = vec![0.0; n];
        for k in 0..steps {
            let t = k as f64 * h;
            obs.observe(k, t, &x, &[], f64::NAN);
            let f = fbar(t, &x)?;
            let s = sigbar(t, &x)?;
            noise.next_into(&mut dw);
            let sdw = &s * nalgebra::DVector::from_column_slice(&dw);
            for i in 0..n {
                x[i] += h * f[i] + std::f64::consts::SQRT_2 * sdw[i];
            }
            if !finite(&x) {
                return Err(SdeError::NonFinite { path, step: k + 1 });
            }
        }
        obs.observe(steps, horizon, &x, &[], f64::NAN);
        Ok(obs.finish())
    };
    (0..n_paths).into_par_iter().map(run).collect()
}

pub fn integrate_effective_sde<F, S>(
    fbar: &F,
    sigbar: &S,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    n_paths: usize,
    store: &BrownianStore,
    record_stride: usize,
) -> Result<TrajectoryBundle, SdeError>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>, SdeError> + Sync,
    S: Fn(f64, &[f64]) -> Result<DMatrix<f64>, SdeError> + Sync,
{
    let stride = record_stride.max(1);
    let parts = simulate_effective_sde(fbar, sigbar, x0, horizon, steps, n_paths, store, |_| Recorder {
        stride,
        last: steps,
        times: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        u: Vec::new(),
    })?;
    Ok(assemble(
        parts,
        x0.len(),
        0,
        BundleMeta {
            kind: "effective_sde",
            epsilon: None,
            step: horizon / steps as f64,
            seed: store.seed,
            n_paths,
            record_stride: stride,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::problem;
    use approx::assert_relative_eq;

    fn quad_pot() -> Arc<CoupledPotential> {
        Arc::new(CoupledPotential::new(problem("quadratic", 1).unwrap(), 0.5, 1.0).unwrap())
    }

    fn constant(u: f64) -> impl Fn(f64, &[f64], &[f64]) -> f64 + Sync {
        move |_, _, _| u
    }

    #[test]
    fn store_is_deterministic_with_right_variance() {
        let store = BrownianStore::new(5, 2, 0.01);
        let mut it = store.path(3);
        let mut buf = [0.0; 2];
        let mut draws = Vec::new();
        for _ in 0..10 {
            it.next_into(&mut buf);
            draws.push(buf);
        }
        assert_eq!(store.increment(3, 7).as_slice(), &draws[7]);
        assert_ne!(store.increment(4, 7), store.increment(3, 7));
        // χ² test of the sample variance at the 99% level.
        let n = 20_000;
        let mut it = store.path(0);
        let mut ss = 0.0;
        for _ in 0..n {
            it.next_into(&mut buf);
            ss += buf[0] * buf[0];
        }
        let stat = ss / 0.01;
        let z = (stat - n as f64) / (2.0 * n as f64).sqrt();
        assert!(z.abs() < 2.576, "z = {z}");
    }

    #[test]
    fn step_respects_stiffness_and_divides_horizon() {
        let spec = TwoScaleSpec::new(quad_pot(), 1e-3);
        let (h, k) = spec.step(1.0);
        assert!(h * spec.pot.stiffness() / spec.epsilon <= MAX_STEP_FRACTION * (1.0 + 1e-12));
        assert_relative_eq!(h * k as f64, 1.0, epsilon = 1e-12);
        let spec = TwoScaleSpec::new(quad_pot(), 10.0);
        assert_relative_eq!(spec.step(2.0).0, 2e-3, epsilon = 1e-15);
        let mut bad = TwoScaleSpec::new(quad_pot(), 1e-3);
        bad.step_fraction = 0.5;
        assert!(matches!(bad.validate(), Err(SdeError::UnstableStep { .. })));
    }

    #[test]
    fn zero_control_freezes_slow_state() {
        let spec = TwoScaleSpec::new(quad_pot(), 1e-2);
        let store = spec.brownian_store(1, 1.0);
        let b = integrate_two_scale(&spec, &constant(0.0), &[1.3], &[0.0], 1.0, 4, &store, 10).unwrap();
        for p in 0..4 {
            for k in 0..b.times.len() {
                assert_eq!(b.x(p, k), &[1.3]);
            }
        }
    }

    #[test]
    fn reproducible_bundles() {
        let spec = TwoScaleSpec::new(quad_pot(), 1e-2).with_sigma(Diffusion::Constant { c: 0.2 });
        let store = spec.brownian_store(9, 0.5);
        let a = integrate_two_scale(&spec, &constant(1.0), &[1.0], &[0.0], 0.5, 8, &store, 7).unwrap();
        let b = integrate_two_scale(&spec, &constant(1.0), &[1.0], &[0.0], 0.5, 8, &store, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(*a.times.last().unwrap(), 0.5);
    }

    #[test]
    fn store_mismatch_is_refused() {
        let spec = TwoScaleSpec::new(quad_pot(), 1e-2);
        let store = BrownianStore::new(1, 1, 0.123);
        assert!(matches!(
            integrate_two_scale(&spec, &constant(1.0), &[1.0], &[0.0], 1.0, 1, &store, 1),
            Err(SdeError::StoreMismatch(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let spec = TwoScaleSpec {
            drift: SlowDrift::Custom(Arc::new(|x: &[f64], _: &[f64], _: f64, out: &mut [f64]| out[0] = 1e300 * x[0].abs().max(1.0))),
            ..TwoScaleSpec::new(quad_pot(), 1e-2)
        };
        let store = spec.brownian_store(1, 1.0);
        let err = integrate_two_scale(&spec, &constant(1.0), &[1.0], &[0.0], 1.0, 2, &store, 1).unwrap_err();
        assert!(matches!(err, SdeError::NonFinite { .. }));
    }

    #[test]
    fn rk4_linear_decay() {
        // x' = −x/(1+γ) has the exact solution x0·e^{−t/(1+γ)}.
        let traj = integrate_effective_ode(|_, x| Ok(vec![-x[0] / 1.5]), &[1.0], 1.0, ODE_STEPS, OdeScheme::Rk4).unwrap();
        assert_relative_eq!(traj.terminal()[0], (-1.0f64 / 1.5).exp(), epsilon = 1e-13);
        assert_relative_eq!(traj.at(0.3337)[0], (-0.3337f64 / 1.5).exp(), epsilon = 1e-12);
        let frozen = integrate_effective_ode(|_, _| Ok(vec![0.0]), &[2.0], 1.0, 10, OdeScheme::Rk4).unwrap();
        assert!(frozen.states.iter().all(|s| s[0] == 2.0));
    }

    #[test]
    fn zero_diffusion_sde_is_euler_ode() {
        let f = |_: f64, x: &[f64]| Ok(vec![-x[0] / 1.5]);
        let s = |_: f64, _: &[f64]| Ok(DMatrix::zeros(1, 1));
        let store_a = BrownianStore::new(1, 1, 0.01);
        let store_b = BrownianStore::new(2, 1, 0.01);
        let a = integrate_effective_sde(&f, &s, &[1.0], 1.0, 100, 3, &store_a, 1).unwrap();
        let b = integrate_effective_sde(&f, &s, &[1.0], 1.0, 100, 3, &store_b, 1).unwrap();
        let ode = integrate_effective_ode(f, &[1.0], 1.0, 100, OdeScheme::Euler).unwrap();
        for p in 0..3 {
            assert_eq!(a.x_paths[p], b.x_paths[p]);
            for k in 0..=100 {
                assert_eq!(a.x(p, k)[0], ode.states[k][0]);
            }
        }
    }

    #[test]
    fn constant_diffusion_terminal_variance() {
        let c = 0.5;
        let f = |_: f64, _: &[f64]| Ok(vec![0.0, 0.0]);
        let s = |_: f64, _: &[f64]| Ok(DMatrix::identity(2, 2) * c);
        let store = BrownianStore::new(3, 2, 0.1);
        let b = integrate_effective_sde(&f, &s, &[0.0, 0.0], 1.0, 10, 20_000, &store, 10).unwrap();
        for d in 0..2 {
            let v: Vec<f64> = (0..b.n_paths()).map(|p| b.terminal_x(p)[d]).collect();
            let var = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
            // Var = 2c²T; the sample variance has standard error ≈ var·√(2/N).
            let expect = 2.0 * c * c;
            assert!((var - expect).abs() < 4.0 * expect * (2.0 / v.len() as f64).sqrt(), "{var}");
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let r = psd_sqrt(&m).unwrap();
        assert_relative_eq!(r[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(r[(1, 1)], 3.0, epsilon = 1e-12);
        let nearly = DMatrix::from_row_slice(1, 1, &[-1e-10]);
        assert_eq!(psd_sqrt(&nearly).unwrap()[(0, 0)], 0.0);
        let bad = DMatrix::from_row_slice(1, 1, &[-1e-6]);
        assert!(matches!(psd_sqrt(&bad), Err(SdeError::InvalidCovariance(_))));
    }

    #[test]
    fn bundle_csv_layout() {
        let spec = TwoScaleSpec::new(quad_pot(), 0.1);
        let store = spec.brownian_store(1, 0.01);
        let b = integrate_two_scale(&spec, &constant(1.0), &[1.0], &[0.0], 0.01, 2, &store, 1000).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "path,t,x0,y0,u");
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].starts_with("0,0,1,0,1"));
    }
}
