//! Control laws, payoff functionals, averaged coefficients and Monte-Carlo
//! value estimates.
//!
//! Standard laws depend on `(t, x)`; extended laws may also depend on the
//! fast variable `y`. In the perturbed system an extended law is applied as
//! the feedback `u_t = ν(t, X_t, Y_t)`; in the averaged system it is
//! integrated against `μ_x`, which is where it can beat every standard law.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gibbs::{GibbsError, GibbsFactory, GibbsRepresentation};
use crate::numerics::{golden_section_min, mean_and_se};
use crate::problems::{CoupledPotential, TestProblem};
use crate::sde::{
    integrate_effective_ode, psd_sqrt, simulate_effective_sde, simulate_two_scale, BrownianStore, DeterministicTrajectory, Diffusion,
    OdeScheme, PathObserver, Policy, SdeError, SlowDrift, TrajectoryBundle, TwoScaleSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
    #[error("law `{law}`: {source}")]
    Integration { law: String, source: SdeError },
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("invalid control law `{id}`: {reason}")]
    InvalidLaw { id: String, reason: String },
    #[error("law family is empty")]
    EmptyFamily,
    #[error("payoff horizon [{t0}, {t1}] does not match the trajectory grid [{g0}, {g1}]")]
    HorizonMismatch { t0: f64, t1: f64, g0: f64, g1: f64 },
    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),
}

/// Control set `U = [lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRange {
    pub lo: f64,
    pub hi: f64,
}

impl ControlRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo - 1e-15 && u <= self.hi + 1e-15
    }

    /// `n` equally spaced points (just `lo` when the interval is a point).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        if n <= 1 || self.hi == self.lo {
            return vec![self.lo];
        }
        (0..n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawKind {
    Constant {
        u: f64,
    },
    /// `values[j]` on `[breakpoints[j−1], breakpoints[j])`; right-continuous.
    Schedule {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    /// Piecewise constant in `t` (row `i` from `times[i]`), linear in the
    /// first slow coordinate, clamped at the grid ends.
    Feedback {
        times: Vec<f64>,
        xs: Vec<f64>,
        table: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw {
    pub id: String,
    pub range: ControlRange,
    pub kind: LawKind,
}

fn step_index(points: &[f64], t: f64) -> usize {
    points.partition_point(|&b| b <= t)
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl ControlLaw {
    pub fn constant(u: f64, range: ControlRange) -> Self {
        Self {
            id: format!("const_{u}"),
            range,
            kind: LawKind::Constant { u },
        }
    }

    /// `first` on `[0, τ)`, `second` afterwards.
    pub fn bang_bang(first: f64, second: f64, switch_time: f64, range: ControlRange) -> Self {
        Self {
            id: format!("bang_{first}_{second}_at_{switch_time}"),
            range,
            kind: LawKind::Schedule {
                breakpoints: vec![switch_time],
                values: vec![first, second],
            },
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |reason: &str| {
            Err(ControlError::InvalidLaw {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.range.lo <= self.range.hi) {
            return bad("empty control range");
        }
        let values: Vec<f64> = match &self.kind {
            LawKind::Constant { u } => vec![*u],
            LawKind::Schedule { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    return bad("schedule needs one more value than breakpoints");
                }
                if !strictly_increasing(breakpoints) {
                    return bad("breakpoints must be strictly increasing");
                }
                values.clone()
            }
            LawKind::Feedback { times, xs, table } => {
                if times.is_empty() || xs.is_empty() || table.len() != times.len() || table.iter().any(|r| r.len() != xs.len()) {
                    return bad("feedback table shape does not match its grids");
                }
                if !strictly_increasing(times) || !strictly_increasing(xs) {
                    return bad("feedback grids must be strictly increasing");
                }
                table.iter().flatten().copied().collect()
            }
        };
        if values.iter().any(|&u| !self.range.contains(u)) {
            return bad("value outside the control range");
        }
        Ok(())
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match &self.kind {
            LawKind::Constant { u } => *u,
            LawKind::Schedule { breakpoints, values } => values[step_index(breakpoints, t)],
            LawKind::Feedback { times, xs, table } => {
                let row = &table[step_index(times, t).saturating_sub(1)];
                let s = x[0];
                if xs.len() == 1 || s <= xs[0] {
                    return row[0];
                }
                if s >= xs[xs.len() - 1] {
                    return row[xs.len() - 1];
                }
                let j = step_index(xs, s) - 1;
                let w = (s - xs[j]) / (xs[j + 1] - xs[j]);
                row[j] * (1.0 - w) + row[j + 1] * w
            }
        }
    }
}

impl Policy for ControlLaw {
    fn control(&self, t: f64, x: &[f64], _y: &[f64]) -> f64 {
        self.value(t, x)
    }

    fn y_free_value(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.value(t, x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtendedKind {
    /// One row per time step starting at `t0`, nearest node on a uniform
    /// `y` grid (first fast coordinate), nearest-node extension outside.
    Table {
        t0: f64,
        dt: f64,
        y_min: f64,
        y_step: f64,
        values: Vec<Vec<f64>>,
    },
    /// `hi` where `(x − y)·∇φ(x) > 0` (the slow drift descends `φ`) while
    /// `t < switch_time`, `lo` otherwise.
    DescentAligned { problem: TestProblem, switch_time: f64 },
    /// `above` where `y₀ > threshold`, `below` otherwise.
    Threshold { threshold: f64, above: f64, below: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedControlLaw {
    pub id: String,
    pub range: ControlRange,
    pub kind: ExtendedKind,
}

impl ExtendedControlLaw {
    pub fn descent_aligned(problem: TestProblem, switch_time: f64, range: ControlRange) -> Self {
        Self {
            id: format!("descent_aligned_until_{switch_time}"),
            range,
            kind: ExtendedKind::DescentAligned { problem, switch_time },
        }
    }

    pub fn threshold(threshold: f64, above: f64, below: f64, range: ControlRange) -> Self {
        Self {
            id: format!("threshold_{threshold}_{above}_{below}"),
            range,
            kind: ExtendedKind::Threshold { threshold, above, below },
        }
    }

    /// Table on the nodes of a Gibbs support box.
    pub fn table(id: &str, t0: f64, dt: f64, y_grid: &[f64], values: Vec<Vec<f64>>, range: ControlRange) -> Self {
        let y_step = if y_grid.len() > 1 { y_grid[1] - y_grid[0] } else { 1.0 };
        Self {
            id: id.to_string(),
            range,
            kind: ExtendedKind::Table {
                t0,
                dt,
                y_min: y_grid[0],
                y_step,
                values,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |reason: &str| {
            Err(ControlError::InvalidLaw {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        let r = self.range;
        match &self.kind {
            ExtendedKind::Table { dt, y_step, values, .. } => {
                if !(*dt > 0.0 && *y_step > 0.0) || values.is_empty() || values.iter().any(|v| v.is_empty()) {
                    return bad("table needs positive steps and non-empty rows");
                }
                if values.iter().flatten().any(|&u| !r.contains(u)) {
                    return bad("table value outside the control range");
                }
            }
            ExtendedKind::DescentAligned { .. } => {}
            ExtendedKind::Threshold { above, below, .. } => {
                if !r.contains(*above) || !r.contains(*below) {
                    return bad("threshold values outside the control range");
                }
            }
        }
        Ok(())
    }
}

impl Policy for ExtendedControlLaw {
    fn control(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            ExtendedKind::Table {
                t0,
                dt,
                y_min,
                y_step,
                values,
            } => {
                let i = (((t - t0) / dt).floor().max(0.0) as usize).min(values.len() - 1);
                let row = &values[i];
                let j = ((y[0] - y_min) / y_step).round().clamp(0.0, (row.len() - 1) as f64) as usize;
                row[j]
            }
            ExtendedKind::DescentAligned { problem, switch_time } => {
                if t >= *switch_time {
                    return self.range.lo;
                }
                // Registered families are separable.
                let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * problem.grad_1d(*a)).sum();
                if s > 0.0 {
                    self.range.hi
                } else {
                    self.range.lo
                }
            }
            ExtendedKind::Threshold { threshold, above, below } => {
                if y[0] > *threshold {
                    *above
                } else {
                    *below
                }
            }
        }
    }

    fn y_free_value(&self, t: f64, _x: &[f64]) -> Option<f64> {
        match &self.kind {
            ExtendedKind::DescentAligned { switch_time, .. } if t >= *switch_time => Some(self.range.lo),
            ExtendedKind::Threshold { above, below, .. } if above == below => Some(*above),
            _ => None,
        }
    }
}

/// A member of a law family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum AnyLaw {
    Standard(ControlLaw),
    Extended(ExtendedControlLaw),
}

impl AnyLaw {
    pub fn id(&self) -> &str {
        match self {
            AnyLaw::Standard(l) => &l.id,
            AnyLaw::Extended(l) => &l.id,
        }
    }

    pub fn is_extended(&self) -> bool {
        matches!(self, AnyLaw::Extended(_))
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        match self {
            AnyLaw::Standard(l) => l.validate(),
            AnyLaw::Extended(l) => l.validate(),
        }
    }
}

impl Policy for AnyLaw {
    fn control(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        match self {
            AnyLaw::Standard(l) => l.control(t, x, y),
            AnyLaw::Extended(l) => l.control(t, x, y),
        }
    }

    fn y_free_value(&self, t: f64, x: &[f64]) -> Option<f64> {
        match self {
            AnyLaw::Standard(l) => l.y_free_value(t, x),
            AnyLaw::Extended(l) => l.y_free_value(t, x),
        }
    }
}

/// Constants on an `n`-point grid of `U`.
pub fn constant_family(range: ControlRange, n: usize) -> Vec<AnyLaw> {
    range.grid(n).into_iter().map(|u| AnyLaw::Standard(ControlLaw::constant(u, range))).collect()
}

/// `hi` then `lo` with the switch at each of `switch_times`.
pub fn bang_bang_family(range: ControlRange, switch_times: &[f64]) -> Vec<AnyLaw> {
    switch_times
        .iter()
        .map(|&tau| AnyLaw::Standard(ControlLaw::bang_bang(range.hi, range.lo, tau, range)))
        .collect()
}

/// `n` switch times equally spaced on `[0, T]`.
pub fn switch_grid(horizon: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![horizon];
    }
    (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect()
}

/// Best value over a one-parameter family sampled on `grid`, then refined by
/// golden-section search between the neighbours of the best node.
/// `cost` must be oriented so that smaller is better.
pub fn refine_on_grid<F: FnMut(f64) -> f64>(mut cost: F, grid: &[f64], tol: f64) -> (f64, f64) {
    let values: Vec<f64> = grid.iter().map(|&s| cost(s)).collect();
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    if grid.len() < 3 {
        return (grid[best], values[best]);
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(grid.len() - 1)];
    let (s, v) = golden_section_min(&mut cost, a, b, tol);
    if v < values[best] {
        (s, v)
    } else {
        (grid[best], values[best])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Sup,
    Inf,
}

impl Orientation {
    /// Whether `a` is strictly better than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Orientation::Sup => a > b,
            Orientation::Inf => a < b,
        }
    }

    /// `+1` for sup, `−1` for inf: multiplying a payoff by this turns the
    /// problem into a maximisation.
    pub fn sign(&self) -> f64 {
        match self {
            Orientation::Sup => 1.0,
            Orientation::Inf => -1.0,
        }
    }
}

type TerminalFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type RunningFn = dyn Fn(f64, &[f64], &[f64], f64) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum Terminal {
    Zero,
    Constant(f64),
    /// `φ(x)`.
    Loss(TestProblem),
    /// `min(φ(x), cap)`.
    ClampedLoss { problem: TestProblem, cap: f64 },
    /// `|y|²`.
    FastSquare,
    Custom { f: Arc<TerminalFn>, x_only: bool },
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Zero => write!(f, "Zero"),
            Terminal::Constant(c) => write!(f, "Constant({c})"),
            Terminal::Loss(p) => write!(f, "Loss({})", p.name),
            Terminal::ClampedLoss { problem, cap } => write!(f, "ClampedLoss({}, {cap})", problem.name),
            Terminal::FastSquare => write!(f, "FastSquare"),
            Terminal::Custom { .. } => write!(f, "Custom(..)"),
        }
    }
}

impl Terminal {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Terminal::Zero => 0.0,
            Terminal::Constant(c) => *c,
            Terminal::Loss(p) => p.eval(x),
            Terminal::ClampedLoss { problem, cap } => problem.eval(x).min(*cap),
            Terminal::FastSquare => y.iter().map(|v| v * v).sum(),
            Terminal::Custom { f, .. } => f(x, y),
        }
    }

    pub fn is_x_only(&self) -> bool {
        match self {
            Terminal::FastSquare => false,
            Terminal::Custom { x_only, .. } => *x_only,
            _ => true,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            Terminal::Zero | Terminal::Constant(_) => true,
            Terminal::ClampedLoss { problem, .. } => problem.lower_bounded,
            _ => false,
        }
    }
}

#[derive(Clone)]
pub enum Running {
    Zero,
    Constant(f64),
    /// `−|x − r|²`.
    Tracking { reference: Vec<f64> },
    Custom { f: Arc<RunningFn>, x_only: bool },
}

impl fmt::Debug for Running {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Running::Zero => write!(f, "Zero"),
            Running::Constant(c) => write!(f, "Constant({c})"),
            Running::Tracking { reference } => write!(f, "Tracking({reference:?})"),
            Running::Custom { .. } => write!(f, "Custom(..)"),
        }
    }
}

impl Running {
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64], u: f64) -> f64 {
        match self {
            Running::Zero => 0.0,
            Running::Constant(c) => *c,
            Running::Tracking { reference } => -x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Running::Custom { f, .. } => f(t, x, y, u),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Running::Zero) || matches!(self, Running::Constant(c) if *c == 0.0)
    }

    pub fn is_y_free(&self) -> bool {
        match self {
            Running::Custom { x_only, .. } => *x_only,
            _ => true,
        }
    }
}

/// `J = e^{λ(t₀−T)} g(X_T, Y_T) + ∫_{t₀}^T ℓ(s, X_s, Y_s, u_s) e^{λ(t₀−s)} ds`.
#[derive(Debug, Clone)]
pub struct PayoffSpec {
    pub terminal: Terminal,
    pub running: Running,
    pub lambda: f64,
    pub t0: f64,
    pub horizon: f64,
}

impl PayoffSpec {
    pub fn terminal_only(terminal: Terminal, horizon: f64) -> Self {
        Self {
            terminal,
            running: Running::Zero,
            lambda: 0.0,
            t0: 0.0,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ControlError::InvalidPayoff(format!("discount must be non-negative, got {}", self.lambda)));
        }
        if !(self.horizon > self.t0) {
            return Err(ControlError::InvalidPayoff("horizon must exceed the start time".into()));
        }
        Ok(())
    }

    fn discount(&self, s: f64) -> f64 {
        (self.lambda * (self.t0 - s)).exp()
    }

    /// Largest `(|g| + |ℓ|)/(1 + |x|² + |y|)` over the supplied points, the
    /// fitted constant of the growth condition.
    pub fn growth_constant(&self, points: &[(Vec<f64>, Vec<f64>)], controls: &[f64]) -> f64 {
        let mut k = 0.0f64;
        for (x, y) in points {
            let w = 1.0 + x.iter().map(|v| v * v).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>().sqrt();
            for &u in controls {
                let v = self.terminal.eval(x, y).abs().max(self.running.eval(self.t0, x, y, u).abs());
                k = k.max(v / w);
            }
        }
        k
    }
}

/// Streams one path's discounted payoff (trapezoid in time).
pub struct PayoffAccumulator<'a> {
    spec: &'a PayoffSpec,
    last: usize,
    acc: f64,
    prev: Option<(f64, f64)>,
}

impl<'a> PayoffAccumulator<'a> {
    pub fn new(spec: &'a PayoffSpec, last: usize) -> Self {
        Self {
            spec,
            last,
            acc: 0.0,
            prev: None,
        }
    }
}

impl PathObserver for PayoffAccumulator<'_> {
    type Output = f64;

    fn observe(&mut self, k: usize, t: f64, x: &[f64], y: &[f64], u: f64) {
        if !self.spec.running.is_zero() {
            let v = self.spec.running.eval(t, x, y, u) * self.spec.discount(t);
            if let Some((tp, vp)) = self.prev {
                self.acc += 0.5 * (t - tp) * (v + vp);
            }
            self.prev = Some((t, v));
        }
        if k == self.last {
            self.acc += self.spec.discount(t) * self.spec.terminal.eval(x, y);
        }
    }

    fn finish(self) -> f64 {
        self.acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub law_id: String,
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

impl ValueEstimate {
    pub fn from_samples(law_id: &str, samples: &[f64]) -> Self {
        let (mean, std_err) = mean_and_se(samples);
        Self {
            law_id: law_id.to_string(),
            mean,
            std_err,
            n_paths: samples.len(),
        }
    }

    pub fn exact(law_id: &str, value: f64) -> Self {
        Self {
            law_id: law_id.to_string(),
            mean: value,
            std_err: 0.0,
            n_paths: 1,
        }
    }
}

/// Writes `law_id, mean, std_err, n_paths` rows.
pub fn write_estimates_csv<W: Write>(out: &mut W, rows: &[ValueEstimate]) -> std::io::Result<()> {
    writeln!(out, "law_id,mean,std_err,n_paths")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.law_id, r.mean, r.std_err, r.n_paths)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueReport {
    pub orientation: Orientation,
    pub best: ValueEstimate,
    pub per_law: Vec<ValueEstimate>,
}

fn best_of(orientation: Orientation, per_law: Vec<ValueEstimate>) -> ValueReport {
    let mut best = per_law[0].clone();
    for e in &per_law[1..] {
        if orientation.better(e.mean, best.mean) {
            best = e.clone();
        }
    }
    ValueReport {
        orientation,
        best,
        per_law,
    }
}

/// Per-path discounted payoff of a recorded bundle.
pub fn payoff_samples(bundle: &TrajectoryBundle, spec: &PayoffSpec) -> Result<Vec<f64>, ControlError> {
    spec.validate()?;
    let (g0, g1) = (bundle.times[0], *bundle.times.last().unwrap());
    if (g0 - spec.t0).abs() > 1e-12 || (g1 - spec.horizon).abs() > 1e-9 * spec.horizon.abs().max(1.0) {
        return Err(ControlError::HorizonMismatch {
            t0: spec.t0,
            t1: spec.horizon,
            g0,
            g1,
        });
    }
    let last = bundle.times.len() - 1;
    Ok((0..bundle.n_paths())
        .map(|p| {
            let mut acc = PayoffAccumulator::new(spec, last);
            for (k, &t) in bundle.times.iter().enumerate() {
                let y = if bundle.dim_y > 0 { bundle.y(p, k) } else { &[][..] };
                acc.observe(k, t, bundle.x(p, k), y, bundle.controls_applied[p][k]);
            }
            acc.finish()
        })
        .collect())
}

pub fn payoff(bundle: &TrajectoryBundle, spec: &PayoffSpec) -> Result<ValueEstimate, ControlError> {
    Ok(ValueEstimate::from_samples("bundle", &payoff_samples(bundle, spec)?))
}

/// Per-path payoffs of one law in the perturbed system, streamed.
pub fn perturbed_payoffs(
    spec: &TwoScaleSpec,
    payoff: &PayoffSpec,
    law: &AnyLaw,
    x: &[f64],
    y: &[f64],
    n_paths: usize,
    store: &BrownianStore,
) -> Result<Vec<f64>, ControlError> {
    payoff.validate()?;
    law.validate()?;
    if payoff.t0 != 0.0 {
        return Err(ControlError::InvalidPayoff("simulations start at t = 0".into()));
    }
    let (_, steps) = spec.step(payoff.horizon);
    simulate_two_scale(spec, law, x, y, payoff.horizon, n_paths, store, |_| PayoffAccumulator::new(payoff, steps)).map_err(|e| {
        ControlError::Integration {
            law: law.id().to_string(),
            source: e,
        }
    })
}

/// Best payoff over a finite family in the perturbed system, all laws on
/// the same Brownian store.
pub fn estimate_value_perturbed(
    spec: &TwoScaleSpec,
    payoff: &PayoffSpec,
    x: &[f64],
    y: &[f64],
    family: &[AnyLaw],
    n_paths: usize,
    store: &BrownianStore,
    orientation: Orientation,
) -> Result<ValueReport, ControlError> {
    if family.is_empty() {
        return Err(ControlError::EmptyFamily);
    }
    let per_law = family
        .iter()
        .map(|law| {
            let s = perturbed_payoffs(spec, payoff, law, x, y, n_paths, store)?;
            Ok(ValueEstimate::from_samples(law.id(), &s))
        })
        .collect::<Result<Vec<_>, ControlError>>()?;
    Ok(best_of(orientation, per_law))
}

/// `f̄(x, ν) = ∫ f(x, y, ν(t, x, y)) dμ_x(y)`.
#[derive(Debug, Clone)]
pub struct EffectiveDrift {
    pub factory: GibbsFactory,
    pub f: SlowDrift,
}

pub fn effective_drift(factory: &GibbsFactory, f: &SlowDrift) -> EffectiveDrift {
    EffectiveDrift {
        factory: factory.clone(),
        f: f.clone(),
    }
}

impl EffectiveDrift {
    pub fn eval_on<P: Policy + ?Sized>(&self, g: &GibbsRepresentation, t: f64, law: &P) -> Vec<f64> {
        let n = g.x.len();
        let mut acc = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for i in 0..g.len() {
            let y = g.node(i);
            let u = law.control(t, &g.x, y);
            self.f.eval(&g.pot, &g.x, y, u, &mut buf);
            let w = g.weight(i);
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += w * b);
        }
        acc
    }

    pub fn eval<P: Policy + ?Sized>(&self, t: f64, x: &[f64], law: &P) -> Result<Vec<f64>, ControlError> {
        if matches!(self.f, SlowDrift::Model) && law.y_free_value(t, x) == Some(0.0) {
            return Ok(vec![0.0; x.len()]);
        }
        Ok(self.eval_on(&self.factory.build(x)?, t, law))
    }
}

/// `σ̄(x, ν) = (∫ σσᵀ dμ_x)^{1/2}` using the `ε → 0` limit of `σ^ε`.
#[derive(Debug, Clone)]
pub struct EffectiveDiffusion {
    pub factory: GibbsFactory,
    pub sigma: Diffusion,
}

pub fn effective_diffusion(factory: &GibbsFactory, sigma: &Diffusion) -> EffectiveDiffusion {
    EffectiveDiffusion {
        factory: factory.clone(),
        sigma: sigma.limit(),
    }
}

impl EffectiveDiffusion {
    pub fn is_zero(&self) -> bool {
        self.sigma.is_zero()
    }

    pub fn covariance_on<P: Policy + ?Sized>(&self, g: &GibbsRepresentation, t: f64, law: &P) -> DMatrix<f64> {
        let n = g.x.len();
        let mut acc = DMatrix::zeros(n, n);
        for i in 0..g.len() {
            let u = law.control(t, &g.x, g.node(i));
            let s = self.sigma.matrix(0.0, u, n);
            acc += (&s * s.transpose()) * g.weight(i);
        }
        acc
    }

    pub fn eval_on<P: Policy + ?Sized>(&self, g: &GibbsRepresentation, t: f64, law: &P) -> Result<DMatrix<f64>, ControlError> {
        Ok(psd_sqrt(&self.covariance_on(g, t, law))?)
    }

    pub fn eval<P: Policy + ?Sized>(&self, t: f64, x: &[f64], law: &P) -> Result<DMatrix<f64>, ControlError> {
        if self.is_zero() {
            return Ok(DMatrix::zeros(x.len(), x.len()));
        }
        self.eval_on(&self.factory.build(x)?, t, law)
    }
}

/// `ḡ(x) = ∫ g(x, y) dμ_x` and `ℓ̄(t, x, ν) = ∫ ℓ(t, x, y, ν(y)) dμ_x`.
#[derive(Debug, Clone)]
pub struct EffectivePayoff {
    pub factory: GibbsFactory,
    pub spec: PayoffSpec,
}

pub fn effective_payoff(factory: &GibbsFactory, spec: &PayoffSpec) -> EffectivePayoff {
    EffectivePayoff {
        factory: factory.clone(),
        spec: spec.clone(),
    }
}

impl EffectivePayoff {
    pub fn terminal(&self, x: &[f64]) -> Result<f64, ControlError> {
        if self.spec.terminal.is_x_only() {
            return Ok(self.spec.terminal.eval(x, x));
        }
        let g = self.factory.build(x)?;
        Ok(g.expect(|y| self.spec.terminal.eval(x, y)))
    }

    pub fn running_on<P: Policy + ?Sized>(&self, g: &GibbsRepresentation, t: f64, law: &P) -> f64 {
        g.expect(|y| self.spec.running.eval(t, &g.x, y, law.control(t, &g.x, y)))
    }

    pub fn running<P: Policy + ?Sized>(&self, t: f64, x: &[f64], law: &P) -> Result<f64, ControlError> {
        if self.spec.running.is_zero() {
            return Ok(0.0);
        }
        Ok(self.running_on(&self.factory.build(x)?, t, law))
    }
}

/// The averaged control problem.
#[derive(Debug, Clone)]
pub struct EffectiveProblem {
    pub drift: EffectiveDrift,
    pub diffusion: EffectiveDiffusion,
    pub payoff: EffectivePayoff,
    pub ode_steps: usize,
}

impl EffectiveProblem {
    pub fn new(factory: &GibbsFactory, f: &SlowDrift, sigma: &Diffusion, payoff: &PayoffSpec) -> Self {
        Self {
            drift: effective_drift(factory, f),
            diffusion: effective_diffusion(factory, sigma),
            payoff: effective_payoff(factory, payoff),
            ode_steps: crate::sde::ODE_STEPS,
        }
    }

    pub fn pot(&self) -> &CoupledPotential {
        &self.drift.factory.pot
    }

    /// RK4 trajectory of the averaged ODE under `law`.
    pub fn trajectory<P: Policy + ?Sized>(&self, x0: &[f64], law: &P) -> Result<DeterministicTrajectory, ControlError> {
        let spec = &self.payoff.spec;
        let t0 = spec.t0;
        let fbar = |t: f64, x: &[f64]| self.drift.eval(t0 + t, x, law).map_err(|e| SdeError::Evaluation(e.to_string()));
        Ok(integrate_effective_ode(fbar, x0, spec.horizon - t0, self.ode_steps, OdeScheme::Rk4)?)
    }

    /// Payoff of a deterministic trajectory (trapezoid for `ℓ̄`).
    pub fn deterministic_payoff<P: Policy + ?Sized>(&self, traj: &DeterministicTrajectory, law: &P) -> Result<f64, ControlError> {
        let spec = &self.payoff.spec;
        let mut total = spec.discount(spec.horizon) * self.payoff.terminal(traj.terminal())?;
        if !spec.running.is_zero() {
            let vals = traj
                .times
                .iter()
                .zip(&traj.states)
                .map(|(&t, x)| Ok(self.payoff.running(spec.t0 + t, x, law)? * spec.discount(spec.t0 + t)))
                .collect::<Result<Vec<f64>, ControlError>>()?;
            total += crate::numerics::trapezoid(&vals, traj.step());
        }
        Ok(total)
    }

    pub fn law_payoffs(&self, x0: &[f64], law: &AnyLaw, n_paths: usize, store: &BrownianStore) -> Result<Vec<f64>, ControlError> {
        law.validate()?;
        let wrap = |e: ControlError| match e {
            ControlError::Sde(source) => ControlError::Integration {
                law: law.id().to_string(),
                source,
            },
            other => other,
        };
        if self.diffusion.is_zero() {
            let traj = self.trajectory(x0, law).map_err(wrap)?;
            return Ok(vec![self.deterministic_payoff(&traj, law)?]);
        }
        let spec = &self.payoff.spec;
        let eval_err = |e: ControlError| SdeError::Evaluation(e.to_string());
        let fbar = |t: f64, x: &[f64]| self.drift.eval(spec.t0 + t, x, law).map_err(eval_err);
        let sigbar = |t: f64, x: &[f64]| self.diffusion.eval(spec.t0 + t, x, law).map_err(eval_err);
        let steps = self.ode_steps;
        let running = &spec.running;
        let mut spec_eff = spec.clone();
        if !running.is_zero() {
            // ℓ̄ along the path needs μ_x; fold it into a y-free running cost.
            let pay = self.payoff.clone();
            let law = law.clone();
            spec_eff.running = Running::Custom {
                f: Arc::new(move |t, x, _, _| pay.running(t, x, &law).unwrap_or(f64::NAN)),
                x_only: true,
            };
        }
        if !spec.terminal.is_x_only() {
            let pay = self.payoff.clone();
            spec_eff.terminal = Terminal::Custom {
                f: Arc::new(move |x, _| pay.terminal(x).unwrap_or(f64::NAN)),
                x_only: true,
            };
        }
        simulate_effective_sde(&fbar, &sigbar, x0, spec.horizon - spec.t0, steps, n_paths, store, |_| {
            PayoffAccumulator::new(&spec_eff, steps)
        })
        .map_err(|e| ControlError::Integration {
            law: law.id().to_string(),
            source: e,
        })
    }
}

/// Best payoff over a family in the averaged system; exact (zero standard
/// error) when the averaged diffusion vanishes.
pub fn estimate_value_effective(
    problem: &EffectiveProblem,
    x: &[f64],
    family: &[AnyLaw],
    n_paths: usize,
    store: &BrownianStore,
    orientation: Orientation,
) -> Result<ValueReport, ControlError> {
    if family.is_empty() {
        return Err(ControlError::EmptyFamily);
    }
    problem.payoff.spec.validate()?;
    let per_law = family
        .iter()
        .map(|law| Ok(ValueEstimate::from_samples(law.id(), &problem.law_payoffs(x, law, n_paths, store)?)))
        .collect::<Result<Vec<_>, ControlError>>()?;
    Ok(best_of(orientation, per_law))
}
