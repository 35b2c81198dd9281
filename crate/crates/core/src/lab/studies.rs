//! The studies behind each subcommand. Every `run_*` function is a pure
//! function of the configuration (wall-clock timings aside) and returns a
//! typed report; `output` turns a report into tables and a summary.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::control::{
    bang_bang_family, estimate_value_perturbed, perturbed_payoffs, refine_on_grid, switch_grid, AnyLaw, ControlLaw, ControlRange,
    EffectiveProblem, ExtendedControlLaw, Orientation, PayoffSpec, Running, Terminal, ValueEstimate, ValueReport,
};
use crate::gibbs::{build_gibbs, local_entropy, local_entropy_gradient, moments, LangevinConfig, Method};
use crate::hjb::{solve_effective_hjb_1d, EffectiveHamiltonian, HjbConfig, HjbSolution, SchemeMeta};
use crate::numerics::mean_and_se;
use crate::problems::{Family, TestProblem};
use crate::sde::{
    derive_seed, integrate_effective_ode, integrate_two_scale, DeterministicTrajectory, Diffusion, OdeScheme, PathObserver, Policy,
    SdeError, SlowDrift, TwoScaleSpec, ODE_STEPS,
};

use super::config::TerminalChoice;
use super::{cell, check_budget, join_vec, Assertion, CsvTable, ExperimentConfig, LabError, StudyOutput, Summary};

const TAG_SAMPLE: u64 = 1;
const TAG_SIMULATE: u64 = 2;
const TAG_CONVERGE: u64 = 100;
const TAG_Y0: u64 = 200;
const TAG_VALUE: u64 = 300;
const TAG_QUASI_LAW: u64 = 400;
const TAG_QUASI_FAMILY: u64 = 500;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn along_first_axis(s: f64, dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    x[0] = s;
    x
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn s(v: f64) -> String {
    v.to_string()
}

// ---------------------------------------------------------------- entropy

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRow {
    pub x: f64,
    pub phi_gamma: f64,
    pub grad: f64,
    pub grad_fd: f64,
    pub rel_err: f64,
    pub m1: f64,
    pub m2: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthRow {
    pub x: f64,
    pub m1: f64,
    pub m2: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub rows: Vec<EntropyRow>,
    pub max_rel_err: f64,
    pub growth: Vec<GrowthRow>,
    /// `max (𝔪₁ + √𝔪₂)/(1 + |x|)` on the configured grid and on the grid
    /// with half the spacing.
    pub growth_constant: f64,
    pub growth_constant_refined: f64,
    pub runtime_s: f64,
}

fn growth_rows(cfg: &ExperimentConfig, points: usize) -> Result<Vec<GrowthRow>, LabError> {
    let factory = cfg.factory()?;
    let dim = cfg.problem.dim;
    let r = cfg.entropy.growth_x_max;
    linspace(-r, r, points)
        .par_iter()
        .map(|&s| {
            let x = along_first_axis(s, dim);
            let m = moments(&factory.build(&x)?)?;
            Ok(GrowthRow {
                x: s,
                m1: m.m1,
                m2: m.m2,
                ratio: (m.m1 + m.m2.sqrt()) / (1.0 + norm(&x)),
            })
        })
        .collect()
}

fn max_ratio(rows: &[GrowthRow]) -> f64 {
    rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max)
}

/// Tabulates `φ_γ`, `∇φ_γ` (first component) against a central difference of
/// `φ_γ`, and fits the moment-growth constant.
pub fn run_entropy(cfg: &ExperimentConfig) -> Result<EntropyReport, LabError> {
    let start = Instant::now();
    let e = &cfg.entropy;
    let factory = cfg.factory()?;
    let dim = cfg.problem.dim;
    let nodes = (cfg.quadrature.points as f64).powi(dim as i32);
    check_budget(nodes * (3 * e.points + 3 * e.growth_points) as f64, cfg.op_budget)?;
    let h = e.fd_step;
    let rows = linspace(e.x_min, e.x_max, e.points)
        .par_iter()
        .map(|&s| {
            let x = along_first_axis(s, dim);
            let g = factory.build(&x)?;
            let phi = local_entropy(&g)?;
            let grad = local_entropy_gradient(&g)?.value[0];
            let plus = local_entropy(&factory.build(&along_first_axis(s + h, dim))?)?;
            let minus = local_entropy(&factory.build(&along_first_axis(s - h, dim))?)?;
            let grad_fd = (plus - minus) / (2.0 * h);
            let m = moments(&g)?;
            Ok(EntropyRow {
                x: s,
                phi_gamma: phi,
                grad,
                grad_fd,
                rel_err: (grad - grad_fd).abs() / grad_fd.abs().max(e.rel_floor),
                m1: m.m1,
                m2: m.m2,
                mean: m.mean[0],
            })
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let growth = growth_rows(cfg, e.growth_points)?;
    let refined = growth_rows(cfg, 2 * e.growth_points - 1)?;
    Ok(EntropyReport {
        max_rel_err,
        growth_constant: max_ratio(&growth),
        growth_constant_refined: max_ratio(&refined),
        rows,
        growth,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

impl EntropyReport {
    pub fn growth_change(&self) -> f64 {
        (self.growth_constant_refined - self.growth_constant).abs() / self.growth_constant
    }

    pub fn output(&self, cfg: &ExperimentConfig) -> StudyOutput {
        let mut summary = Summary::new("entropy", cfg);
        summary.assert(Assertion::at_most(
            "gradient_matches_finite_difference",
            self.max_rel_err,
            cfg.entropy.grad_rel_tol,
            format!("{} points on [{}, {}]", self.rows.len(), cfg.entropy.x_min, cfg.entropy.x_max),
        ));
        summary.assert(Assertion::check(
            "moment_growth_constant_finite",
            self.growth_constant.is_finite() && self.growth_constant > 0.0,
            format!("C = {}", self.growth_constant),
        ));
        summary.assert(Assertion::at_most(
            "moment_growth_constant_stable",
            self.growth_change(),
            cfg.entropy.growth_stability,
            format!("C = {} on {} points, {} on {}", self.growth_constant, self.growth.len(), self.growth_constant_refined, 2 * self.growth.len() - 1),
        ));
        summary.metric("growth_constant", self.growth_constant);
        summary.metric("growth_constant_refined", self.growth_constant_refined);
        summary.metric("max_rel_err", self.max_rel_err);
        let mut table = CsvTable::new("entropy", &["x", "phi_gamma", "grad", "grad_fd", "rel_err", "m1", "m2", "mean"]);
        for r in &self.rows {
            table.push(vec![s(r.x), s(r.phi_gamma), s(r.grad), s(r.grad_fd), s(r.rel_err), s(r.m1), s(r.m2), s(r.mean)]);
        }
        let mut growth = CsvTable::new("moment_growth", &["x", "m1", "m2", "ratio"]);
        for r in &self.growth {
            growth.push(vec![s(r.x), s(r.m1), s(r.m2), s(r.ratio)]);
        }
        StudyOutput {
            summary,
            tables: vec![table, growth],
            timings: BTreeMap::from([("entropy_s".to_string(), self.runtime_s)]),
        }
    }
}

// ----------------------------------------------------------------- sample

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub x: f64,
    pub quadrature: f64,
    /// `x/(1 + γ)` for the quadratic problem.
    pub closed_form: Option<f64>,
    pub langevin: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub rows: Vec<SampleRow>,
    pub langevin: LangevinConfig,
    pub runtime_s: f64,
}

fn langevin_config(cfg: &ExperimentConfig) -> LangevinConfig {
    let c = &cfg.sample;
    LangevinConfig {
        n_samples: c.n_samples,
        n_chains: c.n_chains,
        step: c.step,
        burn_in: c.burn_in,
        thin: c.thin,
        seed: derive_seed(cfg.seed, TAG_SAMPLE),
    }
}

/// Langevin gradient estimates against quadrature at the configured points.
pub fn run_sample(cfg: &ExperimentConfig) -> Result<SampleReport, LabError> {
    let pot = cfg.shared_potential()?;
    let lc = langevin_config(cfg);
    let step = lc.step.unwrap_or_else(|| crate::gibbs::default_langevin_step(&pot));
    let burn = lc.burn_in.unwrap_or_else(|| crate::gibbs::default_burn_in(&pot, step)) as f64;
    let thin = lc.thin.unwrap_or_else(|| crate::gibbs::default_thin(&pot, step)) as f64;
    let per_x = lc.n_chains as f64 * burn + lc.n_samples as f64 * thin;
    check_budget(per_x * cfg.sample.xs.len() as f64 * cfg.problem.dim as f64, cfg.op_budget)?;
    let quad = cfg.quadrature_method();
    let dim = cfg.problem.dim;
    let quadratic = matches!(pot.problem.family, Family::Quadratic);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.sample.xs.len());
    for &s in &cfg.sample.xs {
        let x = along_first_axis(s, dim);
        let q = local_entropy_gradient(&build_gibbs(&pot, &x, &quad)?)?.value[0];
        let l = local_entropy_gradient(&build_gibbs(&pot, &x, &Method::Langevin(lc))?)?;
        let se = l.std_err.as_ref().map_or(f64::NAN, |v| v[0]);
        rows.push(SampleRow {
            x: s,
            quadrature: q,
            closed_form: quadratic.then(|| s / (1.0 + pot.gamma)),
            langevin: l.value[0],
            std_err: se,
            z: (l.value[0] - q).abs() / se,
        });
    }
    Ok(SampleReport {
        rows,
        langevin: lc,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

impl SampleReport {
    pub fn max_closed_form_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.closed_form.map(|c| (r.quadrature - c).abs()))
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.into_iter().fold(0.0, f64::max))
    }

    pub fn max_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z).fold(0.0, f64::max)
    }

    pub fn max_std_err(&self) -> f64 {
        self.rows.iter().map(|r| r.std_err).fold(0.0, f64::max)
    }

    pub fn output(&self, cfg: &ExperimentConfig) -> StudyOutput {
        let c = &cfg.sample;
        let mut summary = Summary::new("sample", cfg);
        if let Some(err) = self.max_closed_form_error() {
            summary.assert(Assertion::at_most("quadrature_matches_closed_form", err, c.closed_form_tol, "x/(1+γ)"));
        }
        summary.assert(Assertion::at_most("langevin_within_sigmas", self.max_z(), c.sigmas, "|langevin − quadrature| / std_err"));
        summary.assert(Assertion::at_most("langevin_std_err", self.max_std_err(), c.max_std_err, format!("{} samples", c.n_samples)));
        summary.metric("max_z", self.max_z());
        summary.metric("max_std_err", self.max_std_err());
        let mut table = CsvTable::new("sample", &["x", "quadrature", "closed_form", "langevin", "std_err", "z"]);
        for r in &self.rows {
            table.push(vec![s(r.x), s(r.quadrature), cell(r.closed_form), s(r.langevin), s(r.std_err), s(r.z)]);
        }
        StudyOutput {
            summary,
            tables: vec![table],
            timings: BTreeMap::from([("langevin_s".to_string(), self.runtime_s)]),
        }
    }
}

// --------------------------------------------------------------- simulate

fn constant_law(u: f64) -> AnyLaw {
    AnyLaw::Standard(ControlLaw::constant(u, ControlRange::new(u.min(0.0), u.max(1.0))))
}

/// One recorded bundle of the perturbed system under a constant control.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<StudyOutput, LabError> {
    let c = &cfg.simulate;
    let pot = cfg.shared_potential()?;
    let mut spec = TwoScaleSpec::new(pot, c.epsilon).with_sigma(c.sigma.clone());
    spec.shared_noise = c.shared_noise;
    spec.validate()?;
    let (_, steps) = spec.step(c.horizon);
    check_budget((c.n_paths * steps) as f64, cfg.op_budget)?;
    let start = Instant::now();
    let store = spec.brownian_store(derive_seed(cfg.seed, TAG_SIMULATE), c.horizon);
    let bundle = integrate_two_scale(&spec, &constant_law(c.control), &c.x0, &c.y0, c.horizon, c.n_paths, &store, c.record_stride)?;
    let mut text = Vec::new();
    bundle.write_csv(&mut text)?;
    let text = String::from_utf8(text).expect("ascii csv");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut table = CsvTable::new("trajectory", &header);
    for l in lines {
        table.push(l.split(',').map(str::to_string).collect());
    }
    let mut summary = Summary::new("simulate", cfg);
    summary.metric("epsilon", c.epsilon);
    summary.metric("step", bundle.meta.step);
    summary.metric("n_paths", c.n_paths as f64);
    Ok(StudyOutput {
        summary,
        tables: vec![table],
        timings: BTreeMap::from([("simulate_s".to_string(), start.elapsed().as_secs_f64())]),
    })
}

// ------------------------------------------------------------ convergence

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub y0: Vec<f64>,
    pub metric: f64,
    pub std_err: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// One row per ε from the base initial fast state.
    pub rows: Vec<ConvergenceRow>,
    /// Base and variant initial fast states at the smallest ε.
    pub y0_rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log E_ε` against `log ε`.
    pub fitted_exponent: f64,
    pub limit_terminal: Vec<f64>,
}

/// Streams `∫|X − x̂|² ds` (trapezoid) plus `|X_T − x̂_T|²` for one path.
struct ErrorAccumulator<'a> {
    xhat: &'a [f64],
    n: usize,
    h: f64,
    last: usize,
    acc: f64,
}

impl PathObserver for ErrorAccumulator<'_> {
    type Output = f64;

    fn observe(&mut self, k: usize, _t: f64, x: &[f64], _y: &[f64], _u: f64) {
        let r = &self.xhat[k * self.n..(k + 1) * self.n];
        let d: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = if k == 0 || k == self.last { 0.5 } else { 1.0 };
        self.acc += w * self.h * d;
        if k == self.last {
            self.acc += d;
        }
    }

    fn finish(self) -> f64 {
        self.acc
    }
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn effective_trajectory(cfg: &ExperimentConfig, law: &AnyLaw, x0: &[f64], horizon: f64) -> Result<DeterministicTrajectory, LabError> {
    let payoff = PayoffSpec::terminal_only(Terminal::Zero, horizon);
    let problem = EffectiveProblem::new(&cfg.factory()?, &SlowDrift::Model, &Diffusion::Zero, &payoff);
    Ok(problem.trajectory(x0, law)?)
}

/// Mean-square distance between perturbed slow paths and the averaged ODE
/// trajectory, per ε and per initial fast state.
pub fn run_convergence_study(cfg: &ExperimentConfig) -> Result<ConvergenceReport, LabError> {
    let c = &cfg.converge;
    if !c.sigma.is_zero() {
        return Err(LabError::Config("the convergence study needs a vanishing slow diffusion (converge.sigma = zero)".into()));
    }
    if c.epsilons.is_empty() {
        return Err(LabError::Config("converge.epsilons is empty".into()));
    }
    let pot = cfg.shared_potential()?;
    let n = pot.dim();
    let spec_for = |eps: f64| TwoScaleSpec::new(Arc::clone(&pot), eps);
    let steps_of = |eps: f64| spec_for(eps).step(c.horizon).1 as f64;
    let eps_min = *c.epsilons.last().unwrap();
    let work: f64 = c.epsilons.iter().map(|&e| steps_of(e)).sum::<f64>() + c.y0_variants.len() as f64 * steps_of(eps_min);
    check_budget(work * c.n_paths as f64, cfg.op_budget)?;
    let law = constant_law(c.control);
    let limit = effective_trajectory(cfg, &law, &c.x0, c.horizon)?;
    let run = |eps: f64, y0: &[f64], seed: u64| -> Result<ConvergenceRow, LabError> {
        let start = Instant::now();
        let spec = spec_for(eps);
        let (h, steps) = spec.step(c.horizon);
        let xhat: Vec<f64> = (0..=steps).flat_map(|k| limit.at(k as f64 * h)).collect();
        let store = spec.brownian_store(seed, c.horizon);
        let samples = crate::sde::simulate_two_scale(&spec, &law, &c.x0, y0, c.horizon, c.n_paths, &store, |_| ErrorAccumulator {
            xhat: &xhat,
            n,
            h,
            last: steps,
            acc: 0.0,
        })?;
        let (metric, std_err) = mean_and_se(&samples);
        Ok(ConvergenceRow {
            epsilon: eps,
            y0: y0.to_vec(),
            metric,
            std_err,
            n_paths: c.n_paths,
            steps,
            runtime_s: start.elapsed().as_secs_f64(),
        })
    };
    let rows = c
        .epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| run(eps, &c.y0, derive_seed(cfg.seed, TAG_CONVERGE + i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut y0_rows = vec![rows.last().unwrap().clone()];
    for (j, y0) in c.y0_variants.iter().enumerate() {
        if y0.len() != n {
            return Err(LabError::Config(format!("y0 variant {j} has dimension {}, expected {n}", y0.len())));
        }
        y0_rows.push(run(eps_min, y0, derive_seed(cfg.seed, TAG_Y0 + j as u64))?);
    }
    let logs: Vec<(f64, f64)> = rows.iter().filter(|r| r.metric > 0.0).map(|r| (r.epsilon.ln(), r.metric.ln())).collect();
    let fitted_exponent = if logs.len() >= 2 {
        let (a, b): (Vec<f64>, Vec<f64>) = logs.into_iter().unzip();
        fit_slope(&a, &b)
    } else {
        f64::NAN
    };
    Ok(ConvergenceReport {
        rows,
        y0_rows,
        fitted_exponent,
        limit_terminal: limit.terminal().to_vec(),
    })
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

impl ConvergenceReport {
    /// Smallest `(E_i − E_{i+1}) / (k·combined std_err)` over consecutive ε;
    /// the decrease is significant when this is at least one.
    pub fn decrease_margins(&self, sigmas: f64) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| (w[0].metric - w[1].metric) / (sigmas * combined(w[0].std_err, w[1].std_err)))
            .collect()
    }

    /// Largest pairwise `|E_a − E_b| / combined std_err` over initial fast states.
    pub fn y0_spread(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.y0_rows.iter().enumerate() {
            for b in &self.y0_rows[i + 1..] {
                worst = worst.max((a.metric - b.metric).abs() / combined(a.std_err, b.std_err));
            }
        }
        worst
    }

    pub fn output(&self, cfg: &ExperimentConfig) -> StudyOutput {
        let c = &cfg.converge;
        let mut summary = Summary::new("converge", cfg);
        let margins = self.decrease_margins(c.decrease_sigmas);
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        summary.assert(Assertion {
            name: "metric_decreasing".into(),
            passed: margins.iter().all(|&m| m > 1.0),
            value: worst.is_finite().then_some(worst),
            threshold: Some(1.0),
            detail: format!("consecutive drops over {}·combined std_err", c.decrease_sigmas),
        });
        let last = self.rows.last().unwrap();
        summary.assert(Assertion::at_most("metric_below_threshold", last.metric, c.threshold, format!("ε = {}", last.epsilon)));
        if self.y0_rows.len() > 1 {
            summary.assert(Assertion::at_most("initial_fast_state_independence", self.y0_spread(), c.y0_sigmas, "pairwise |ΔE| / combined std_err"));
        }
        summary.metric("fitted_exponent", self.fitted_exponent);
        summary.metric("metric_min_epsilon", last.metric);
        let mut table = CsvTable::new("convergence", &["epsilon", "y0", "metric", "std_err", "n_paths", "steps"]);
        for r in self.rows.iter().chain(&self.y0_rows[1..]) {
            table.push(vec![s(r.epsilon), join_vec(&r.y0), s(r.metric), s(r.std_err), r.n_paths.to_string(), r.steps.to_string()]);
        }
        let mut timings = BTreeMap::new();
        for r in self.rows.iter().chain(&self.y0_rows[1..]) {
            timings.insert(format!("epsilon={} y0={}", r.epsilon, join_vec(&r.y0)), r.runtime_s);
        }
        StudyOutput {
            summary,
            tables: vec![table],
            timings,
        }
    }
}

// ---------------------------------------------------------- value ordering

#[derive(Debug, Clone, PartialEq)]
pub struct ValueOrderingReport {
    /// Standard laws shared by the limit and perturbed problems.
    pub standard: Vec<AnyLaw>,
    pub extended: Vec<AnyLaw>,
    /// `𝒱` per standard law (full-gradient descent of `φ_γ`).
    pub limit: Vec<ValueEstimate>,
    /// Averaged-system values of the extended laws.
    pub effective: Vec<ValueEstimate>,
    pub perturbed: ValueReport,
    pub v_limit: ValueEstimate,
    /// `𝒱̄`: best over the limit values and the extended laws.
    pub v_bar: ValueEstimate,
    pub best_law: AnyLaw,
    pub epsilon: f64,
    pub timings: BTreeMap<String, f64>,
}

/// `dx/dt = −u ∇φ_γ(x)` for a `y`-free law.
fn limit_value(cfg: &ExperimentConfig, law: &AnyLaw, terminal: &Terminal) -> Result<f64, LabError> {
    let factory = cfg.factory()?;
    let v = &cfg.value;
    let fbar = |t: f64, x: &[f64]| -> Result<Vec<f64>, SdeError> {
        let u = law
            .y_free_value(t, x)
            .ok_or_else(|| SdeError::Evaluation(format!("law `{}` depends on the fast state", law.id())))?;
        if u == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let g = factory.build(x).map_err(|e| SdeError::Evaluation(e.to_string()))?;
        let grad = local_entropy_gradient(&g).map_err(|e| SdeError::Evaluation(e.to_string()))?.value;
        Ok(grad.into_iter().map(|d| -u * d).collect())
    };
    let traj = integrate_effective_ode(fbar, &v.x0, v.horizon, ODE_STEPS, OdeScheme::Rk4)?;
    Ok(terminal.eval(traj.terminal(), &[]))
}

fn effective_value(problem: &EffectiveProblem, x0: &[f64], law: &AnyLaw) -> Result<f64, LabError> {
    let traj = problem.trajectory(x0, law)?;
    Ok(problem.deterministic_payoff(&traj, law)?)
}

/// Values of a one-parameter switch family on `grid`, refined around the
/// best node when `refine` is set. Returns the laws and values, the
/// refined law (if new) last.
fn switch_family<F, L>(grid: &[f64], refine: Option<f64>, mut make: L, mut value: F) -> Result<(Vec<AnyLaw>, Vec<f64>), LabError>
where
    L: FnMut(f64) -> AnyLaw,
    F: FnMut(&AnyLaw) -> Result<f64, LabError>,
{
    let mut laws = Vec::new();
    let mut values = Vec::new();
    for &tau in grid {
        let law = make(tau);
        values.push(value(&law)?);
        laws.push(law);
    }
    if let Some(tol) = refine {
        let mut err = None;
        let known: BTreeMap<u64, f64> = grid.iter().zip(&values).map(|(t, v)| (t.to_bits(), *v)).collect();
        let (tau, v) = refine_on_grid(
            |tau| {
                if let Some(v) = known.get(&tau.to_bits()) {
                    return *v;
                }
                match value(&make(tau)) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::INFINITY
                    }
                }
            },
            grid,
            tol,
        );
        if let Some(e) = err {
            return Err(e);
        }
        if !grid.contains(&tau) {
            laws.push(make(tau));
            values.push(v);
        }
    }
    Ok((laws, values))
}

fn best(values: &[ValueEstimate]) -> ValueEstimate {
    let mut b = values[0].clone();
    for v in &values[1..] {
        if v.mean < b.mean {
            b = v.clone();
        }
    }
    b
}

fn standard_ids(laws: &[AnyLaw]) -> Vec<&str> {
    laws.iter().filter(|l| !l.is_extended()).map(|l| l.id()).collect()
}

/// `𝒱^ε ≤ 𝒱` and `𝒱̄ ≤ 𝒱` for `g = φ`, `ℓ ≡ 0` under minimisation.
pub fn run_value_ordering(cfg: &ExperimentConfig) -> Result<ValueOrderingReport, LabError> {
    let v = &cfg.value;
    let pot = cfg.shared_potential()?;
    let problem: TestProblem = pot.problem.clone();
    let range = cfg.value_range();
    let n = pot.dim();
    if v.x0.len() != n || v.y0.len() != n {
        return Err(LabError::Config(format!("value.x0 and value.y0 need dimension {n}")));
    }
    let spec = TwoScaleSpec::new(Arc::clone(&pot), v.epsilon);
    let (_, steps) = spec.step(v.horizon);
    let n_std = v.constants + v.switch_points + 1;
    let n_ext = if v.extended { v.switch_points + 1 } else { 0 };
    let ode = (n_std + n_ext + 40) as f64 * (4 * ODE_STEPS) as f64 * (cfg.quadrature.points as f64).powi(n as i32);
    check_budget((n_std * v.n_paths * steps) as f64 + ode, cfg.op_budget)?;

    let terminal = Terminal::Loss(problem.clone());
    let payoff = PayoffSpec::terminal_only(terminal.clone(), v.horizon);
    let grid = switch_grid(v.horizon, v.switch_points);
    let refine = v.refine.then_some(v.refine_tol);
    let mut timings = BTreeMap::new();

    let start = Instant::now();
    let mut standard: Vec<AnyLaw> = crate::control::constant_family(range, v.constants);
    let mut limit_vals: Vec<f64> = standard.par_iter().map(|l| limit_value(cfg, l, &terminal)).collect::<Result<_, _>>()?;
    let bang = |tau: f64| bang_bang_family(range, &[tau]).remove(0);
    let (laws, vals) = switch_family(&grid, refine, bang, |l| limit_value(cfg, l, &terminal))?;
    standard.extend(laws);
    limit_vals.extend(vals);
    let limit: Vec<ValueEstimate> = standard.iter().zip(&limit_vals).map(|(l, &x)| ValueEstimate::exact(l.id(), x)).collect();
    timings.insert("limit_s".to_string(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let eff = EffectiveProblem::new(&cfg.factory()?, &SlowDrift::Model, &Diffusion::Zero, &payoff);
    let (extended, eff_vals) = if v.extended {
        let da = |tau: f64| AnyLaw::Extended(ExtendedControlLaw::descent_aligned(problem.clone(), tau, range));
        switch_family(&grid, refine, da, |l| effective_value(&eff, &v.x0, l))?
    } else {
        (Vec::new(), Vec::new())
    };
    let effective: Vec<ValueEstimate> = extended.iter().zip(&eff_vals).map(|(l, &x)| ValueEstimate::exact(l.id(), x)).collect();
    timings.insert("effective_s".to_string(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let store = spec.brownian_store(derive_seed(cfg.seed, TAG_VALUE), v.horizon);
    let perturbed = estimate_value_perturbed(&spec, &payoff, &v.x0, &v.y0, &standard, v.n_paths, &store, Orientation::Inf)?;
    timings.insert("perturbed_s".to_string(), start.elapsed().as_secs_f64());
    let perturbed_ids: Vec<&str> = perturbed.per_law.iter().map(|e| e.law_id.as_str()).collect();
    if perturbed_ids != standard_ids(&standard) {
        return Err(LabError::Config("perturbed and limit problems must use identical standard-law families".into()));
    }

    let v_limit = best(&limit);
    let all: Vec<ValueEstimate> = limit.iter().chain(&effective).cloned().collect();
    let v_bar = best(&all);
    let best_law = standard.iter().chain(&extended).find(|l| l.id() == v_bar.law_id).cloned().expect("best law is in the family");
    Ok(ValueOrderingReport {
        standard,
        extended,
        limit,
        effective,
        perturbed,
        v_limit,
        v_bar,
        best_law,
        epsilon: v.epsilon,
        timings,
    })
}

impl ValueOrderingReport {
    /// `𝒱^ε − 𝒱 − k·std_err`; the ordering holds when this is at most `tol`.
    pub fn perturbed_excess(&self, sigmas: f64) -> f64 {
        self.perturbed.best.mean - self.v_limit.mean - sigmas * self.perturbed.best.std_err
    }

    pub fn add_to(&self, cfg: &ExperimentConfig, summary: &mut Summary, table: &mut CsvTable) {
        let v = &cfg.value;
        summary.assert(Assertion::at_most(
            "effective_not_above_limit",
            self.v_bar.mean - self.v_limit.mean,
            0.0,
            format!("𝒱̄ = {} ({}), 𝒱 = {} ({})", self.v_bar.mean, self.v_bar.law_id, self.v_limit.mean, self.v_limit.law_id),
        ));
        summary.assert(Assertion::at_most(
            "perturbed_not_above_limit",
            self.perturbed_excess(v.sigmas),
            v.tol,
            format!("𝒱^ε = {} ± {} at ε = {}", self.perturbed.best.mean, self.perturbed.best.std_err, self.epsilon),
        ));
        summary.metric("v_limit", self.v_limit.mean);
        summary.metric("v_bar", self.v_bar.mean);
        summary.metric("v_perturbed", self.perturbed.best.mean);
        summary.metric("v_perturbed_std_err", self.perturbed.best.std_err);
        let name = &cfg.problem.name;
        for e in &self.perturbed.per_law {
            table.push(vec![name.clone(), e.law_id.clone(), "perturbed".into(), s(self.epsilon), s(e.mean), s(e.std_err)]);
        }
        for e in &self.limit {
            table.push(vec![name.clone(), e.law_id.clone(), "limit".into(), String::new(), s(e.mean), s(e.std_err)]);
        }
        for e in &self.effective {
            table.push(vec![name.clone(), e.law_id.clone(), "effective".into(), String::new(), s(e.mean), s(e.std_err)]);
        }
    }
}

// ---------------------------------------------------------- quasi-optimality

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiRow {
    pub epsilon: f64,
    pub law_id: String,
    /// `E[g(X^ε_T)]` under the effective-optimal law.
    pub achieved: ValueEstimate,
    /// `V^ε` over the same family, on an independent Brownian store.
    pub value: ValueEstimate,
    pub gap: f64,
    pub combined_std_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiReport {
    pub rows: Vec<QuasiRow>,
    pub runtime_s: f64,
}

/// Payoff of the effective-optimal law in the perturbed system against the
/// perturbed value, for bounded `g = min(φ, cap)`.
pub fn run_quasi_optimality(cfg: &ExperimentConfig, ordering: &ValueOrderingReport) -> Result<QuasiReport, LabError> {
    let q = &cfg.quasi;
    let v = &cfg.value;
    let pot = cfg.shared_potential()?;
    let terminal = Terminal::ClampedLoss {
        problem: pot.problem.clone(),
        cap: q.cap,
    };
    if !terminal.is_bounded() {
        return Err(LabError::Config("quasi-optimality needs a bounded terminal payoff".into()));
    }
    let payoff = PayoffSpec::terminal_only(terminal, v.horizon);
    let family: Vec<AnyLaw> = ordering.standard.iter().chain(&ordering.extended).cloned().collect();
    let work: f64 = q
        .epsilons
        .iter()
        .map(|&e| TwoScaleSpec::new(Arc::clone(&pot), e).step(v.horizon).1 as f64)
        .sum::<f64>()
        * (family.len() + 1) as f64
        * q.n_paths as f64;
    check_budget(work, cfg.op_budget)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    for (i, &eps) in q.epsilons.iter().enumerate() {
        let spec = TwoScaleSpec::new(Arc::clone(&pot), eps);
        let store_a = spec.brownian_store(derive_seed(cfg.seed, TAG_QUASI_LAW + i as u64), v.horizon);
        let store_b = spec.brownian_store(derive_seed(cfg.seed, TAG_QUASI_FAMILY + i as u64), v.horizon);
        let samples = perturbed_payoffs(&spec, &payoff, &ordering.best_law, &v.x0, &v.y0, q.n_paths, &store_a)?;
        let achieved = ValueEstimate::from_samples(ordering.best_law.id(), &samples);
        let value = estimate_value_perturbed(&spec, &payoff, &v.x0, &v.y0, &family, q.n_paths, &store_b, Orientation::Inf)?.best;
        rows.push(QuasiRow {
            epsilon: eps,
            law_id: ordering.best_law.id().to_string(),
            gap: achieved.mean - value.mean,
            combined_std_err: combined(achieved.std_err, value.std_err),
            achieved,
            value,
        });
    }
    Ok(QuasiReport {
        rows,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

impl QuasiReport {
    /// `gap − k·combined std_err` at the smallest ε.
    pub fn final_excess(&self, sigmas: f64) -> f64 {
        let r = self.rows.last().expect("at least one ε");
        r.gap - sigmas * r.combined_std_err
    }

    pub fn add_to(&self, cfg: &ExperimentConfig, summary: &mut Summary) -> CsvTable {
        let q = &cfg.quasi;
        if let Some(r) = self.rows.last() {
            summary.assert(Assertion::at_most(
                "quasi_optimality_gap",
                self.final_excess(q.sigmas),
                q.tol,
                format!("gap = {} ± {} at ε = {} under {}", r.gap, r.combined_std_err, r.epsilon, r.law_id),
            ));
            summary.metric("quasi_gap", r.gap);
            summary.metric("quasi_combined_std_err", r.combined_std_err);
        }
        let mut table = CsvTable::new(
            "quasi",
            &["epsilon", "law_id", "achieved", "achieved_std_err", "value", "value_std_err", "value_law", "gap", "combined_std_err"],
        );
        for r in &self.rows {
            table.push(vec![
                s(r.epsilon),
                r.law_id.clone(),
                s(r.achieved.mean),
                s(r.achieved.std_err),
                s(r.value.mean),
                s(r.value.std_err),
                r.value.law_id.clone(),
                s(r.gap),
                s(r.combined_std_err),
            ]);
        }
        table
    }
}

/// Ordering study followed (when enabled) by the quasi-optimality study.
pub fn run_value(cfg: &ExperimentConfig) -> Result<StudyOutput, LabError> {
    let ordering = run_value_ordering(cfg)?;
    let mut summary = Summary::new("value", cfg);
    let mut table = CsvTable::new("value", &["problem", "law_id", "kind", "epsilon", "mean", "std_err"]);
    ordering.add_to(cfg, &mut summary, &mut table);
    let mut tables = vec![table];
    let mut timings = ordering.timings.clone();
    if cfg.quasi.enabled {
        let quasi = run_quasi_optimality(cfg, &ordering)?;
        tables.push(quasi.add_to(cfg, &mut summary));
        timings.insert("quasi_s".to_string(), quasi.runtime_s);
    }
    Ok(StudyOutput { summary, tables, timings })
}

// -------------------------------------------------------------------- hjb

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationRow {
    pub x0: f64,
    pub v_hjb: f64,
    pub best_law: String,
    pub best_value: f64,
    /// `|best over every other switch time − best over all|`.
    pub resolution_gap: f64,
}

impl EnumerationRow {
    pub fn gap(&self) -> f64 {
        (self.v_hjb - self.best_value).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbReport {
    pub solution: HjbSolution,
    /// Max node error against the characteristics solution, when one exists.
    pub oracle_error: Option<f64>,
    pub refined: Option<(SchemeMeta, f64)>,
    pub enumeration: Vec<EnumerationRow>,
    pub timings: BTreeMap<String, f64>,
}

impl HjbReport {
    pub fn refinement_ratio(&self) -> Option<f64> {
        match (self.oracle_error, &self.refined) {
            (Some(e), Some((_, f))) => Some(e / f),
            _ => None,
        }
    }
}

fn hjb_terminal(choice: TerminalChoice, problem: &TestProblem) -> Terminal {
    match choice {
        TerminalChoice::Loss => Terminal::Loss(problem.clone()),
        TerminalChoice::ClampedLoss { cap } => Terminal::ClampedLoss {
            problem: problem.clone(),
            cap,
        },
        TerminalChoice::Zero => Terminal::Zero,
    }
}

/// Closed-form value along characteristics: a single control `u`, `ℓ ≡ 0`,
/// `g = φ` on the quadratic problem.
fn characteristics_oracle(cfg: &ExperimentConfig, u: f64) -> Option<impl Fn(f64, f64) -> f64> {
    let h = &cfg.hjb;
    let applicable = cfg.problem.name == "quadratic" && h.running_constant == 0.0 && h.terminal == TerminalChoice::Loss;
    let (gamma, horizon, lambda) = (cfg.model.gamma, h.horizon, h.lambda);
    applicable.then_some(move |t: f64, x: f64| {
        let z = x * (-u * (horizon - t) / (1.0 + gamma)).exp();
        (-lambda * (horizon - t)).exp() * 0.5 * z * z
    })
}

/// Solves the averaged HJB on a 1-D grid, checks it against the
/// characteristics solution when `U` is a single point, and against law
/// enumeration otherwise.
pub fn run_hjb(cfg: &ExperimentConfig) -> Result<HjbReport, LabError> {
    let h = &cfg.hjb;
    let pot = cfg.potential()?;
    if pot.dim() != 1 {
        return Err(LabError::Config("the HJB study is one-dimensional".into()));
    }
    let problem = pot.problem.clone();
    let range = ControlRange::new(h.u_min, h.u_max);
    let n_u = if h.u_min == h.u_max { 1 } else { h.n_u.max(1) };
    let running = if h.running_constant == 0.0 {
        Running::Zero
    } else {
        Running::Constant(h.running_constant)
    };
    let nodes = cfg.quadrature.points as f64;
    let n_t_guess = h.n_t.unwrap_or(h.n_x) as f64;
    let mut work = n_t_guess * h.n_x as f64 * nodes * n_u as f64;
    if h.refine && n_u == 1 {
        work *= 5.0;
    }
    if n_u > 1 {
        work += (2 * h.switch_points * h.check_x0.len() * 4 * ODE_STEPS) as f64 * nodes;
    }
    check_budget(work, cfg.op_budget)?;
    let factory = cfg.factory()?;
    let ham = EffectiveHamiltonian::new(factory.clone(), SlowDrift::Model, &Diffusion::Zero, running.clone(), range, n_u);
    let terminal = hjb_terminal(h.terminal, &problem);
    let g = |x: f64| terminal.eval(&[x], &[x]);
    let base = HjbConfig {
        domain: h.domain,
        n_x: h.n_x,
        n_t: h.n_t,
        horizon: h.horizon,
        lambda: h.lambda,
        scheme: h.scheme,
        orientation: Orientation::Inf,
    };
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let solution = solve_effective_hjb_1d(&ham, g, &base)?;
    timings.insert("solve_s".to_string(), start.elapsed().as_secs_f64());
    let oracle = if n_u == 1 { characteristics_oracle(cfg, range.lo) } else { None };
    let oracle_error = oracle.as_ref().map(|o| solution.max_error(o));
    let refined = match (&oracle, h.refine) {
        (Some(o), true) => {
            let start = Instant::now();
            let fine = HjbConfig {
                n_x: 2 * (h.n_x - 1) + 1,
                n_t: h.n_t.map(|n| 2 * n),
                ..base
            };
            let sol = solve_effective_hjb_1d(&ham, g, &fine)?;
            timings.insert("refined_solve_s".to_string(), start.elapsed().as_secs_f64());
            Some((sol.meta.clone(), sol.max_error(o)))
        }
        _ => None,
    };
    let mut enumeration = Vec::new();
    if n_u > 1 && !h.check_x0.is_empty() {
        let start = Instant::now();
        let payoff = PayoffSpec {
            terminal: terminal.clone(),
            running,
            lambda: h.lambda,
            t0: 0.0,
            horizon: h.horizon,
        };
        let eff = EffectiveProblem::new(&factory, &SlowDrift::Model, &Diffusion::Zero, &payoff);
        let taus = switch_grid(h.horizon, h.switch_points);
        let mut family = bang_bang_family(range, &taus);
        family.extend(taus.iter().map(|&t| AnyLaw::Extended(ExtendedControlLaw::descent_aligned(problem.clone(), t, range))));
        let m = taus.len();
        for &x0 in &h.check_x0 {
            let values: Vec<f64> = family.par_iter().map(|l| effective_value(&eff, &[x0], l)).collect::<Result<_, _>>()?;
            let (bi, bv) = values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            let coarse = values.iter().enumerate().filter(|(i, _)| (i % m) % 2 == 0).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
            enumeration.push(EnumerationRow {
                x0,
                v_hjb: solution.initial_value(x0),
                best_law: family[bi].id().to_string(),
                best_value: bv,
                resolution_gap: (coarse - bv).abs(),
            });
        }
        timings.insert("enumeration_s".to_string(), start.elapsed().as_secs_f64());
    }
    Ok(HjbReport {
        solution,
        oracle_error,
        refined,
        enumeration,
        timings,
    })
}

impl HjbReport {
    pub fn output(&self, cfg: &ExperimentConfig) -> Result<StudyOutput, LabError> {
        let h = &cfg.hjb;
        let mut summary = Summary::new("hjb", cfg);
        if let Some(err) = self.oracle_error {
            summary.assert(Assertion::at_most("characteristics_error", err, h.error_tol, format!("n_x = {}", h.n_x)));
            summary.metric("max_err", err);
        }
        if let Some(ratio) = self.refinement_ratio() {
            summary.assert(Assertion {
                name: "refinement_ratio".into(),
                passed: ratio >= h.refine_ratio,
                value: ratio.is_finite().then_some(ratio),
                threshold: Some(h.refine_ratio),
                detail: "error reduction when the spacing is halved".into(),
            });
            summary.metric("refinement_ratio", ratio);
        }
        for r in &self.enumeration {
            let allowed = h.enum_tol.max(r.resolution_gap);
            summary.assert(Assertion::at_most(
                &format!("enumeration_x0={}", r.x0),
                r.gap(),
                allowed,
                format!("V_HJB = {}, best law {} = {}", r.v_hjb, r.best_law, r.best_value),
            ));
        }
        let m = &self.solution.meta;
        summary.metric("dt", m.dt);
        summary.metric("dx", m.dx);
        summary.metric("cfl", m.cfl);
        let mut text = Vec::new();
        self.solution.write_csv(&mut text, h.t_stride)?;
        let text = String::from_utf8(text).expect("ascii csv");
        let mut values = CsvTable::new("hjb", &["t", "x", "V"]);
        for l in text.lines().skip(1) {
            values.push(l.split(',').map(str::to_string).collect());
        }
        let mut check = CsvTable::new("hjb_check", &["level", "scheme", "n_x", "n_t", "dx", "dt", "cfl", "max_err"]);
        check.push(vec![
            "base".into(),
            m.scheme.into(),
            m.n_x.to_string(),
            m.n_t.to_string(),
            s(m.dx),
            s(m.dt),
            s(m.cfl),
            cell(self.oracle_error),
        ]);
        if let Some((f, e)) = &self.refined {
            check.push(vec!["refined".into(), f.scheme.into(), f.n_x.to_string(), f.n_t.to_string(), s(f.dx), s(f.dt), s(f.cfl), s(*e)]);
        }
        let mut tables = vec![values, check];
        if !self.enumeration.is_empty() {
            let mut t = CsvTable::new("enumeration", &["x0", "v_hjb", "best_law", "best_value", "resolution_gap", "gap"]);
            for r in &self.enumeration {
                t.push(vec![s(r.x0), s(r.v_hjb), r.best_law.clone(), s(r.best_value), s(r.resolution_gap), s(r.gap())]);
            }
            tables.push(t);
        }
        Ok(StudyOutput {
            summary,
            tables,
            timings: self.timings.clone(),
        })
    }
}
