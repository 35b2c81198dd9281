//! The Gibbs measure `ρ^∞(dy; x) ∝ exp(−βΦ(y, x)) dy`, i.e. the invariant
//! law `μ_x` of the fast Langevin process with the slow variable frozen.
//!
//! Two realisations share one weighted-node representation:
//!
//! * **quadrature**: a uniform tensor grid (trapezoid weights) on a box
//!   centred at the minimiser of `Φ(·, x)`; the normaliser comes from a
//!   log-sum-exp so large `β` or deep wells do not overflow. Fast dimension
//!   must be 1 or 2.
//! * **langevin**: unadjusted Euler discretisation of
//!   `dY = −∇_yΦ(Y, x) ds + √(2/β) dW`, several independent chains, burn-in
//!   discarded. No Metropolis correction, so estimates carry an `O(h)` bias.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::CoupledPotential;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GibbsError {
    #[error("quadrature supports fast dimension 1 or 2, got {0}")]
    QuadratureDimension(usize),
    #[error("truncation box did not stabilise log Z after {doublings} doublings (last change {change:e})")]
    TruncationNotConverged { doublings: usize, change: f64 },
    #[error("Langevin chain {chain} produced a non-finite state at step {step}")]
    SamplerDiverged { chain: usize, step: usize },
    #[error("operation needs the exact normaliser; representation was built by Langevin sampling")]
    UnsupportedMethod,
    #[error("empty sample store")]
    EmptySamples,
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Nodes per fast dimension (raised automatically when the density is
    /// too narrow for the grid spacing).
    pub points: usize,
    /// Box half-width is `k · max(√(γ/β), 1)`.
    pub half_width_factor: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            points: 257,
            half_width_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    /// Total post-burn-in samples, spread as evenly as possible over chains.
    pub n_samples: usize,
    pub n_chains: usize,
    /// Overrides `min(0.1/(β(L + 1/γ)), 0.01)`.
    pub step: Option<f64>,
    /// Overrides `⌈10/(κ h)⌉`.
    pub burn_in: Option<usize>,
    /// Steps between retained samples; overrides `⌈1/(κ h)⌉`.
    #[serde(default)]
    pub thin: Option<usize>,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            n_samples: 100_000,
            n_chains: 64,
            step: None,
            burn_in: None,
            thin: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Quadrature(QuadratureConfig),
    Langevin(LangevinConfig),
}

impl Default for Method {
    fn default() -> Self {
        Method::Quadrature(QuadratureConfig::default())
    }
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Quadrature(_) => "quadrature",
            Method::Langevin(_) => "langevin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportBox {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub points_per_dim: usize,
    pub spacing: f64,
}

impl SupportBox {
    /// Node coordinates along one axis.
    pub fn axis(&self, d: usize) -> Vec<f64> {
        let lo = self.center[d] - self.half_width;
        (0..self.points_per_dim).map(|i| lo + i as f64 * self.spacing).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GibbsRepresentation {
    pub pot: Arc<CoupledPotential>,
    pub x: Vec<f64>,
    pub method: Method,
    /// `log Z(x)`; only known for quadrature.
    pub log_normalizer: Option<f64>,
    pub support_box: Option<SupportBox>,
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Chain boundaries into `nodes` for Langevin stores.
    chain_offsets: Vec<usize>,
}

/// Recommended Langevin step `min(0.1/(β(L + 1/γ)), 0.01)`.
pub fn default_langevin_step(pot: &CoupledPotential) -> f64 {
    (0.1 / (pot.beta * pot.stiffness())).min(0.01)
}

/// Burn-in of about ten relaxation times of the strongly monotone drift.
pub fn default_burn_in(pot: &CoupledPotential, step: f64) -> usize {
    (10.0 / (pot.kappa() * step)).ceil() as usize
}

/// One relaxation time between retained samples.
pub fn default_thin(pot: &CoupledPotential, step: f64) -> usize {
    (1.0 / (pot.kappa() * step)).ceil().max(1.0) as usize
}

pub fn build_gibbs(pot: &Arc<CoupledPotential>, x: &[f64], method: &Method) -> Result<GibbsRepresentation, GibbsError> {
    match method {
        Method::Quadrature(cfg) => build_quadrature(pot, x, cfg),
        Method::Langevin(cfg) => build_langevin(pot, x, cfg),
    }
}

/// `−βΦ(y, x)` on the tensor grid of `bx`, last coordinate fastest.
fn grid_exponents(pot: &CoupledPotential, x: &[f64], bx: &SupportBox) -> Vec<f64> {
    let n = bx.points_per_dim;
    let axes: Vec<Vec<f64>> = (0..x.len()).map(|d| bx.axis(d)).collect();
    if x.len() == 1 {
        return axes[0].iter().map(|&y| -pot.beta * pot.value(&[y], x)).collect();
    }
    let mut out = Vec::with_capacity(n * n);
    for &a in &axes[0] {
        for &b in &axes[1] {
            out.push(-pot.beta * pot.value(&[a, b], x));
        }
    }
    out
}

/// Trapezoid-weighted values on the sub-box of `n` points per dimension
/// starting at index `off` of a grid with `stride` points per dimension.
fn sub_box_weights(e: &[f64], m: usize, stride: usize, off: usize, n: usize) -> Vec<f64> {
    let trap = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    if m == 1 {
        return (0..n).map(|i| e[off + i] * trap(i)).collect();
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(e[(off + i) * stride + off + j] * trap(i) * trap(j));
        }
    }
    out
}

fn build_quadrature(pot: &Arc<CoupledPotential>, x: &[f64], cfg: &QuadratureConfig) -> Result<GibbsRepresentation, GibbsError> {
    let m = pot.dim();
    if m == 0 || m > 2 {
        return Err(GibbsError::QuadratureDimension(m));
    }
    if cfg.points < 3 {
        return Err(GibbsError::InvalidConfig("quadrature needs at least 3 points per dimension"));
    }
    let center = pot.minimizer(x);
    let mut half_width = cfg.half_width_factor * (pot.gamma / pot.beta).sqrt().max(1.0);
    // Narrowest possible density has standard deviation 1/√(β(L + 1/γ)).
    let max_spacing = 0.5 / (pot.beta * pot.stiffness()).sqrt();
    let mut points = cfg.points.max((2.0 * half_width / max_spacing).ceil() as usize + 1);
    // Odd counts keep the box nested, centred, inside its doubling.
    points |= 1;
    let mut doublings = 0;
    loop {
        let spacing = 2.0 * half_width / (points - 1) as f64;
        let wide_points = 2 * points - 1;
        let wide = SupportBox {
            center: center.clone(),
            half_width: 2.0 * half_width,
            points_per_dim: wide_points,
            spacing,
        };
        let raw = grid_exponents(pot, x, &wide);
        // Shifting by the maximum is the log-sum-exp trick, shared by both
        // boxes so each exponential is computed once.
        let top = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|r| (r - top).exp()).collect();
        let cell = m as f64 * spacing.ln();
        let inner = sub_box_weights(&e, m, wide_points, (points - 1) / 2, points);
        let log_z = top + inner.iter().sum::<f64>().ln() + cell;
        let log_z_wide = top + sub_box_weights(&e, m, wide_points, 0, wide_points).iter().sum::<f64>().ln() + cell;
        let change = (log_z_wide - log_z).abs();
        if change < 1e-10 {
            let bx = SupportBox {
                center: center.clone(),
                half_width,
                points_per_dim: points,
                spacing,
            };
            let axes: Vec<Vec<f64>> = (0..m).map(|d| bx.axis(d)).collect();
            let nodes = if m == 1 {
                axes[0].clone()
            } else {
                axes[0].iter().flat_map(|&a| axes[1].iter().flat_map(move |&b| [a, b])).collect()
            };
            let weights = normalize(inner);
            return Ok(GibbsRepresentation {
                pot: Arc::clone(pot),
                x: x.to_vec(),
                method: Method::Quadrature(*cfg),
                log_normalizer: Some(log_z),
                support_box: Some(bx),
                dim: m,
                nodes,
                weights,
                chain_offsets: Vec::new(),
            });
        }
        doublings += 1;
        if doublings > 8 {
            return Err(GibbsError::TruncationNotConverged { doublings, change });
        }
        half_width *= 2.0;
        points = wide_points;
    }
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

struct ChainPlan {
    step: f64,
    burn_in: usize,
    thin: usize,
    seed: u64,
}

fn run_chain(pot: &CoupledPotential, x: &[f64], start: &[f64], plan: &ChainPlan, keep: usize, chain: usize) -> Result<Vec<f64>, GibbsError> {
    let ChainPlan { step, burn_in, thin, seed } = *plan;
    let total = burn_in + keep.saturating_sub(1) * thin + usize::from(keep > 0);
    let m = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    let noise = (2.0 * step / pot.beta).sqrt();
    let mut out = Vec::with_capacity(keep * m);
    if m == 1 {
        let (x0, inv_gamma) = (x[0], 1.0 / pot.gamma);
        let mut y = start[0];
        for k in 0..total {
            let g = pot.problem.grad_1d(y) - (x0 - y) * inv_gamma;
            let xi: f64 = rng.sample(StandardNormal);
            y += -step * g + noise * xi;
            if k >= burn_in && (k - burn_in) % thin == 0 {
                if !y.is_finite() {
                    return Err(GibbsError::SamplerDiverged { chain, step: k });
                }
                out.push(y);
            }
        }
        if !y.is_finite() {
            return Err(GibbsError::SamplerDiverged { chain, step: total });
        }
        return Ok(out);
    }
    let mut y = start.to_vec();
    let mut g = vec![0.0; m];
    for k in 0..total {
        pot.grad_y(&y, x, &mut g);
        for (yi, gi) in y.iter_mut().zip(&g) {
            let xi: f64 = rng.sample(StandardNormal);
            *yi += -step * gi + noise * xi;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GibbsError::SamplerDiverged { chain, step: k });
        }
        if k >= burn_in && (k - burn_in) % thin == 0 {
            out.extend_from_slice(&y);
        }
    }
    Ok(out)
}

fn build_langevin(pot: &Arc<CoupledPotential>, x: &[f64], cfg: &LangevinConfig) -> Result<GibbsRepresentation, GibbsError> {
    if cfg.n_samples == 0 {
        return Err(GibbsError::EmptySamples);
    }
    if cfg.n_chains == 0 || cfg.n_chains > cfg.n_samples {
        return Err(GibbsError::InvalidConfig("need 1 ≤ n_chains ≤ n_samples"));
    }
    let step = cfg.step.unwrap_or_else(|| default_langevin_step(pot));
    if !(step.is_finite() && step > 0.0) {
        return Err(GibbsError::InvalidConfig("step must be positive"));
    }
    let burn_in = cfg.burn_in.unwrap_or_else(|| default_burn_in(pot, step));
    let thin = cfg.thin.unwrap_or_else(|| default_thin(pot, step));
    if thin == 0 {
        return Err(GibbsError::InvalidConfig("thinning interval must be positive"));
    }
    let plan = ChainPlan {
        step,
        burn_in,
        thin,
        seed: cfg.seed,
    };
    let start = pot.minimizer(x);
    let base = cfg.n_samples / cfg.n_chains;
    let extra = cfg.n_samples % cfg.n_chains;
    let chains: Vec<Vec<f64>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| {
            let keep = base + usize::from(c < extra);
            run_chain(pot, x, &start, &plan, keep, c)
        })
        .collect::<Result<_, _>>()?;
    let m = x.len();
    let mut offsets = Vec::with_capacity(cfg.n_chains + 1);
    let mut nodes = Vec::with_capacity(cfg.n_samples * m);
    offsets.push(0);
    for c in chains {
        nodes.extend_from_slice(&c);
        offsets.push(nodes.len() / m);
    }
    let n = cfg.n_samples as f64;
    Ok(GibbsRepresentation {
        pot: Arc::clone(pot),
        x: x.to_vec(),
        method: Method::Langevin(LangevinConfig {
            step: Some(step),
            burn_in: Some(burn_in),
            thin: Some(thin),
            ..*cfg
        }),
        log_normalizer: None,
        support_box: None,
        dim: m,
        nodes,
        weights: vec![1.0 / n; cfg.n_samples],
        chain_offsets: offsets,
    })
}

/// Weighted average with a standard error; the error is `None` for
/// quadrature (deterministic) stores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: Option<f64>,
}

impl GibbsRepresentation {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_quadrature(&self) -> bool {
        matches!(self.method, Method::Quadrature(_))
    }

    /// `∫ h dμ_x` by the node weights.
    pub fn expect<F: FnMut(&[f64]) -> f64>(&self, mut h: F) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * h(self.node(i))).sum()
    }

    /// Like [`expect`](Self::expect) with a between-chain standard error for
    /// Langevin stores (batch means for a single chain).
    pub fn estimate<F: FnMut(&[f64]) -> f64>(&self, mut h: F) -> Result<Estimate, GibbsError> {
        if self.is_empty() {
            return Err(GibbsError::EmptySamples);
        }
        if self.is_quadrature() {
            return Ok(Estimate {
                value: self.expect(h),
                std_err: None,
            });
        }
        let values: Vec<f64> = (0..self.len()).map(|i| h(self.node(i))).collect();
        let total = values.len() as f64;
        let mean = values.iter().sum::<f64>() / total;
        let groups: Vec<(usize, usize)> = if self.chain_offsets.len() > 2 {
            self.chain_offsets.windows(2).map(|w| (w[0], w[1])).collect()
        } else {
            let b = 20.min(values.len());
            let n = values.len();
            (0..b).map(|k| (k * n / b, (k + 1) * n / b)).collect()
        };
        let g = groups.len() as f64;
        if groups.len() < 2 {
            return Ok(Estimate {
                value: mean,
                std_err: Some(f64::NAN),
            });
        }
        // Ratio-estimator variance for unequal group sizes.
        let s: f64 = groups
            .iter()
            .map(|&(a, b)| {
                let sum: f64 = values[a..b].iter().sum();
                let r = sum - (b - a) as f64 * mean;
                r * r
            })
            .sum();
        let var = s * g / ((g - 1.0) * total * total);
        Ok(Estimate {
            value: mean,
            std_err: Some(var.sqrt()),
        })
    }

    /// `log ρ^∞(y; x)` (quadrature only).
    pub fn log_density(&self, y: &[f64]) -> Result<f64, GibbsError> {
        let lz = self.log_normalizer.ok_or(GibbsError::UnsupportedMethod)?;
        Ok(-self.pot.beta * self.pot.value(y, &self.x) - lz)
    }

    /// `∫ ρ^∞ dy` recomputed from the density on the grid.
    pub fn mass(&self) -> Result<f64, GibbsError> {
        let bx = self.support_box.as_ref().ok_or(GibbsError::UnsupportedMethod)?;
        let n = bx.points_per_dim;
        let cell = bx.spacing.powi(self.dim as i32);
        let mut total = 0.0;
        for i in 0..self.len() {
            let y = self.node(i);
            let mut trap = 1.0;
            let mut rem = i;
            for _ in 0..self.dim {
                let k = rem % n;
                rem /= n;
                if k == 0 || k == n - 1 {
                    trap *= 0.5;
                }
            }
            total += trap * cell * self.log_density(y)?.exp();
        }
        Ok(total)
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim).map(|d| self.expect(|y| y[d])).collect()
    }
}

/// `φ_γ(x) = −(1/β)[log Z(x) − (n/2) log(2πγ/β)]`.
pub fn local_entropy(g: &GibbsRepresentation) -> Result<f64, GibbsError> {
    let lz = g.log_normalizer.ok_or(GibbsError::UnsupportedMethod)?;
    let pot = &g.pot;
    let n = g.dim as f64;
    let log_kernel_mass = 0.5 * n * (2.0 * std::f64::consts::PI * pot.gamma / pot.beta).ln();
    Ok(-(lz - log_kernel_mass) / pot.beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub value: Vec<f64>,
    pub std_err: Option<Vec<f64>>,
}

/// `∇φ_γ(x) = (x − E_{μ_x}[y]) / γ`.
pub fn local_entropy_gradient(g: &GibbsRepresentation) -> Result<GradientEstimate, GibbsError> {
    let gamma = g.pot.gamma;
    let mut value = Vec::with_capacity(g.dim);
    let mut errs = Vec::with_capacity(g.dim);
    for d in 0..g.dim {
        let e = g.estimate(|y| y[d])?;
        value.push((g.x[d] - e.value) / gamma);
        errs.push(e.std_err.map(|s| s / gamma));
    }
    let std_err = if g.is_quadrature() {
        None
    } else {
        Some(errs.into_iter().map(|e| e.unwrap_or(f64::NAN)).collect())
    };
    Ok(GradientEstimate { value, std_err })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTable {
    pub x: Vec<f64>,
    pub m1: f64,
    pub m2: f64,
    pub mean: Vec<f64>,
    pub method: &'static str,
    /// Standard error of the first mean component (Langevin only).
    pub std_err: Option<f64>,
}

pub fn moments(g: &GibbsRepresentation) -> Result<MomentTable, GibbsError> {
    let norm2 = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>();
    let m1 = g.estimate(|y| norm2(y).sqrt())?.value;
    let m2 = g.estimate(norm2)?.value;
    let first = g.estimate(|y| y[0])?;
    Ok(MomentTable {
        x: g.x.clone(),
        m1,
        m2,
        mean: g.mean(),
        method: g.method.name(),
        std_err: first.std_err,
    })
}

/// Writes moment rows as CSV (`x, mean, m1, m2, method, std_err`; vector
/// columns are indexed when the dimension exceeds one).
pub fn write_moments_csv<W: Write>(out: &mut W, rows: &[MomentTable]) -> std::io::Result<()> {
    let dim = rows.first().map(|r| r.x.len()).unwrap_or(1);
    let cols = |name: &str| -> Vec<String> {
        if dim == 1 {
            vec![name.to_string()]
        } else {
            (0..dim).map(|d| format!("{name}_{d}")).collect()
        }
    };
    let mut header = cols("x");
    header.extend(cols("mean"));
    header.extend(["m1", "m2", "method", "std_err"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut fields: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
        fields.extend(r.mean.iter().map(|v| v.to_string()));
        fields.push(r.m1.to_string());
        fields.push(r.m2.to_string());
        fields.push(r.method.to_string());
        fields.push(r.std_err.map(|s| s.to_string()).unwrap_or_default());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Builds `μ_x` for arbitrary `x` with a fixed method.
#[derive(Debug, Clone)]
pub struct GibbsFactory {
    pub pot: Arc<CoupledPotential>,
    pub method: Method,
}

impl GibbsFactory {
    pub fn new(pot: CoupledPotential, method: Method) -> Self {
        Self {
            pot: Arc::new(pot),
            method,
        }
    }

    pub fn quadrature(pot: CoupledPotential) -> Self {
        Self::new(pot, Method::default())
    }

    pub fn build(&self, x: &[f64]) -> Result<GibbsRepresentation, GibbsError> {
        build_gibbs(&self.pot, x, &self.method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::problem;
    use approx::assert_relative_eq;

    fn pot(name: &str, gamma: f64, beta: f64) -> Arc<CoupledPotential> {
        Arc::new(CoupledPotential::new(problem(name, 1).unwrap(), gamma, beta).unwrap())
    }

    fn quad() -> Method {
        Method::default()
    }

    #[test]
    fn quadratic_gibbs_is_gaussian() {
        // Completing the square: mean x/(1+γ), variance γ/(β(1+γ)).
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[1.0], &quad()).unwrap();
        let mt = moments(&g).unwrap();
        assert_relative_eq!(mt.mean[0], 2.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(mt.m2 - mt.mean[0] * mt.mean[0], 1.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_gibbs_is_centered_gaussian() {
        for (gamma, beta) in [(1.0, 1.0), (0.3, 4.0), (2.0, 0.5)] {
            let g = build_gibbs(&pot("zero", gamma, beta), &[0.0], &quad()).unwrap();
            let mt = moments(&g).unwrap();
            assert!(mt.mean[0].abs() < 1e-12);
            assert_relative_eq!(mt.m2, gamma / beta, epsilon = 1e-10);
        }
    }

    #[test]
    fn density_is_normalized_and_proportional() {
        for (name, gamma) in [("quadratic", 0.5), ("saturated_double_well", 0.05), ("zero", 1.0)] {
            let p = pot(name, gamma, 1.0);
            for x in [-3.0, 0.0, 0.4, 2.0] {
                let g = build_gibbs(&p, &[x], &quad()).unwrap();
                assert!((g.mass().unwrap() - 1.0).abs() <= 1e-8);
                assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let (y1, y2) = ([x - 0.1], [x + 0.3]);
                let diff = g.log_density(&y1).unwrap() - g.log_density(&y2).unwrap();
                let expect = -p.beta * (p.value(&y1, &[x]) - p.value(&y2, &[x]));
                assert_relative_eq!(diff, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn local_entropy_closed_forms() {
        // Zero loss: the Gaussian kernel has unit mass.
        let g = build_gibbs(&pot("zero", 0.7, 2.0), &[1.3], &quad()).unwrap();
        assert!(local_entropy(&g).unwrap().abs() < 1e-12);
        // Quadratic: φ_γ(x) = x²/(2(1+γ)) + log(1+γ)/(2β).
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.0], &quad()).unwrap();
        assert_relative_eq!(local_entropy(&g).unwrap(), 0.5 * 1.5f64.ln(), epsilon = 1e-10);
        assert_relative_eq!(local_entropy(&g).unwrap(), 0.2027325540540822, epsilon = 1e-10);
    }

    #[test]
    fn local_entropy_tends_to_loss() {
        let x = 1.0;
        let mut gaps = Vec::new();
        for gamma in [0.1, 0.01] {
            let g = build_gibbs(&pot("quadratic", gamma, 1.0), &[x], &quad()).unwrap();
            let gap = (local_entropy(&g).unwrap() - 0.5 * x * x).abs();
            let closed = (x * x / (2.0 * (1.0 + gamma)) + (1.0 + gamma).ln() / 2.0 - 0.5 * x * x).abs();
            assert_relative_eq!(gap, closed, epsilon = 1e-9);
            assert!(gap <= gamma);
            gaps.push(gap);
        }
        assert!(gaps[1] < gaps[0]);
    }

    #[test]
    fn gradient_examples() {
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[1.0], &quad()).unwrap();
        let gr = local_entropy_gradient(&g).unwrap();
        assert_relative_eq!(gr.value[0], 1.0 / 1.5, epsilon = 1e-10);
        assert!(gr.std_err.is_none());
        let g = build_gibbs(&pot("zero", 0.8, 1.0), &[2.5], &quad()).unwrap();
        assert!(local_entropy_gradient(&g).unwrap().value[0].abs() < 1e-10);
        let g = build_gibbs(&pot("saturated_double_well", 0.05, 1.0), &[0.0], &quad()).unwrap();
        assert!(local_entropy_gradient(&g).unwrap().value[0].abs() < 1e-10);
    }

    #[test]
    fn moment_examples() {
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.0], &quad()).unwrap();
        let mt = moments(&g).unwrap();
        assert!(mt.mean[0].abs() < 1e-12);
        assert_relative_eq!(mt.m2, 1.0 / 3.0, epsilon = 1e-10);
        // |y| has a kink at a grid node: the trapezoid error is h²ρ(0)/6.
        let exact = (2.0 / (3.0 * std::f64::consts::PI)).sqrt();
        assert!((mt.m1 - exact).abs() < 1e-3);
        assert!(mt.m1 <= mt.m2.sqrt());
        let fine = Method::Quadrature(QuadratureConfig {
            points: 4097,
            half_width_factor: 10.0,
        });
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.0], &fine).unwrap();
        assert!((moments(&g).unwrap().m1 - exact).abs() < 5e-6);
        let g = build_gibbs(&pot("zero", 1.0, 1.0), &[0.0], &quad()).unwrap();
        assert_relative_eq!(moments(&g).unwrap().m2, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn langevin_rejects_exact_normalizer_queries() {
        let cfg = LangevinConfig {
            n_samples: 2000,
            n_chains: 4,
            ..Default::default()
        };
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.5], &Method::Langevin(cfg)).unwrap();
        assert_eq!(local_entropy(&g), Err(GibbsError::UnsupportedMethod));
        assert!(local_entropy_gradient(&g).unwrap().std_err.is_some());
        let bad = LangevinConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert_eq!(
            build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.5], &Method::Langevin(bad)).unwrap_err(),
            GibbsError::EmptySamples
        );
    }

    #[test]
    fn langevin_divergence_is_reported() {
        let cfg = LangevinConfig {
            n_samples: 100,
            n_chains: 1,
            step: Some(5.0),
            burn_in: Some(2000),
            thin: Some(1),
            seed: 1,
        };
        let err = build_gibbs(&pot("quadratic", 0.5, 1.0), &[1.0], &Method::Langevin(cfg)).unwrap_err();
        assert!(matches!(err, GibbsError::SamplerDiverged { .. }));
    }

    #[test]
    fn quadrature_refuses_three_fast_dimensions() {
        let p = Arc::new(CoupledPotential::new(problem("quadratic", 3).unwrap(), 0.5, 1.0).unwrap());
        assert_eq!(
            build_gibbs(&p, &[0.0; 3], &quad()).unwrap_err(),
            GibbsError::QuadratureDimension(3)
        );
    }

    #[test]
    fn two_dimensional_quadrature() {
        let p = Arc::new(CoupledPotential::new(problem("quadratic", 2).unwrap(), 0.5, 1.0).unwrap());
        let m = Method::Quadrature(QuadratureConfig {
            points: 129,
            half_width_factor: 10.0,
        });
        let g = build_gibbs(&p, &[1.0, -0.5], &m).unwrap();
        let mean = g.mean();
        assert_relative_eq!(mean[0], 1.0 / 1.5, epsilon = 1e-9);
        assert_relative_eq!(mean[1], -0.5 / 1.5, epsilon = 1e-9);
        assert!((g.mass().unwrap() - 1.0).abs() < 1e-8);
        // log Z = (n/2) log(2πγ/(β(1+γ))) − β|x|²/(2(1+γ)).
        let lz = (2.0 * std::f64::consts::PI * 0.5 / 1.5).ln() - 1.25 / 3.0;
        assert_relative_eq!(g.log_normalizer.unwrap(), lz, epsilon = 1e-9);
    }

    #[test]
    fn moments_csv_layout() {
        let g = build_gibbs(&pot("quadratic", 0.5, 1.0), &[0.0], &quad()).unwrap();
        let mut buf = Vec::new();
        write_moments_csv(&mut buf, &[moments(&g).unwrap()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,mean,m1,m2,method,std_err\n0,"));
        assert!(s.trim_end().ends_with(",quadrature,"));
    }
}
