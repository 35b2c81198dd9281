//! Benchmark losses and the coupled potential `Φ(y, x) = φ(y) + |x − y|² / (2γ)`.
//!
//! Every loss registered here has a globally Lipschitz gradient with a known
//! constant `L`, which is what makes the fast Langevin drift strongly
//! monotone once `γ < 1/L`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem family `{0}`")]
    UnknownFamily(String),
    #[error("parameter `{name}` = {value} is invalid for family `{family}`: {reason}")]
    InvalidParameter {
        family: String,
        name: String,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown parameter `{name}` for family `{family}`")]
    UnknownParameter { family: String, name: String },
    #[error("gamma = {gamma} must satisfy 0 < gamma < 1/L = {bound}")]
    GammaOutOfRange { gamma: f64, bound: f64 },
    #[error("beta = {0} must be positive and finite")]
    InvalidBeta(f64),
}

/// Loss families addressable by string id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `φ(x) = |x|² / 2`.
    Quadratic,
    /// `φ ≡ 0`.
    Zero,
    /// Separable double well `Σ w(xᵢ)` with `w(s) = (s² − 1)² / 4` on `|s| ≤ r`
    /// and its second-order Taylor continuation outside.
    SaturatedDoubleWell { radius: f64 },
}

impl Family {
    pub fn id(&self) -> &'static str {
        match self {
            Family::Quadratic => "quadratic",
            Family::Zero => "zero",
            Family::SaturatedDoubleWell { .. } => "saturated_double_well",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProblem {
    pub name: String,
    pub family: Family,
    pub dim: usize,
    pub lipschitz_grad: f64,
    pub lower_bounded: bool,
}

impl fmt::Display for TestProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(n={}, L={})", self.name, self.dim, self.lipschitz_grad)
    }
}

/// Default saturation radius of the double well.
pub const DOUBLE_WELL_RADIUS: f64 = 2.0;

fn well(s: f64, r: f64) -> f64 {
    if s.abs() <= r {
        let q = s * s - 1.0;
        0.25 * q * q
    } else {
        let a = r.copysign(s);
        let d = s - a;
        let q = a * a - 1.0;
        0.25 * q * q + (a * a * a - a) * d + 0.5 * (3.0 * a * a - 1.0) * d * d
    }
}

fn well_grad(s: f64, r: f64) -> f64 {
    if s.abs() <= r {
        s * s * s - s
    } else {
        let a = r.copysign(s);
        (a * a * a - a) + (3.0 * a * a - 1.0) * (s - a)
    }
}

fn well_curvature(s: f64, r: f64) -> f64 {
    let c = s.abs().min(r);
    3.0 * c * c - 1.0
}

impl TestProblem {
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match self.family {
            Family::Quadratic => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            Family::Zero => 0.0,
            Family::SaturatedDoubleWell { radius } => x.iter().map(|&s| well(s, radius)).sum(),
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match self.family {
            Family::Quadratic => out.copy_from_slice(x),
            Family::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Family::SaturatedDoubleWell { radius } => {
                for (o, &s) in out.iter_mut().zip(x) {
                    *o = well_grad(s, radius);
                }
            }
        }
    }

    pub fn grad_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.grad(x, &mut g);
        g
    }

    /// Scalar gradient for the one-dimensional hot loops.
    #[inline]
    pub fn grad_1d(&self, s: f64) -> f64 {
        match self.family {
            Family::Quadratic => s,
            Family::Zero => 0.0,
            Family::SaturatedDoubleWell { radius } => well_grad(s, radius),
        }
    }

    /// Diagonal of the Hessian where it exists (the double well is `C²`).
    pub fn curvature_diag(&self, x: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Quadratic => vec![1.0; x.len()],
            Family::Zero => vec![0.0; x.len()],
            Family::SaturatedDoubleWell { radius } => {
                x.iter().map(|&s| well_curvature(s, radius)).collect()
            }
        }
    }
}

/// Builds a registered problem. Recognised parameters: `dim` (all families,
/// default 1) and `radius` (double well only, default 2).
pub fn make_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<TestProblem, ProblemError> {
    let family_name = name.to_string();
    let allowed: &[&str] = match name {
        "quadratic" | "zero" => &["dim"],
        "saturated_double_well" => &["dim", "radius"],
        other => return Err(ProblemError::UnknownFamily(other.to_string())),
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ProblemError::UnknownParameter {
            family: family_name,
            name: k.clone(),
        });
    }
    let dim = match params.get("dim") {
        None => 1,
        Some(&d) if d.is_finite() && d >= 1.0 && d.fract() == 0.0 => d as usize,
        Some(&d) => {
            return Err(ProblemError::InvalidParameter {
                family: family_name,
                name: "dim".into(),
                value: d,
                reason: "must be a positive integer",
            })
        }
    };
    let (family, lipschitz_grad) = match name {
        "quadratic" => (Family::Quadratic, 1.0),
        "zero" => (Family::Zero, 0.0),
        _ => {
            let radius = params.get("radius").copied().unwrap_or(DOUBLE_WELL_RADIUS);
            if !radius.is_finite() || radius < 1.0 / 3f64.sqrt() {
                return Err(ProblemError::InvalidParameter {
                    family: family_name,
                    name: "radius".into(),
                    value: radius,
                    reason: "must be finite and at least 1/sqrt(3) so that L stays finite",
                });
            }
            // |w''| = |3s² − 1| peaks at the saturation radius.
            (Family::SaturatedDoubleWell { radius }, 3.0 * radius * radius - 1.0)
        }
    };
    Ok(TestProblem {
        name: family.id().to_string(),
        family,
        dim,
        lipschitz_grad,
        lower_bounded: true,
    })
}

/// Convenience for the common `dim`-only construction.
pub fn problem(name: &str, dim: usize) -> Result<TestProblem, ProblemError> {
    let mut p = BTreeMap::new();
    p.insert("dim".to_string(), dim as f64);
    make_problem(name, &p)
}

/// `Φ(y, x) = φ(y) + |x − y|² / (2γ)` with inverse temperature `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPotential {
    pub problem: TestProblem,
    pub gamma: f64,
    pub beta: f64,
}

impl CoupledPotential {
    pub fn new(problem: TestProblem, gamma: f64, beta: f64) -> Result<Self, ProblemError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(ProblemError::InvalidBeta(beta));
        }
        let l = problem.lipschitz_grad;
        let bound = if l > 0.0 { 1.0 / l } else { f64::INFINITY };
        if !(gamma.is_finite() && gamma > 0.0 && gamma < bound) {
            return Err(ProblemError::GammaOutOfRange { gamma, bound });
        }
        Ok(Self { problem, gamma, beta })
    }

    pub fn dim(&self) -> usize {
        self.problem.dim
    }

    /// Strong-monotonicity constant of the fast drift, `1/γ − L`.
    pub fn kappa(&self) -> f64 {
        1.0 / self.gamma - self.problem.lipschitz_grad
    }

    /// Lipschitz constant of `∇_yΦ(·, x)`.
    pub fn stiffness(&self) -> f64 {
        self.problem.lipschitz_grad + 1.0 / self.gamma
    }

    pub fn value(&self, y: &[f64], x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.problem.eval(y) + d2 / (2.0 * self.gamma)
    }

    /// `∇_yΦ(y, x) = ∇φ(y) − (x − y)/γ`.
    pub fn grad_y(&self, y: &[f64], x: &[f64], out: &mut [f64]) {
        self.problem.grad(y, out);
        for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
            *o -= (a - b) / self.gamma;
        }
    }

    /// Fast drift `b(x, y) = −∇_yΦ(y, x)`.
    pub fn fast_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.grad_y(y, x, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }

    /// Unique minimiser of the strongly convex map `y ↦ Φ(y, x)`.
    pub fn minimizer(&self, x: &[f64]) -> Vec<f64> {
        let step = 1.0 / self.stiffness();
        let mut y = x.to_vec();
        let mut g = vec![0.0; y.len()];
        // Contraction factor per step is 1 − κ/(L + 1/γ) < 1.
        for _ in 0..10_000 {
            self.grad_y(&y, x, &mut g);
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if norm <= 1e-13 * scale * self.stiffness() {
                break;
            }
            for (yi, gi) in y.iter_mut().zip(&g) {
                *yi -= step * gi;
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub kappa: f64,
    /// Largest `d / |y₁ − y₂|²` over the sampled triples.
    pub max_normalized_defect: f64,
    pub samples: usize,
    pub passed: bool,
}

pub const MONOTONICITY_TOL: f64 = 1e-9;

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v * r / norm).collect()
}

/// Samples triples `(x, y₁, y₂)` in a ball and checks
/// `(b(x,y₁) − b(x,y₂))·(y₁ − y₂) ≤ −κ|y₁ − y₂|²` with `κ = 1/γ − L`.
pub fn check_monotonicity(pot: &CoupledPotential, samples: usize, radius: f64, seed: u64) -> MonotonicityReport {
    let kappa = pot.kappa();
    let n = pot.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = sample_ball(&mut rng, n, radius);
        let y1 = sample_ball(&mut rng, n, radius);
        let y2 = sample_ball(&mut rng, n, radius);
        let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
        let dy2: f64 = dy.iter().map(|v| v * v).sum();
        if dy2 == 0.0 {
            continue;
        }
        pot.fast_drift(&x, &y1, &mut b1);
        pot.fast_drift(&x, &y2, &mut b2);
        let inner: f64 = b1.iter().zip(&b2).zip(&dy).map(|((p, q), d)| (p - q) * d).sum();
        worst = worst.max((inner + kappa * dy2) / dy2);
    }
    MonotonicityReport {
        kappa,
        max_normalized_defect: worst,
        samples,
        passed: kappa > 0.0 && worst <= MONOTONICITY_TOL,
    }
}

/// Worst relative central-difference error of `grad` against `eval` over
/// `points` random points in a ball.
pub fn check_gradient(problem: &TestProblem, points: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x = sample_ball(&mut rng, problem.dim, radius);
        let g = problem.grad_vec(&x);
        let scale = 1.0 + g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..problem.dim {
            let h = 1e-5 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (problem.eval(&xp) - problem.eval(&xm)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / scale);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfinementReport {
    /// Smallest observed `Φ(x + r·d, x) / r²` at the largest probed radius.
    pub min_quadratic_rate: f64,
    pub rays: usize,
    pub confined: bool,
}

/// Probes `Φ(·, x)` along random rays and checks quadratic growth at
/// infinity, which makes `exp(−βΦ(·, x))` integrable.
pub fn check_confinement(pot: &CoupledPotential, x: &[f64], rays: usize, seed: u64) -> ConfinementReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pot.dim();
    let base = pot.value(x, x);
    let mut min_rate = f64::INFINITY;
    for _ in 0..rays {
        let d = sample_ball(&mut rng, n, 1.0);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for &r in &[1e2, 1e3, 1e4] {
            let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + r * b / norm).collect();
            let rate = (pot.value(&y, x) - base) / (r * r);
            if r == 1e4 {
                min_rate = min_rate.min(rate);
            }
        }
    }
    ConfinementReport {
        min_quadratic_rate: min_rate,
        rays,
        confined: min_rate > 0.0,
    }
}
