//! Effective Hamiltonian and a backward explicit solver for
//!
//! ```text
//! −V_t + H̄(t, x, V_x, V_xx) + λV = 0,   V(T, ·) = ḡ
//! ```
//!
//! in one slow dimension, with
//! `H̄(t, x, p, P) = ∫ min_u [−σ²P − f p − ℓ] dμ_x(y)` (sup convention).
//! The minimum is taken pointwise in `y`, which is what optimising over
//! extended controls amounts to.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlRange, Orientation, Running};
use crate::gibbs::{GibbsError, GibbsFactory, GibbsRepresentation};
use crate::sde::{Diffusion, SlowDrift};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
    #[error("the grid solver handles one slow dimension, got {0}")]
    Dimension(usize),
    #[error("CFL number {cfl:.4} exceeds 1 with n_t = {n_t}; need n_t ≥ {required}")]
    Cfl { cfl: f64, n_t: usize, required: usize },
    #[error("dissipation constant {theta} is below the Lipschitz bound {bound} of H̄ in p; scheme would not be monotone")]
    Dissipation { theta: f64, bound: f64 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("non-finite value at t-index {step}, x-index {node}")]
    NonFinite { step: usize, node: usize },
}

/// `H̄` together with its ingredients; `u_grid` discretises `U`.
#[derive(Debug, Clone)]
pub struct EffectiveHamiltonian {
    pub factory: GibbsFactory,
    pub drift: SlowDrift,
    pub diffusion: Diffusion,
    pub running: Running,
    pub u_grid: Vec<f64>,
}

/// Gibbs nodes carrying negligible mass are skipped.
const WEIGHT_FLOOR: f64 = 1e-17;

/// Per-x-node coefficients of the affine maps `a p + b P + c`, one per
/// `(y-node, u)` pair.
#[derive(Debug, Clone)]
struct NodeCache {
    weights: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    n_u: usize,
}

impl NodeCache {
    fn eval(&self, p: f64, pp: f64) -> f64 {
        let mut total = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            let r = j * self.n_u..(j + 1) * self.n_u;
            let m = self.a[r.clone()]
                .iter()
                .zip(&self.b[r.clone()])
                .zip(&self.c[r])
                .map(|((a, b), c)| a * p + b * pp + c)
                .fold(f64::INFINITY, f64::min);
            total += w * m;
        }
        total
    }

    /// Upwind in `p` per affine piece: forward difference when the drift
    /// points right (`a < 0`), backward otherwise.
    fn eval_upwind(&self, pm: f64, pf: f64, pp: f64) -> f64 {
        let mut total = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            let r = j * self.n_u..(j + 1) * self.n_u;
            let m = self.a[r.clone()]
                .iter()
                .zip(&self.b[r.clone()])
                .zip(&self.c[r])
                .map(|((&a, b), c)| if a < 0.0 { a * pf } else { a * pm } + b * pp + c)
                .fold(f64::INFINITY, f64::min);
            total += w * m;
        }
        total
    }

    /// Range of `∂H̄/∂p` over all `(p, P)`: slopes of the concave pieces.
    fn p_lipschitz(&self) -> f64 {
        let (mut lo, mut hi) = (0.0, 0.0);
        for (j, w) in self.weights.iter().enumerate() {
            let r = &self.a[j * self.n_u..(j + 1) * self.n_u];
            lo += w * r.iter().copied().fold(f64::INFINITY, f64::min);
            hi += w * r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        f64::max(lo.abs(), hi.abs())
    }

    /// `Σ w max_u |f|` and `Σ w max_u σ²`, the upwind CFL ingredients.
    fn transport_bounds(&self) -> (f64, f64) {
        let (mut fa, mut sb) = (0.0, 0.0);
        for (j, w) in self.weights.iter().enumerate() {
            let r = j * self.n_u..(j + 1) * self.n_u;
            fa += w * self.a[r.clone()].iter().map(|v| v.abs()).fold(0.0, f64::max);
            sb += w * self.b[r].iter().map(|v| v.abs()).fold(0.0, f64::max);
        }
        (fa, sb)
    }
}

impl EffectiveHamiltonian {
    pub fn new(factory: GibbsFactory, drift: SlowDrift, diffusion: &Diffusion, running: Running, range: ControlRange, n_u: usize) -> Self {
        Self {
            factory,
            drift,
            diffusion: diffusion.limit(),
            running,
            u_grid: range.grid(n_u),
        }
    }

    fn cache(&self, g: &GibbsRepresentation, t: f64, sign: f64) -> NodeCache {
        let n_u = self.u_grid.len();
        let x = &g.x;
        let mut cache = NodeCache {
            weights: Vec::new(),
            a: Vec::new(),
            b: Vec::new(),
            c: Vec::new(),
            n_u,
        };
        let top = g.weights().iter().copied().fold(0.0, f64::max);
        let mut f = [0.0];
        for i in 0..g.len() {
            let w = g.weight(i);
            if w < WEIGHT_FLOOR * top {
                continue;
            }
            let y = g.node(i);
            cache.weights.push(w);
            for &u in &self.u_grid {
                self.drift.eval(&g.pot, x, y, u, &mut f);
                let s = self.diffusion.matrix(0.0, u, 1)[(0, 0)];
                cache.a.push(-f[0]);
                cache.b.push(-s * s);
                cache.c.push(-sign * self.running.eval(t, x, y, u));
            }
        }
        cache
    }

    fn check_dim(&self) -> Result<(), HjbError> {
        match self.factory.pot.dim() {
            1 => Ok(()),
            n => Err(HjbError::Dimension(n)),
        }
    }

    /// `H̄(t, x, p, P)` in one dimension.
    pub fn eval(&self, t: f64, x: f64, p: f64, pp: f64) -> Result<f64, HjbError> {
        self.check_dim()?;
        let g = self.factory.build(&[x])?;
        Ok(self.cache(&g, t, 1.0).eval(p, pp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    /// `H̄(p̄, P) − θ(p⁺ − p⁻)/2` with `θ` from sampled slopes (×1.2)
    /// unless given.
    LaxFriedrichs { theta: Option<f64> },
    /// Upwind difference chosen per control inside the pointwise minimum.
    Upwind,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::LaxFriedrichs { theta: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjbConfig {
    pub domain: [f64; 2],
    pub n_x: usize,
    /// Time steps; the smallest CFL-compliant count when absent.
    pub n_t: Option<usize>,
    pub horizon: f64,
    pub lambda: f64,
    pub scheme: Scheme,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeMeta {
    pub scheme: &'static str,
    pub theta: Option<f64>,
    pub dt: f64,
    pub dx: f64,
    pub n_t: usize,
    pub n_x: usize,
    pub cfl: f64,
    pub p_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    /// `values[n][i] = V(t_n, x_i)`.
    pub values: Vec<Vec<f64>>,
    pub meta: SchemeMeta,
}

impl HjbSolution {
    /// `V(0, x)` by linear interpolation.
    pub fn initial_value(&self, x: f64) -> f64 {
        let h = self.meta.dx;
        crate::numerics::interp_uniform(&self.values[0], self.x_grid[0], h, x)
    }

    pub fn max_error<F: Fn(f64, f64) -> f64>(&self, oracle: F) -> f64 {
        let mut worst = 0.0f64;
        for (n, &t) in self.t_grid.iter().enumerate() {
            for (i, &x) in self.x_grid.iter().enumerate() {
                worst = worst.max((self.values[n][i] - oracle(t, x)).abs());
            }
        }
        worst
    }

    /// Rows `t, x, V` for every `t_stride`-th time level (and `t = 0`, `T`).
    pub fn write_csv<W: Write>(&self, out: &mut W, t_stride: usize) -> std::io::Result<()> {
        writeln!(out, "t,x,V")?;
        let last = self.t_grid.len() - 1;
        for (n, &t) in self.t_grid.iter().enumerate() {
            if n % t_stride.max(1) != 0 && n != last {
                continue;
            }
            for (i, &x) in self.x_grid.iter().enumerate() {
                writeln!(out, "{t},{x},{}", self.values[n][i])?;
            }
        }
        Ok(())
    }
}

/// Backward explicit monotone scheme with linear-extrapolation ghost nodes
/// at both ends; discounting is applied as `e^{−λΔt}` per step.
pub fn solve_effective_hjb_1d<G: Fn(f64) -> f64 + Sync>(h: &EffectiveHamiltonian, terminal: G, cfg: &HjbConfig) -> Result<HjbSolution, HjbError> {
    h.check_dim()?;
    let [a, b] = cfg.domain;
    if cfg.n_x < 3 || !(b > a) || !(cfg.horizon > 0.0) || !(cfg.lambda >= 0.0) {
        return Err(HjbError::Grid(format!(
            "need n_x ≥ 3, a < b, T > 0, λ ≥ 0 (got n_x={}, [{a}, {b}], T={}, λ={})",
            cfg.n_x, cfg.horizon, cfg.lambda
        )));
    }
    let n_x = cfg.n_x;
    let dx = (b - a) / (n_x - 1) as f64;
    let x_grid: Vec<f64> = (0..n_x).map(|i| a + i as f64 * dx).collect();
    let sign = cfg.orientation.sign();
    let gibbs: Vec<GibbsRepresentation> = x_grid.par_iter().map(|&x| h.factory.build(&[x])).collect::<Result<_, _>>()?;
    let time_dependent = matches!(h.running, Running::Custom { .. });
    let build_caches = |t: f64| -> Vec<NodeCache> { gibbs.par_iter().map(|g| h.cache(g, t, sign)).collect() };
    let mut caches = build_caches(cfg.horizon);

    let p_lipschitz = caches.iter().map(|c| c.p_lipschitz()).fold(0.0, f64::max);
    let (theta, rate) = match cfg.scheme {
        Scheme::LaxFriedrichs { theta } => {
            let theta = match theta {
                Some(th) => th,
                None => 1.2 * sampled_slope(&caches),
            };
            if theta < p_lipschitz * (1.0 - 1e-12) {
                return Err(HjbError::Dissipation { theta, bound: p_lipschitz });
            }
            let diff = caches.iter().map(|c| c.transport_bounds().1).fold(0.0, f64::max);
            (Some(theta), theta / dx + 2.0 * diff / (dx * dx))
        }
        Scheme::Upwind => {
            let r = caches
                .iter()
                .map(|c| {
                    let (fa, sb) = c.transport_bounds();
                    fa / dx + 2.0 * sb / (dx * dx)
                })
                .fold(0.0, f64::max);
            (None, r)
        }
    };
    let required = ((cfg.horizon * rate).ceil() as usize).max(1);
    let n_t = cfg.n_t.unwrap_or(required);
    if n_t == 0 {
        return Err(HjbError::Grid("n_t must be positive".into()));
    }
    let dt = cfg.horizon / n_t as f64;
    let cfl = dt * rate;
    if cfl > 1.0 + 1e-12 {
        return Err(HjbError::Cfl { cfl, n_t, required });
    }
    let decay = (-cfg.lambda * dt).exp();
    let t_grid: Vec<f64> = (0..=n_t).map(|n| n as f64 * dt).collect();
    let mut values = vec![Vec::new(); n_t + 1];
    values[n_t] = x_grid.iter().map(|&x| sign * terminal(x)).collect();
    for n in (0..n_t).rev() {
        let t_next = t_grid[n + 1];
        if time_dependent && n + 1 < n_t {
            caches = build_caches(t_next);
        }
        let v = &values[n + 1];
        let at = |i: isize| -> f64 {
            if i < 0 {
                2.0 * v[0] - v[1]
            } else if i as usize >= n_x {
                2.0 * v[n_x - 1] - v[n_x - 2]
            } else {
                v[i as usize]
            }
        };
        let next: Vec<f64> = (0..n_x)
            .into_par_iter()
            .map(|i| {
                let (vm, v0, vp) = (at(i as isize - 1), v[i], at(i as isize + 1));
                let pm = (v0 - vm) / dx;
                let pf = (vp - v0) / dx;
                let pp = (vp - 2.0 * v0 + vm) / (dx * dx);
                let ham = match theta {
                    Some(th) => caches[i].eval(0.5 * (pm + pf), pp) - 0.5 * th * (pf - pm),
                    None => caches[i].eval_upwind(pm, pf, pp),
                };
                decay * (v0 - dt * ham)
            })
            .collect();
        if let Some(node) = next.iter().position(|x| !x.is_finite()) {
            return Err(HjbError::NonFinite { step: n, node });
        }
        values[n] = next;
    }
    if sign < 0.0 {
        values.iter_mut().flatten().for_each(|v| *v = -*v);
    }
    Ok(HjbSolution {
        t_grid,
        x_grid,
        values,
        meta: SchemeMeta {
            scheme: match cfg.scheme {
                Scheme::LaxFriedrichs { .. } => "lax_friedrichs",
                Scheme::Upwind => "upwind",
            },
            theta,
            dt,
            dx,
            n_t,
            n_x,
            cfl,
            p_lipschitz,
        },
    })
}

/// Largest central-difference slope `|∂H̄/∂p|` over a symmetric set of
/// sampled `p` at `P = 0`, across all x-nodes.
fn sampled_slope(caches: &[NodeCache]) -> f64 {
    let ps: Vec<f64> = (-6..=6).map(|k| 10f64.powi(k)).flat_map(|p| [p, -p]).collect();
    caches
        .iter()
        .map(|c| {
            ps.iter()
                .map(|&p| {
                    let d = 1e-3 * p.abs();
                    ((c.eval(p + d, 0.0) - c.eval(p - d, 0.0)) / (2.0 * d)).abs()
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
