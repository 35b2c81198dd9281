//! Experiment configuration, loaded from TOML with unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::ControlRange;
use crate::gibbs::{GibbsFactory, Method, QuadratureConfig};
use crate::hjb::Scheme;
use crate::problems::{make_problem, CoupledPotential, TestProblem};
use crate::sde::Diffusion;

use super::LabError;

fn default_budget() -> f64 {
    1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Refuse studies whose estimated drift-evaluation count exceeds this.
    #[serde(default = "default_budget")]
    pub op_budget: f64,
    pub problem: ProblemConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub quadrature: QuadratureSection,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
    #[serde(default)]
    pub value: ValueConfig,
    #[serde(default)]
    pub quasi: QuasiConfig,
    #[serde(default)]
    pub hjb: HjbSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub radius: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma: f64,
    #[serde(default = "unit")]
    pub beta: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSection {
    pub points: usize,
    pub half_width_factor: f64,
}

impl Default for QuadratureSection {
    fn default() -> Self {
        let q = QuadratureConfig::default();
        Self {
            points: q.points,
            half_width_factor: q.half_width_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
    pub fd_step: f64,
    /// Largest accepted `|∇φ_γ − FD| / max(|FD|, rel_floor)`.
    pub grad_rel_tol: f64,
    pub rel_floor: f64,
    /// Moment-growth grid on `[−growth_x_max, growth_x_max]`.
    pub growth_x_max: f64,
    pub growth_points: usize,
    /// Accepted relative change of the fitted constant under grid doubling.
    pub growth_stability: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            x_min: -2.0,
            x_max: 2.0,
            points: 11,
            fd_step: 1e-4,
            grad_rel_tol: 1e-4,
            rel_floor: 1e-6,
            growth_x_max: 5.0,
            growth_points: 21,
            growth_stability: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub xs: Vec<f64>,
    pub n_samples: usize,
    pub n_chains: usize,
    pub step: Option<f64>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    /// Langevin and quadrature gradients must agree within this many standard errors.
    pub sigmas: f64,
    pub max_std_err: f64,
    /// Tolerance against the closed form (quadratic problem only).
    pub closed_form_tol: f64,
    /// Wall-clock limit for the sampler runs, in seconds.
    pub max_runtime_s: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            xs: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            n_samples: 100_000,
            n_chains: 64,
            step: None,
            burn_in: None,
            thin: None,
            sigmas: 3.0,
            max_std_err: 5e-3,
            closed_form_tol: 1e-6,
            max_runtime_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub epsilon: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub control: f64,
    pub n_paths: usize,
    pub record_stride: usize,
    pub sigma: Diffusion,
    pub shared_noise: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            horizon: 1.0,
            x0: vec![1.0],
            y0: vec![0.0],
            control: 1.0,
            n_paths: 4,
            record_stride: 10,
            sigma: Diffusion::Zero,
            shared_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    /// Extra initial fast states compared at the smallest ε.
    pub y0_variants: Vec<Vec<f64>>,
    pub control: f64,
    pub n_paths: usize,
    /// Must be zero: the limit trajectory is deterministic.
    pub sigma: Diffusion,
    pub threshold: f64,
    pub decrease_sigmas: f64,
    pub y0_sigmas: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.03, 0.01, 0.003],
            horizon: 1.0,
            x0: vec![1.0],
            y0: vec![0.0],
            y0_variants: vec![vec![-2.0], vec![2.0]],
            control: 1.0,
            n_paths: 1000,
            sigma: Diffusion::Zero,
            threshold: 5e-3,
            decrease_sigmas: 2.0,
            y0_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub horizon: f64,
    pub epsilon: f64,
    pub n_paths: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub constants: usize,
    pub switch_points: usize,
    /// Golden-section refinement of the best switch time.
    pub refine: bool,
    pub refine_tol: f64,
    pub extended: bool,
    pub tol: f64,
    pub sigmas: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            x0: vec![1.5],
            y0: vec![0.0],
            horizon: 1.0,
            epsilon: 0.003,
            n_paths: 200,
            u_min: 0.0,
            u_max: 1.0,
            constants: 5,
            switch_points: 9,
            refine: true,
            refine_tol: 1e-3,
            extended: true,
            tol: 1e-2,
            sigmas: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuasiConfig {
    pub enabled: bool,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub cap: f64,
    pub n_paths: usize,
    pub tol: f64,
    pub sigmas: f64,
}

impl Default for QuasiConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilons: vec![0.03, 0.01, 0.003],
            cap: 10.0,
            n_paths: 200,
            tol: 1e-2,
            sigmas: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalChoice {
    Loss,
    ClampedLoss { cap: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HjbSection {
    pub domain: [f64; 2],
    pub n_x: usize,
    pub n_t: Option<usize>,
    pub horizon: f64,
    pub lambda: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub n_u: usize,
    pub scheme: Scheme,
    pub terminal: TerminalChoice,
    pub running_constant: f64,
    /// Every `t_stride`-th time level goes to the value CSV.
    pub t_stride: usize,
    pub error_tol: f64,
    /// Solve again with half the spacing and check the error ratio.
    pub refine: bool,
    pub refine_ratio: f64,
    /// Points where `V(0, x)` is compared with law enumeration (non-trivial `U` only).
    pub check_x0: Vec<f64>,
    pub switch_points: usize,
    pub enum_tol: f64,
}

impl Default for HjbSection {
    fn default() -> Self {
        Self {
            domain: [-2.0, 2.0],
            n_x: 401,
            n_t: None,
            horizon: 1.0,
            lambda: 0.0,
            u_min: 1.0,
            u_max: 1.0,
            n_u: 1,
            scheme: Scheme::default(),
            terminal: TerminalChoice::Loss,
            running_constant: 0.0,
            t_stride: 10,
            error_tol: 1e-2,
            refine: true,
            refine_ratio: 1.5,
            check_x0: vec![0.5, 1.5],
            switch_points: 65,
            enum_tol: 1e-2,
        }
    }
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] > w[1])
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.potential()?;
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if !strictly_decreasing(&self.converge.epsilons) || self.converge.epsilons.iter().any(|&e| !(e > 0.0)) {
            return bad("converge.epsilons must be positive and strictly decreasing");
        }
        if !strictly_decreasing(&self.quasi.epsilons) || self.quasi.epsilons.iter().any(|&e| !(e > 0.0)) {
            return bad("quasi.epsilons must be positive and strictly decreasing");
        }
        if !(self.op_budget > 0.0) {
            return bad("op_budget must be positive");
        }
        if self.entropy.points < 2 || self.entropy.growth_points < 2 {
            return bad("entropy grids need at least two points");
        }
        if self.value.u_min > self.value.u_max || self.hjb.u_min > self.hjb.u_max {
            return bad("control ranges need u_min ≤ u_max");
        }
        Ok(())
    }

    pub fn test_problem(&self) -> Result<TestProblem, LabError> {
        let mut params = BTreeMap::new();
        params.insert("dim".to_string(), self.problem.dim as f64);
        if let Some(r) = self.problem.radius {
            params.insert("radius".to_string(), r);
        }
        Ok(make_problem(&self.problem.name, &params)?)
    }

    pub fn potential(&self) -> Result<CoupledPotential, LabError> {
        Ok(CoupledPotential::new(self.test_problem()?, self.model.gamma, self.model.beta)?)
    }

    pub fn quadrature_method(&self) -> Method {
        Method::Quadrature(QuadratureConfig {
            points: self.quadrature.points,
            half_width_factor: self.quadrature.half_width_factor,
        })
    }

    pub fn factory(&self) -> Result<GibbsFactory, LabError> {
        Ok(GibbsFactory::new(self.potential()?, self.quadrature_method()))
    }

    pub fn shared_potential(&self) -> Result<Arc<CoupledPotential>, LabError> {
        Ok(Arc::new(self.potential()?))
    }

    pub fn value_range(&self) -> ControlRange {
        ControlRange::new(self.value.u_min, self.value.u_max)
    }

    /// SHA-256 of the canonical JSON form with the seed zeroed, so that
    /// `(config_hash, seed)` identifies a run.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
