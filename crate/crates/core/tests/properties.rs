use std::sync::Arc;

use proptest::prelude::*;

use relaxlab::control::{effective_drift, AnyLaw, ControlLaw, ControlRange, PayoffSpec, Running, Terminal, perturbed_payoffs};
use relaxlab::gibbs::{build_gibbs, moments, GibbsFactory, Method};
use relaxlab::hjb::EffectiveHamiltonian;
use relaxlab::lab::studies::run_convergence_study;
use relaxlab::lab::ExperimentConfig;
use relaxlab::problems::{check_monotonicity, problem, CoupledPotential};
use relaxlab::sde::{derive_seed, simulate_two_scale, Diffusion, PathObserver, SlowDrift, TwoScaleSpec};

fn family() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("quadratic"), Just("zero"), Just("saturated_double_well")]
}

/// An admissible `γ` as a fraction of `1/L` (any positive value when `L = 0`).
fn admissible_gamma(name: &str, frac: f64) -> f64 {
    let l = problem(name, 1).unwrap().lipschitz_grad;
    if l == 0.0 {
        4.0 * frac
    } else {
        frac / l
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_matches_central_difference(name in family(), x in -4.0f64..4.0, y in -4.0f64..4.0) {
        let p = problem(name, 2).unwrap();
        let pt = [x, y];
        let g = p.grad_vec(&pt);
        let h = 1e-5;
        for d in 0..2 {
            let mut a = pt;
            let mut b = pt;
            a[d] += h;
            b[d] -= h;
            let fd = (p.eval(&a) - p.eval(&b)) / (2.0 * h);
            prop_assert!((g[d] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn accepted_potentials_are_strongly_monotone(name in family(), frac in 0.05f64..0.99, seed in 0u64..1000) {
        let gamma = admissible_gamma(name, frac);
        let pot = CoupledPotential::new(problem(name, 2).unwrap(), gamma, 1.0).unwrap();
        let r = check_monotonicity(&pot, 200, 4.0, seed);
        prop_assert!(r.passed);
        prop_assert!(r.kappa > 0.0);
    }

    #[test]
    fn gibbs_density_invariants(name in family(), frac in 0.1f64..0.9, beta in 0.5f64..4.0, x in -3.0f64..3.0) {
        let gamma = admissible_gamma(name, frac);
        let pot = Arc::new(CoupledPotential::new(problem(name, 1).unwrap(), gamma, beta).unwrap());
        let g = build_gibbs(&pot, &[x], &Method::default()).unwrap();
        let total: f64 = g.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let (y1, y2) = ([x - 0.3], [x + 0.2]);
        let diff = g.log_density(&y1).unwrap() - g.log_density(&y2).unwrap();
        let expected = -beta * (pot.value(&y1, &[x]) - pot.value(&y2, &[x]));
        prop_assert!((diff - expected).abs() < 1e-10);
        let m = moments(&g).unwrap();
        prop_assert!(m.m1 <= m.m2.sqrt() + 1e-12);
        prop_assert!(m.m2 + 1e-12 >= m.mean[0] * m.mean[0]);
    }

    #[test]
    fn quadratic_moments_match_gaussian(gamma in 0.05f64..0.95, beta in 0.5f64..4.0, x in -5.0f64..5.0) {
        let pot = Arc::new(CoupledPotential::new(problem("quadratic", 1).unwrap(), gamma, beta).unwrap());
        let m = moments(&build_gibbs(&pot, &[x], &Method::default()).unwrap()).unwrap();
        let mean = x / (1.0 + gamma);
        let var = gamma / (beta * (1.0 + gamma));
        prop_assert!((m.mean[0] - mean).abs() < 1e-9);
        prop_assert!((m.m2 - (var + mean * mean)).abs() < 1e-9);
    }

    #[test]
    fn averaged_drift_is_linear_in_the_extended_control(
        name in family(),
        x in -2.0f64..2.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        c in -1.0f64..1.0,
    ) {
        let gamma = admissible_gamma(name, 0.5);
        let factory = GibbsFactory::quadrature(CoupledPotential::new(problem(name, 1).unwrap(), gamma, 1.0).unwrap());
        let fbar = effective_drift(&factory, &SlowDrift::Model);
        let nu1 = move |_t: f64, _x: &[f64], y: &[f64]| if y[0] > c { a } else { b };
        let nu2 = move |_t: f64, _x: &[f64], y: &[f64]| (a * (y[0] - c).tanh()).abs();
        let mid = move |t: f64, x: &[f64], y: &[f64]| 0.5 * (nu1(t, x, y) + nu2(t, x, y));
        let g = factory.build(&[x]).unwrap();
        let f1 = fbar.eval_on(&g, 0.0, &nu1)[0];
        let f2 = fbar.eval_on(&g, 0.0, &nu2)[0];
        let fm = fbar.eval_on(&g, 0.0, &mid)[0];
        prop_assert!((fm - 0.5 * (f1 + f2)).abs() <= 1e-12 * (1.0 + f1.abs() + f2.abs()));
        let spread = g.expect(|y| (x - y[0]).abs()) / gamma;
        let sup = a.max(b);
        prop_assert!((f1 - f2).abs() <= sup * spread + 1e-12);
    }

    #[test]
    fn hamiltonian_decreases_when_controls_are_added(x in -2.0f64..2.0, p in -5.0f64..5.0) {
        let factory = GibbsFactory::quadrature(CoupledPotential::new(problem("saturated_double_well", 1).unwrap(), 0.05, 1.0).unwrap());
        let range = ControlRange::new(0.0, 1.0);
        let coarse = EffectiveHamiltonian::new(factory.clone(), SlowDrift::Model, &Diffusion::Zero, Running::Zero, range, 3);
        let fine = EffectiveHamiltonian::new(factory, SlowDrift::Model, &Diffusion::Zero, Running::Zero, range, 5);
        prop_assert!(fine.eval(0.0, x, p, 0.0).unwrap() <= coarse.eval(0.0, x, p, 0.0).unwrap() + 1e-14);
    }

    #[test]
    fn config_hash_ignores_seed(seed in any::<u64>()) {
        let text = "[problem]\nname = \"quadratic\"\n[model]\ngamma = 0.5\n";
        let a = ExperimentConfig::from_toml(text).unwrap();
        let mut b = a.clone();
        b.seed = seed;
        prop_assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn derived_seeds_differ_across_tags(base in any::<u64>(), t1 in 0u64..1000, t2 in 0u64..1000) {
        prop_assume!(t1 != t2);
        prop_assert_ne!(derive_seed(base, t1), derive_seed(base, t2));
    }
}

struct LastY(f64);

impl PathObserver for LastY {
    type Output = f64;
    fn observe(&mut self, _k: usize, _t: f64, _x: &[f64], y: &[f64], _u: f64) {
        self.0 = y[0];
    }
    fn finish(self) -> f64 {
        self.0
    }
}

#[test]
fn frozen_fast_process_relaxes_to_the_gibbs_mean() {
    let pot = Arc::new(CoupledPotential::new(problem("saturated_double_well", 1).unwrap(), 0.05, 1.0).unwrap());
    let x = [0.7];
    let mut spec = TwoScaleSpec::new(Arc::clone(&pot), 0.01);
    spec.freeze_slow = true;
    let store = spec.brownian_store(17, 0.5);
    let ys = simulate_two_scale(&spec, &|_t: f64, _x: &[f64], _y: &[f64]| 1.0, &x, &[-1.0], 0.5, 1000, &store, |_| LastY(0.0)).unwrap();
    let (mean, se) = relaxlab::numerics::mean_and_se(&ys);
    let exact = build_gibbs(&pot, &x, &Method::default()).unwrap().mean()[0];
    assert!((mean - exact).abs() <= 4.0 * se + 2e-3, "{mean} ± {se} vs {exact}");
}

#[test]
fn standard_error_halves_with_four_times_the_paths() {
    let pot = Arc::new(CoupledPotential::new(problem("quadratic", 1).unwrap(), 0.5, 1.0).unwrap());
    let spec = TwoScaleSpec::new(pot.clone(), 0.05);
    let payoff = PayoffSpec::terminal_only(Terminal::Loss(pot.problem.clone()), 1.0);
    let law = AnyLaw::Standard(ControlLaw::constant(1.0, ControlRange::new(0.0, 1.0)));
    let store = spec.brownian_store(3, 1.0);
    let se = |n: usize| {
        let s = perturbed_payoffs(&spec, &payoff, &law, &[1.5], &[0.0], n, &store).unwrap();
        relaxlab::numerics::mean_and_se(&s).1
    };
    let ratio = se(1600) / se(400);
    assert!((ratio - 0.5).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn idle_control_gives_zero_convergence_metric() {
    let text = "[problem]\nname = \"quadratic\"\n[model]\ngamma = 0.5\n[converge]\ncontrol = 0.0\nn_paths = 50\nepsilons = [0.1, 0.03]\n";
    let report = run_convergence_study(&ExperimentConfig::from_toml(text).unwrap()).unwrap();
    assert!(report.rows.iter().chain(&report.y0_rows).all(|r| r.metric == 0.0 && r.std_err == 0.0));
}
