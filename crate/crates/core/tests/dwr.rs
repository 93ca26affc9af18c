mod common;

use common::{tight, uniform_grid as grid, worst_form_residuals};

use mpc_dwr::dwr::{estimate, residuals_primal, ControlTest, Enriched, PrimalWeights, SlabTest, StateTest};
use mpc_dwr::fem::ControlKind;
use mpc_dwr::model::{eval_qoi, Dynamics, ProblemSpec, Qoi, Reference};
use mpc_dwr::solver::{solve_ocp, solve_secondary, Discretization, HessianMode};

fn specs() -> Vec<ProblemSpec> {
    vec![
        ProblemSpec {
            dynamics: Dynamics::Linear { nu: 0.1, s: 0.3 },
            horizon: 2.0,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Linear { nu: 0.1, s: 0.0 },
            control: ControlKind::NeumannBoundary,
            reference: Reference::Dynamic,
            horizon: 2.0,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Quasilinear { c: 0.5, d: 0.1 },
            control: ControlKind::NeumannBoundary,
            reference: Reference::Dynamic,
            horizon: 2.0,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Quasilinear { c: 0.2, d: 0.1 },
            horizon: 2.0,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
    ]
}

#[test]
fn all_six_forms_vanish_on_discrete_test_functions() {
    let g = grid(2.0, 5, 6);
    for spec in specs() {
        for qoi in [Qoi::Full, Qoi::Truncated { tau: 0.8 }] {
            let disc = Discretization::new(g.clone(), &spec).unwrap();
            let opts = tight();
            let base = solve_ocp(&disc, None, &opts).unwrap();
            assert!(base.info.converged, "{:?}", base.info.gradient_norm);
            let chi = solve_secondary(&disc, &base, &qoi, &opts).unwrap();
            let worst = worst_form_residuals(&disc, &base, &chi, &qoi);
            assert!(
                worst.iter().all(|w| *w <= 1e-9),
                "{:?} {qoi:?}: {worst:?}",
                spec.dynamics
            );
        }
    }
}

#[test]
fn indicators_are_additive_and_homogeneous() {
    let g = grid(2.0, 6, 8);
    for spec in specs() {
        let disc = Discretization::new(g.clone(), &spec).unwrap();
        let opts = tight();
        let base = solve_ocp(&disc, None, &opts).unwrap();
        let qoi = Qoi::Truncated { tau: 1.0 };
        let chi = solve_secondary(&disc, &base, &qoi, &opts).unwrap();
        let ind = estimate(&disc, &base, &chi, &qoi, HessianMode::Exact).unwrap();
        assert_eq!(ind.eta_k, ind.time.iter().sum::<f64>());
        assert_eq!(ind.eta_h, ind.space.iter().flatten().sum::<f64>());
        assert_eq!(ind.time.len(), 6);
        assert_eq!(ind.space.len(), 7);

        // linear in the weights
        let v = mpc_dwr::dwr::reconstruct_time(&disc, &chi.v, spec.control == ControlKind::Distributed).unwrap();
        let weights = |a: f64| PrimalWeights {
            v: StateTest {
                slabs: v
                    .iter()
                    .map(|w| SlabTest::ramp(Enriched::nodal(w.clone()).scaled(a)))
                    .collect(),
            },
            q: ControlTest::zeros(&disc),
            z: StateTest::zeros(&disc),
        };
        let one = residuals_primal(&disc, &base, &weights(1.0)).unwrap().lambda;
        let two = residuals_primal(&disc, &base, &weights(2.0)).unwrap().lambda;
        let (a, b) = (one.total(), two.total());
        assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1e-300));
        let sum: f64 = one.slab_totals().iter().sum();
        assert!((sum - a).abs() <= 1e-12 * a.abs().max(1e-300));
    }
}

#[test]
fn empty_sensitivity_gives_zero_indicators() {
    let g = grid(2.0, 4, 6);
    // zero reference and zero initial state: the optimum is zero and so is χ
    let spec = ProblemSpec {
        reference: Reference::Zero,
        horizon: 2.0,
        ..ProblemSpec::default()
    };
    let disc = Discretization::new(g, &spec).unwrap();
    let base = solve_ocp(&disc, None, &tight()).unwrap();
    let chi = solve_secondary(&disc, &base, &Qoi::Full, &tight()).unwrap();
    let ind = estimate(&disc, &base, &chi, &Qoi::Full, HessianMode::Exact).unwrap();
    assert_eq!(ind.eta_k, 0.0);
    assert_eq!(ind.eta_h, 0.0);
}

#[test]
fn estimator_tracks_the_cost_error_on_successive_grids() {
    let spec = ProblemSpec {
        horizon: 2.0,
        alpha: 1e-2,
        ..ProblemSpec::default()
    };
    let opts = tight();
    for (slabs, el) in [(8, 12), (16, 24), (32, 48)] {
        let disc = Discretization::new(grid(2.0, slabs, el), &spec).unwrap();
        let base = solve_ocp(&disc, None, &opts).unwrap();
        let chi = solve_secondary(&disc, &base, &Qoi::Full, &opts).unwrap();
        let ind = estimate(&disc, &base, &chi, &Qoi::Full, HessianMode::Exact).unwrap();
        let coarse = eval_qoi(&base.x, &base.u, &spec, &Qoi::Full).unwrap();
        let fine_disc = Discretization::new(grid(2.0, 4 * slabs, 4 * el), &spec).unwrap();
        let fine = solve_ocp(&fine_disc, None, &opts).unwrap();
        let reference = eval_qoi(&fine.x, &fine.u, &spec, &Qoi::Full).unwrap();
        let ratio = (ind.eta_k + ind.eta_h).abs() / (reference - coarse).abs();
        assert!((0.2..=5.0).contains(&ratio), "M = {slabs}: effectivity {ratio}");
    }
}
