#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use mpc_dwr::dwr::{
    residuals_dual, residuals_primal, ControlTest, DualWeights, Enriched, PrimalWeights, SlabTest, StateTest,
};
use mpc_dwr::fem::ControlKind;
use mpc_dwr::grid::{SpaceMesh, SpaceTimeGrid, TimeGrid};
use mpc_dwr::model::{Dynamics, ProblemSpec, Qoi, Reference};
use mpc_dwr::solver::{
    hessian_apply, lambda_form, lambda_minus_form, reduced_gradient, solve_adjoint, Discretization, HessianMode,
    KktSolution, SecondarySolution, SolveInfo, SolverOptions,
};
use mpc_dwr::trajectory::{ControlTrajectory, DgTrajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_grid(t_end: f64, slabs: usize, elements: usize) -> Arc<SpaceTimeGrid> {
    Arc::new(SpaceTimeGrid::uniform(
        TimeGrid::uniform(t_end, slabs).unwrap(),
        SpaceMesh::uniform(3.0, elements).unwrap(),
    ))
}

/// Random time points and meshes that differ from slab to slab.
pub fn mixed_grid(rng: &mut ChaCha8Rng, slabs: usize, max_nodes: usize) -> Arc<SpaceTimeGrid> {
    let mut points = vec![0.0];
    for _ in 0..slabs {
        let last = *points.last().unwrap();
        points.push(last + rng.gen_range(0.05..0.5));
    }
    let time = TimeGrid::new(points).unwrap();
    let meshes = (0..=slabs)
        .map(|_| {
            let inner = rng.gen_range(1..=max_nodes - 2);
            let mut nodes: Vec<f64> = (0..inner).map(|_| rng.gen_range(0.05..2.95)).collect();
            nodes.sort_by(f64::total_cmp);
            nodes.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            let mut all = vec![0.0];
            all.extend(nodes);
            all.push(3.0);
            SpaceMesh::new(all).unwrap()
        })
        .collect();
    Arc::new(SpaceTimeGrid::new(time, meshes).unwrap())
}

pub fn random_control(
    rng: &mut ChaCha8Rng,
    grid: &Arc<SpaceTimeGrid>,
    kind: ControlKind,
    scale: f64,
) -> ControlTrajectory {
    let mut u = ControlTrajectory::zeros(grid.clone(), kind);
    for m in 1..=grid.num_slabs() {
        u.slab_mut(m)
            .iter_mut()
            .for_each(|v| *v = scale * rng.gen_range(-1.0..1.0));
    }
    u
}

pub fn random_traj(
    rng: &mut ChaCha8Rng,
    grid: &Arc<SpaceTimeGrid>,
    fixed: impl Fn(usize) -> Vec<bool>,
) -> DgTrajectory {
    let mut v = DgTrajectory::zeros(grid.clone());
    for m in 0..=grid.num_slabs() {
        let f = fixed(m);
        v.slab_mut(m)
            .iter_mut()
            .zip(f)
            .for_each(|(x, pinned)| *x = if pinned { 0.0 } else { rng.gen_range(-1.0..1.0) });
    }
    v
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale
}

/// Linear and quasilinear problems with both control kinds.
pub fn specs() -> Vec<ProblemSpec> {
    vec![
        ProblemSpec {
            dynamics: Dynamics::Linear { nu: 0.1, s: 0.3 },
            control: ControlKind::Distributed,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Linear { nu: 0.1, s: 0.0 },
            control: ControlKind::NeumannBoundary,
            reference: Reference::Dynamic,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Quasilinear { c: 0.5, d: 0.1 },
            control: ControlKind::NeumannBoundary,
            reference: Reference::Dynamic,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
        ProblemSpec {
            dynamics: Dynamics::Quasilinear { c: 0.2, d: 0.1 },
            control: ControlKind::Distributed,
            alpha: 1e-2,
            ..ProblemSpec::default()
        },
    ]
}

/// Worst relative violation of adjoint symmetry and of the jump-energy
/// identity over `trials` random trajectories on random grids.
pub fn structural_identities(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = specs();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let slabs = rng.gen_range(1..=8);
        let g = mixed_grid(&mut rng, slabs, 9);
        let disc = Discretization::new(g.clone(), &specs[trial % specs.len()]).unwrap();
        let x = random_traj(&mut rng, &g, |m| disc.fixed(m).to_vec());
        let v = random_traj(&mut rng, &g, |m| disc.fixed(m).to_vec());
        let z = random_traj(&mut rng, &g, |m| disc.fixed(m).to_vec());
        let a = lambda_minus_form(&disc, &x, &z, &v);
        let b = lambda_form(&disc, &x, &v, &z);
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        let (lhs, rhs) = v.jump_energy().unwrap();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    worst
}

/// State and adjoint for a fixed control.
pub fn state_at(disc: &Discretization, u: &ControlTrajectory) -> KktSolution {
    let opts = SolverOptions::default();
    let x = disc.solve_state(u, None, &opts).unwrap();
    let lam = solve_adjoint(disc, &x, (0.0, disc.grid().time.end())).unwrap();
    KktSolution {
        x,
        u: u.clone(),
        lam,
        info: SolveInfo::default(),
    }
}

/// Relative error of the reduced gradient against central differences of the cost.
pub fn gradient_fd_error(disc: &Discretization, u: &ControlTrajectory) -> f64 {
    let opts = SolverOptions::default();
    let base = state_at(disc, u);
    let grad = reduced_gradient(disc, u, &base.lam);
    let eps = 1e-5;
    let mut fd = Vec::new();
    let mut exact = Vec::new();
    for m in 1..=disc.num_slabs() {
        for i in 0..u.slab(m).len() {
            let mut up = u.clone();
            up.slab_mut(m)[i] += eps;
            let mut um = u.clone();
            um.slab_mut(m)[i] -= eps;
            let jp = disc.cost(&disc.solve_state(&up, None, &opts).unwrap(), &up);
            let jm = disc.cost(&disc.solve_state(&um, None, &opts).unwrap(), &um);
            fd.push((jp - jm) / (2.0 * eps));
            exact.push(disc.k(m) * grad.slab(m)[i]);
        }
    }
    rel_err(&fd, &exact)
}

/// Relative error of the exact Hessian applied to `du` against differenced gradients.
pub fn hessian_fd_error(disc: &Discretization, u: &ControlTrajectory, du: &ControlTrajectory) -> f64 {
    let base = state_at(disc, u);
    let h = hessian_apply(disc, &base, du, HessianMode::Exact).unwrap();
    let eps = 1e-5;
    let shift = |sign: f64| {
        let flat: Vec<f64> = u
            .to_flat()
            .iter()
            .zip(du.to_flat())
            .map(|(a, b)| a + sign * eps * b)
            .collect();
        let us = u.with_flat(&flat);
        let s = state_at(disc, &us);
        reduced_gradient(disc, &us, &s.lam).to_flat()
    };
    let (gp, gm) = (shift(1.0), shift(-1.0));
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    rel_err(&fd, &h.to_flat())
}

pub fn tight() -> SolverOptions {
    SolverOptions {
        cg_rel_tol: 1e-12,
        newton_tol: 1e-10,
        ..SolverOptions::default()
    }
}

/// Unit state test functions: one per (slab, free node).
pub fn state_basis(disc: &Discretization) -> Vec<StateTest> {
    let mut out = Vec::new();
    for m in 0..=disc.num_slabs() {
        for i in 0..disc.grid().mesh(m).num_nodes() {
            if disc.fixed(m)[i] {
                continue;
            }
            let mut t = StateTest::zeros(disc);
            let mut phi = vec![0.0; disc.grid().mesh(m).num_nodes()];
            phi[i] = 1.0;
            t.slabs[m] = SlabTest::constant(Enriched::nodal(phi));
            out.push(t);
        }
    }
    out
}

pub fn control_basis(disc: &Discretization) -> Vec<ControlTest> {
    let mut out = Vec::new();
    for m in 1..=disc.num_slabs() {
        for i in 0..disc.control(m).dim() {
            let mut t = ControlTest::zeros(disc);
            t.slabs[m - 1].nodal[i] = 1.0;
            out.push(t);
        }
    }
    out
}

/// Largest magnitude of each residual form over the discrete test basis, in
/// the order λ, u, x (primal) and z, q, v (dual).
pub fn worst_form_residuals(disc: &Discretization, base: &KktSolution, chi: &SecondarySolution, qoi: &Qoi) -> [f64; 6] {
    let zs = StateTest::zeros(disc);
    let zc = ControlTest::zeros(disc);
    let mut worst = [0.0f64; 6];
    for t in state_basis(disc) {
        let p = residuals_primal(
            disc,
            base,
            &PrimalWeights {
                v: t.clone(),
                q: zc.clone(),
                z: t.clone(),
            },
        )
        .unwrap();
        let d = residuals_dual(
            disc,
            base,
            chi,
            qoi,
            HessianMode::Exact,
            &DualWeights {
                x: t.clone(),
                u: zc.clone(),
                lam: t.clone(),
            },
        )
        .unwrap();
        worst[0] = worst[0].max(p.lambda.total().abs());
        worst[2] = worst[2].max(p.x.total().abs());
        worst[3] = worst[3].max(d.z.total().abs());
        worst[5] = worst[5].max(d.v.total().abs());
    }
    for t in control_basis(disc) {
        let p = residuals_primal(
            disc,
            base,
            &PrimalWeights {
                v: zs.clone(),
                q: t.clone(),
                z: zs.clone(),
            },
        )
        .unwrap();
        let d = residuals_dual(
            disc,
            base,
            chi,
            qoi,
            HessianMode::Exact,
            &DualWeights {
                x: zs.clone(),
                u: t.clone(),
                lam: zs.clone(),
            },
        )
        .unwrap();
        worst[1] = worst[1].max(p.u.total().abs());
        worst[4] = worst[4].max(d.q.total().abs());
    }
    worst
}
