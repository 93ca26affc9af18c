//! State, adjoint and linearized sweeps, reduced gradient and Hessian, and the
//! optimization loop for the discrete optimal control problem.
//!
//! Sign convention: the spatial operator is written as `a(x) = -Ā(x)`, i.e.
//! `a(x) = ν K x - s M x` (linear) or the weak quasilinear diffusion residual.
//! The discrete Lagrangian is
//!
//! ```text
//! L = Σ_m k_m/2 (‖x_m - Π x_d(t_m)‖² + α ‖u_m‖²_U)
//!   + Σ_m ⟨x_m - x_{m-1}, λ_m⟩ + Σ_m k_m ⟨a(x_m) - B u_m - f, λ_m⟩ + ⟨x_0^- - x_0, λ_0^-⟩
//! ```
//!
//! so one time step reads `(M_m + k_m a'(x_m)) x_m = C_{m,m-1} x_{m-1} + k_m (B u_m + f)`
//! where `C_{m,m-1}` is the exact mass matrix between the two slab meshes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_control, assemble_mass, assemble_quasilinear_jacobian, assemble_quasilinear_residual, load_vector,
    quasilinear_second_derivative, stiffness, ControlKind, ControlOperator,
};
use crate::grid::{Overlay, SpaceTimeGrid};
use crate::model::{window_slabs, Dynamics, InitialState, ProblemSpec, Qoi};
use crate::trajectory::{ControlTrajectory, DgTrajectory};
use crate::tridiag::{dot, TriLu, TriMatrix};

/// Treatment of the λ-weighted second derivative of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    #[default]
    Exact,
    GaussNewton,
}

/// Relative Newton decrement at which the cost can no longer resolve progress.
const DECREMENT_ROUNDOFF: f64 = 1e-10;

/// Accepted step length treated as a stalled line search.
const STALLED_STEP: f64 = 1e-6;

/// Relative Newton update treated as round-off in the slab solve.
const UPDATE_ROUNDOFF: f64 = 1e-13;
/// Smallest increment of the continuation parameter in the slab solve.
const MIN_CONTINUATION_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative gradient reduction for the linear-quadratic CG solve.
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
    /// Newton-CG stops at `‖g‖_U <= newton_tol * max(1, ‖Π x_d‖_{L2(0,T;L2)})`.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub armijo_sigma: f64,
    pub max_halvings: usize,
    pub hessian: HessianMode,
    /// Relative residual reduction for the secondary (sensitivity) solve.
    pub secondary_rel_tol: f64,
    /// Per-slab Newton tolerance, relative to the largest residual term.
    pub state_newton_tol: f64,
    pub state_newton_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            cg_rel_tol: 1e-9,
            cg_max_iter: 500,
            newton_tol: 1e-8,
            newton_max_iter: 100,
            armijo_sigma: 1e-4,
            max_halvings: 30,
            hessian: HessianMode::Exact,
            secondary_rel_tol: 1e-11,
            state_newton_tol: 1e-11,
            state_newton_max_iter: 50,
        }
    }
}

#[derive(Debug, Clone)]
struct SlabOps {
    k: f64,
    mass: TriMatrix,
    mass_lu: TriLu,
    /// Mass with the Dirichlet rows/columns replaced by the identity.
    mass_constrained_lu: TriLu,
    fixed: Vec<bool>,
    control: ControlOperator,
    /// `ν K - s M` for linear dynamics.
    linear: Option<TriMatrix>,
    /// Factorized `M + k (ν K - s M)` for linear dynamics.
    linear_step: Option<TriLu>,
    load: Vec<f64>,
    xd: Vec<f64>,
}

/// Everything assembled once per space-time grid.
#[derive(Debug, Clone)]
pub struct Discretization {
    grid: Arc<SpaceTimeGrid>,
    spec: ProblemSpec,
    ops: Vec<SlabOps>,
    overlays: Vec<Overlay>,
    x0: Vec<f64>,
}

fn pin(fixed: &[bool], v: &mut [f64]) {
    for (x, &f) in v.iter_mut().zip(fixed) {
        if f {
            *x = 0.0;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

impl Discretization {
    pub fn new(grid: Arc<SpaceTimeGrid>, spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let length = grid.length();
        if (length - spec.length).abs() > 1e-12 * spec.length {
            return Err(Error::DomainMismatch {
                left: length,
                right: spec.length,
            });
        }
        let mut ops = Vec::with_capacity(grid.num_slabs() + 1);
        for (m, mesh) in grid.meshes.iter().enumerate() {
            let k = if m == 0 { 0.0 } else { grid.time.k(m) };
            let mass = assemble_mass(mesh);
            let fixed = spec.control.constrained(mesh);
            let mut mc = mass.clone();
            mc.constrain(&fixed);
            let linear = match spec.dynamics {
                Dynamics::Linear { nu, s } => Some(stiffness(mesh, nu)?.axpy(-s, &mass)),
                Dynamics::Quasilinear { .. } => None,
            };
            let linear_step = match (&linear, m) {
                (Some(a), m) if m > 0 => {
                    let mut step = mass.axpy(k, a);
                    step.constrain(&fixed);
                    Some(step.factor()?)
                }
                _ => None,
            };
            let t = grid.time.t(m);
            ops.push(SlabOps {
                k,
                mass_lu: mass.factor()?,
                mass_constrained_lu: mc.factor()?,
                control: assemble_control(mesh, spec.control),
                linear,
                linear_step,
                load: load_vector(mesh, spec.f),
                xd: spec.reference_nodal(t, mesh),
                mass,
                fixed,
            });
        }
        let overlays = (0..grid.num_slabs())
            .map(|m| Overlay::new(grid.mesh(m), grid.mesh(m + 1)))
            .collect::<Result<Vec<_>>>()?;
        let mut disc = Self {
            grid,
            spec: spec.clone(),
            ops,
            overlays,
            x0: Vec::new(),
        };
        disc.x0 = disc.project_initial(&spec.x0)?;
        Ok(disc)
    }

    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn num_slabs(&self) -> usize {
        self.grid.num_slabs()
    }

    pub fn k(&self, m: usize) -> f64 {
        self.ops[m].k
    }

    pub fn mass(&self, m: usize) -> &TriMatrix {
        &self.ops[m].mass
    }

    pub fn fixed(&self, m: usize) -> &[bool] {
        &self.ops[m].fixed
    }

    pub fn control(&self, m: usize) -> &ControlOperator {
        &self.ops[m].control
    }

    /// Nodal interpolant of the reference at `t_m` on mesh `m`.
    pub fn reference(&self, m: usize) -> &[f64] {
        &self.ops[m].xd
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    /// L2 projection of `x0` onto the (constrained) initial mesh.
    fn project_initial(&self, x0: &InitialState) -> Result<Vec<f64>> {
        let mesh = self.grid.mesh(0);
        match x0 {
            InitialState::Zero => Ok(vec![0.0; mesh.num_nodes()]),
            InitialState::Nodal { nodes, values } => {
                if nodes.len() != values.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "initial state has {} nodes but {} values",
                        nodes.len(),
                        values.len()
                    )));
                }
                let source = crate::grid::SpaceMesh::new(nodes.clone())?;
                let overlay = Overlay::new(mesh, &source)?;
                let mut rhs = overlay.mass_apply_b_to_a(mesh, &source, values);
                pin(&self.ops[0].fixed, &mut rhs);
                Ok(self.ops[0].mass_constrained_lu.solve(&rhs))
            }
        }
    }

    /// `C_{m,m-1} v`: test functions of mesh `m` against `v` on mesh `m - 1`.
    pub fn cross_from_previous(&self, m: usize, v: &[f64]) -> Vec<f64> {
        self.overlays[m - 1].mass_apply_a_to_b(self.grid.mesh(m - 1), self.grid.mesh(m), v)
    }

    /// `C_{m,m+1} v`: test functions of mesh `m` against `v` on mesh `m + 1`.
    pub fn cross_from_next(&self, m: usize, v: &[f64]) -> Vec<f64> {
        self.overlays[m].mass_apply_b_to_a(self.grid.mesh(m), self.grid.mesh(m + 1), v)
    }

    /// Common refinement of meshes `m` and `m + 1` (`a` = mesh `m`).
    pub fn overlay(&self, m: usize) -> &Overlay {
        &self.overlays[m]
    }

    fn project(&self, m: usize, mut rhs: Vec<f64>, constrained: bool) -> Vec<f64> {
        let op = &self.ops[m];
        if constrained {
            pin(&op.fixed, &mut rhs);
            op.mass_constrained_lu.solve(&rhs)
        } else {
            op.mass_lu.solve(&rhs)
        }
    }

    /// L2 projection onto mesh `m` of `v` given on mesh `m - 1`.
    pub fn project_from_previous(&self, m: usize, v: &[f64], constrained: bool) -> Vec<f64> {
        self.project(m, self.cross_from_previous(m, v), constrained)
    }

    /// L2 projection onto mesh `m` of `v` given on mesh `m + 1`.
    pub fn project_from_next(&self, m: usize, v: &[f64], constrained: bool) -> Vec<f64> {
        self.project(m, self.cross_from_next(m, v), constrained)
    }

    /// `a(x)` on slab `m`.
    pub fn operator_value(&self, m: usize, x: &[f64]) -> Vec<f64> {
        match self.spec.dynamics {
            Dynamics::Linear { .. } => self.ops[m].linear.as_ref().expect("linear").matvec(x),
            Dynamics::Quasilinear { c, d } => {
                assemble_quasilinear_residual(self.grid.mesh(m), x, c, d).expect("validated")
            }
        }
    }

    /// `a'(x)` on slab `m`.
    pub fn operator_jacobian(&self, m: usize, x: &[f64]) -> TriMatrix {
        match self.spec.dynamics {
            Dynamics::Linear { .. } => self.ops[m].linear.clone().expect("linear"),
            Dynamics::Quasilinear { c, d } => {
                assemble_quasilinear_jacobian(self.grid.mesh(m), x, c, d).expect("validated")
            }
        }
    }

    /// `(a''(x)[dx, ·])^T λ`; zero for linear dynamics.
    pub fn operator_second(&self, m: usize, x: &[f64], dx: &[f64], lam: &[f64]) -> Vec<f64> {
        match self.spec.dynamics {
            Dynamics::Linear { .. } => vec![0.0; x.len()],
            Dynamics::Quasilinear { c, .. } => quasilinear_second_derivative(self.grid.mesh(m), x, dx, lam, c),
        }
    }

    /// Box-rule cost over `[0, T]`.
    pub fn cost(&self, x: &DgTrajectory, u: &ControlTrajectory) -> f64 {
        (1..=self.num_slabs())
            .map(|m| self.slab_cost(m, x.slab(m), u.slab(m)))
            .sum()
    }

    /// `k_m/2 (‖x_m - Π x_d‖² + α ‖u_m‖²_U)`.
    pub fn slab_cost(&self, m: usize, x: &[f64], u: &[f64]) -> f64 {
        let op = &self.ops[m];
        let e: Vec<f64> = x.iter().zip(&op.xd).map(|(a, b)| a - b).collect();
        0.5 * op.k * (dot(&op.mass.matvec(&e), &e) + self.spec.alpha * op.control.inner(u, u))
    }

    /// `max(1, ‖Π x_d‖)` in the box-rule `L2(0,T;L2)` norm; the outer Newton
    /// tolerance is relative to it.
    pub fn reference_scale(&self) -> f64 {
        let sq: f64 = self.ops[1..]
            .iter()
            .map(|op| op.k * dot(&op.mass.matvec(&op.xd), &op.xd))
            .sum();
        sq.sqrt().max(1.0)
    }

    /// `k_m M_m (x_m - Π x_d(t_m))`.
    pub fn tracking_gradient(&self, m: usize, x: &[f64]) -> Vec<f64> {
        let op = &self.ops[m];
        let e: Vec<f64> = x.iter().zip(&op.xd).map(|(a, b)| a - b).collect();
        op.mass.matvec(&e).into_iter().map(|v| op.k * v).collect()
    }

    fn state_rhs(&self, m: usize, prev: &[f64], u: &[f64]) -> Vec<f64> {
        let op = &self.ops[m];
        let mut rhs = self.cross_from_previous(m, prev);
        let bu = op.control.apply(u);
        for ((r, b), l) in rhs.iter_mut().zip(&bu).zip(&op.load) {
            *r += op.k * (b + l);
        }
        pin(&op.fixed, &mut rhs);
        rhs
    }

    fn step_matrix(&self, m: usize, x: &[f64]) -> TriMatrix {
        let op = &self.ops[m];
        let mut s = op.mass.axpy(op.k, &self.operator_jacobian(m, x));
        s.constrain(&op.fixed);
        s
    }

    /// Damped Newton for `M x + s k a(x) = rhs` on slab `m`; the error carries
    /// the residual history.
    fn newton_scaled(
        &self,
        m: usize,
        rhs: &[f64],
        guess: Vec<f64>,
        s: f64,
        opts: &SolverOptions,
    ) -> std::result::Result<Vec<f64>, Vec<f64>> {
        let op = &self.ops[m];
        let ks = s * op.k;
        // residual and the size of its largest term, for a round-off aware stop
        let residual = |x: &[f64]| -> (Vec<f64>, f64) {
            let ax = self.operator_value(m, x);
            let mx = op.mass.matvec(x);
            let mut g: Vec<f64> = (0..x.len()).map(|i| mx[i] + ks * ax[i] - rhs[i]).collect();
            for (i, &f) in op.fixed.iter().enumerate() {
                if f {
                    g[i] = x[i];
                }
            }
            let size = norm2(rhs).max(norm2(&mx)).max(ks * norm2(&ax)).max(1.0);
            (g, size)
        };
        let (g, size) = residual(&guess);
        let mut x = guess;
        let mut gnorm = norm2(&g);
        let mut tol = opts.state_newton_tol * size;
        let mut history = vec![gnorm];
        for _ in 0..opts.state_newton_max_iter {
            if gnorm <= tol {
                return Ok(x);
            }
            let mut jac = op.mass.axpy(ks, &self.operator_jacobian(m, &x));
            jac.constrain(&op.fixed);
            let Ok(dx) = jac.solve(&residual(&x).0) else {
                return Err(history);
            };
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - step * b).collect();
                let (g, size) = residual(&trial);
                let n = norm2(&g);
                if n < gnorm {
                    accepted = Some((trial, n, size));
                    break;
                }
                step *= 0.5;
            }
            let Some((xt, n, size)) = accepted else {
                // no decrease possible: converged if the update is at round-off
                if norm2(&dx) <= UPDATE_ROUNDOFF * norm2(&x).max(1.0) {
                    return Ok(x);
                }
                break;
            };
            x = xt;
            gnorm = n;
            tol = opts.state_newton_tol * size;
            history.push(gnorm);
        }
        if gnorm <= tol {
            Ok(x)
        } else {
            Err(history)
        }
    }

    /// Solves `M x + k a(x) = rhs` on slab `m`: damped Newton from `guess`,
    /// then continuation in the scaling of `a` from the mass solve if that fails.
    fn newton_slab(&self, m: usize, rhs: &[f64], guess: Vec<f64>, opts: &SolverOptions) -> Result<Vec<f64>> {
        let history = match self.newton_scaled(m, rhs, guess, 1.0, opts) {
            Ok(x) => return Ok(x),
            Err(h) => h,
        };
        let op = &self.ops[m];
        let mut b = rhs.to_vec();
        pin(&op.fixed, &mut b);
        let mut x = op.mass_constrained_lu.solve(&b);
        let (mut s, mut ds) = (0.0_f64, 0.125_f64);
        while s < 1.0 {
            let target = (s + ds).min(1.0);
            match self.newton_scaled(m, rhs, x.clone(), target, opts) {
                Ok(xn) => {
                    x = xn;
                    s = target;
                    ds *= 2.0;
                }
                Err(_) => {
                    ds *= 0.25;
                    if ds < MIN_CONTINUATION_STEP {
                        return Err(Error::NewtonFailed { slab: m, history });
                    }
                }
            }
        }
        Ok(x)
    }

    /// Forward sweep for the control `u`; `guess` seeds the per-slab Newton solves.
    pub fn solve_state(
        &self,
        u: &ControlTrajectory,
        guess: Option<&DgTrajectory>,
        opts: &SolverOptions,
    ) -> Result<DgTrajectory> {
        self.check_control(u)?;
        let mut values = Vec::with_capacity(self.num_slabs() + 1);
        values.push(self.x0.clone());
        for m in 1..=self.num_slabs() {
            let rhs = self.state_rhs(m, &values[m - 1], u.slab(m));
            let x = match &self.ops[m].linear_step {
                Some(lu) => lu.solve(&rhs),
                None => {
                    let start = match guess {
                        Some(g) if Arc::ptr_eq(g.grid(), &self.grid) || g.grid() == &self.grid => g.slab(m).to_vec(),
                        _ => crate::grid::interpolate(&values[m - 1], self.grid.mesh(m - 1), self.grid.mesh(m)),
                    };
                    self.newton_slab(m, &rhs, start, opts)?
                }
            };
            values.push(x);
        }
        DgTrajectory::new(self.grid.clone(), values)
    }

    fn check_control(&self, u: &ControlTrajectory) -> Result<()> {
        if u.kind() != self.spec.control || u.slabs().len() != self.num_slabs() {
            return Err(Error::ShapeMismatch("control does not match the discretization".into()));
        }
        Ok(())
    }

    /// Step matrices `M_m + k_m a'(x_m)` factorized at the state `x`.
    pub fn linearize(&self, x: &DgTrajectory) -> Result<Linearization> {
        let mut lu = Vec::with_capacity(self.num_slabs() + 1);
        lu.push(None);
        for m in 1..=self.num_slabs() {
            lu.push(match &self.ops[m].linear_step {
                Some(f) => Some(f.clone()),
                None => Some(self.step_matrix(m, x.slab(m)).factor()?),
            });
        }
        Ok(Linearization { lu })
    }

    /// Solves `S_m δ_m = C_{m,m-1} δ_{m-1} + forcing_m`, `δ_0 = initial`.
    pub fn forward_linear(&self, lin: &Linearization, initial: Vec<f64>, forcing: &[Vec<f64>]) -> DgTrajectory {
        let mut values = Vec::with_capacity(self.num_slabs() + 1);
        values.push(initial);
        for m in 1..=self.num_slabs() {
            let mut rhs = self.cross_from_previous(m, &values[m - 1]);
            for (r, f) in rhs.iter_mut().zip(&forcing[m]) {
                *r += f;
            }
            pin(&self.ops[m].fixed, &mut rhs);
            values.push(lin.step(m).solve(&rhs));
        }
        DgTrajectory::new(self.grid.clone(), values).expect("shapes follow the grid")
    }

    /// Solves `S_m^T z_m = C_{m,m+1} z_{m+1} + forcing_m` backwards with
    /// `z_{M+1} = 0`, then projects `z_1` onto the initial mesh.
    pub fn backward_linear(&self, lin: &Linearization, forcing: &[Vec<f64>]) -> DgTrajectory {
        let m_count = self.num_slabs();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); m_count + 1];
        for m in (1..=m_count).rev() {
            let mut rhs = if m < m_count {
                self.cross_from_next(m, &values[m + 1])
            } else {
                vec![0.0; self.grid.mesh(m).num_nodes()]
            };
            for (r, f) in rhs.iter_mut().zip(&forcing[m]) {
                *r += f;
            }
            pin(&self.ops[m].fixed, &mut rhs);
            values[m] = lin.step(m).solve_transpose(&rhs);
        }
        let mut rhs0 = self.cross_from_next(0, &values[1]);
        pin(&self.ops[0].fixed, &mut rhs0);
        values[0] = self.ops[0].mass_constrained_lu.solve(&rhs0);
        DgTrajectory::new(self.grid.clone(), values).expect("shapes follow the grid")
    }

    /// Adjoint for the cost restricted to the slab-aligned window `[a, b]`.
    pub fn solve_adjoint(&self, x: &DgTrajectory, lin: &Linearization, window: (f64, f64)) -> Result<DgTrajectory> {
        let range = window_slabs(&self.grid.time, window.0, window.1)?;
        let forcing: Vec<Vec<f64>> = (0..=self.num_slabs())
            .map(|m| {
                if range.contains(&m) {
                    self.tracking_gradient(m, x.slab(m)).into_iter().map(|v| -v).collect()
                } else {
                    vec![0.0; self.grid.mesh(m).num_nodes()]
                }
            })
            .collect();
        Ok(self.backward_linear(lin, &forcing))
    }

    /// Per-slab `α R u_m - B^T λ_m`.
    pub fn reduced_gradient(&self, u: &ControlTrajectory, lam: &DgTrajectory) -> ControlTrajectory {
        let slabs = (1..=self.num_slabs())
            .map(|m| {
                let c = &self.ops[m].control;
                let ru = c.riesz(u.slab(m));
                let bl = c.apply_adjoint(lam.slab(m));
                ru.iter().zip(&bl).map(|(a, b)| self.spec.alpha * a - b).collect()
            })
            .collect();
        ControlTrajectory::new(self.grid.clone(), u.kind(), slabs).expect("shapes follow the grid")
    }

    /// Coefficient gradient `∂J/∂u = (k_m (α R u_m - B^T λ_m))_m`, flattened.
    fn gradient_coefficients(&self, u: &ControlTrajectory, lam: &DgTrajectory) -> Vec<f64> {
        let g = self.reduced_gradient(u, lam);
        scale_by_k(self, &g)
    }

    /// `P^{-1} g` with `P = blockdiag(k_m R_m)`.
    fn precondition(&self, g: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(g.len());
        let mut at = 0;
        for m in 1..=self.num_slabs() {
            let op = &self.ops[m];
            let n = op.control.dim();
            let part = &g[at..at + n];
            let solved = match op.control.kind() {
                ControlKind::Distributed => op.mass_lu.solve(part),
                ControlKind::NeumannBoundary => part.to_vec(),
            };
            out.extend(solved.into_iter().map(|v| v / op.k));
            at += n;
        }
        out
    }

    /// `‖g‖_U` of a coefficient gradient: `sqrt(g^T P^{-1} g)`.
    pub fn dual_norm(&self, g: &[f64]) -> f64 {
        dot(g, &self.precondition(g)).max(0.0).sqrt()
    }

    /// Reduced Hessian times `du` in coefficient form (`k_m`-weighted).
    fn hessian_coefficients(&self, base: &BaseState<'_>, du: &[f64], mode: HessianMode) -> Vec<f64> {
        let dut = base.u.with_flat(du);
        let forcing = self.control_forcing(&dut);
        let dx = self.forward_linear(base.lin, vec![0.0; self.grid.mesh(0).num_nodes()], &forcing);
        let adj_forcing = self.second_order_forcing(base, &dx, mode);
        let dlam = self.backward_linear(base.lin, &adj_forcing);
        let mut out = Vec::with_capacity(du.len());
        for m in 1..=self.num_slabs() {
            let c = &self.ops[m].control;
            let ru = c.riesz(dut.slab(m));
            let bl = c.apply_adjoint(dlam.slab(m));
            let k = self.ops[m].k;
            out.extend(ru.iter().zip(&bl).map(|(a, b)| k * (self.spec.alpha * a - b)));
        }
        out
    }

    /// `k_m B u_m` per slab (index 0 empty initial forcing).
    fn control_forcing(&self, u: &ControlTrajectory) -> Vec<Vec<f64>> {
        let mut forcing = vec![vec![0.0; self.grid.mesh(0).num_nodes()]];
        for m in 1..=self.num_slabs() {
            let op = &self.ops[m];
            forcing.push(op.control.apply(u.slab(m)).into_iter().map(|v| op.k * v).collect());
        }
        forcing
    }

    /// `-(L_xx dx)` per slab: `-k M dx - k (a''[dx])^T λ`.
    fn second_order_forcing(&self, base: &BaseState<'_>, dx: &DgTrajectory, mode: HessianMode) -> Vec<Vec<f64>> {
        let mut forcing = vec![vec![0.0; self.grid.mesh(0).num_nodes()]];
        for m in 1..=self.num_slabs() {
            let op = &self.ops[m];
            let mut f: Vec<f64> = op.mass.matvec(dx.slab(m)).into_iter().map(|v| -op.k * v).collect();
            if mode == HessianMode::Exact && !self.spec.dynamics.is_linear() {
                let h2 = self.operator_second(m, base.x.slab(m), dx.slab(m), base.lam.slab(m));
                for (a, b) in f.iter_mut().zip(&h2) {
                    *a -= op.k * b;
                }
            }
            forcing.push(f);
        }
        forcing
    }
}

fn scale_by_k(disc: &Discretization, g: &ControlTrajectory) -> Vec<f64> {
    let mut out = Vec::new();
    for m in 1..=disc.num_slabs() {
        let k = disc.k(m);
        out.extend(g.slab(m).iter().map(|v| k * v));
    }
    out
}

/// Factorized step matrices at a fixed state.
#[derive(Debug, Clone)]
pub struct Linearization {
    lu: Vec<Option<TriLu>>,
}

impl Linearization {
    fn step(&self, m: usize) -> &TriLu {
        self.lu[m].as_ref().expect("slab step matrix")
    }
}

struct BaseState<'a> {
    x: &'a DgTrajectory,
    u: &'a ControlTrajectory,
    lam: &'a DgTrajectory,
    lin: &'a Linearization,
}

/// One row of the optimization log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub gradient_norm: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveInfo {
    pub outer_iterations: usize,
    pub gradient_norm: f64,
    pub cg_iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

/// The discrete optimal triple `(x, u, λ)`.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub x: DgTrajectory,
    pub u: ControlTrajectory,
    pub lam: DgTrajectory,
    pub info: SolveInfo,
}

impl KktSolution {
    pub fn cost(&self, disc: &Discretization) -> f64 {
        disc.cost(&self.x, &self.u)
    }
}

/// Outcome of [`pcg`].
#[derive(Debug, Clone)]
pub(crate) struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub negative_curvature: bool,
}

/// Preconditioned CG for `H x = b` stopping at `‖r‖_{P^{-1}} <= tol`.
pub(crate) fn pcg(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let mut x = x0;
    let hx = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&hx).map(|(a, c)| a - c).collect();
    let mut z = precond(&r);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    for it in 0..max_iter {
        if rz.max(0.0).sqrt() <= tol {
            return CgOutcome {
                x,
                iterations: it,
                converged: true,
                negative_curvature: false,
            };
        }
        let hp = apply(&p);
        let curvature = dot(&p, &hp);
        if curvature <= 0.0 {
            return CgOutcome {
                x,
                iterations: it,
                converged: false,
                negative_curvature: true,
            };
        }
        let step = rz / curvature;
        for i in 0..x.len() {
            x[i] += step * p[i];
            r[i] -= step * hp[i];
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    let converged = rz.max(0.0).sqrt() <= tol;
    CgOutcome {
        x,
        iterations: max_iter,
        converged,
        negative_curvature: false,
    }
}

/// Forward sweep (public entry point).
pub fn solve_forward(disc: &Discretization, u: &ControlTrajectory) -> Result<DgTrajectory> {
    disc.solve_state(u, None, &SolverOptions::default())
}

/// Adjoint sweep for the cost restricted to `window`.
pub fn solve_adjoint(disc: &Discretization, x: &DgTrajectory, window: (f64, f64)) -> Result<DgTrajectory> {
    let lin = disc.linearize(x)?;
    disc.solve_adjoint(x, &lin, window)
}

/// Per-slab `α R u_m - B^T λ_m`.
pub fn reduced_gradient(disc: &Discretization, u: &ControlTrajectory, lam: &DgTrajectory) -> ControlTrajectory {
    disc.reduced_gradient(u, lam)
}

/// Per-slab `α R du_m - B^T δλ_m` of the reduced Hessian at `base`.
pub fn hessian_apply(
    disc: &Discretization,
    base: &KktSolution,
    du: &ControlTrajectory,
    mode: HessianMode,
) -> Result<ControlTrajectory> {
    let lin = disc.linearize(&base.x)?;
    let state = BaseState {
        x: &base.x,
        u: &base.u,
        lam: &base.lam,
        lin: &lin,
    };
    let coeff = disc.hessian_coefficients(&state, &du.to_flat(), mode);
    Ok(unscale_by_k(disc, &base.u, &coeff))
}

fn unscale_by_k(disc: &Discretization, layout: &ControlTrajectory, coeff: &[f64]) -> ControlTrajectory {
    let mut t = layout.with_flat(coeff);
    for m in 1..=disc.num_slabs() {
        let k = disc.k(m);
        t.slab_mut(m).iter_mut().for_each(|v| *v /= k);
    }
    t
}

/// State, adjoint (full cost) and coefficient gradient at `u`.
fn evaluate(
    disc: &Discretization,
    u: &ControlTrajectory,
    guess: Option<&DgTrajectory>,
    opts: &SolverOptions,
) -> Result<(DgTrajectory, Linearization, DgTrajectory, Vec<f64>)> {
    let x = disc.solve_state(u, guess, opts)?;
    let lin = disc.linearize(&x)?;
    let lam = disc.solve_adjoint(&x, &lin, (0.0, disc.grid.time.end()))?;
    let g = disc.gradient_coefficients(u, &lam);
    Ok((x, lin, lam, g))
}

/// Solves the discrete optimal control problem. A returned solution with
/// `info.converged == false` is the best iterate after hitting an iteration cap.
pub fn solve_ocp(disc: &Discretization, warm: Option<&ControlTrajectory>, opts: &SolverOptions) -> Result<KktSolution> {
    let u0 = match warm {
        Some(u) => {
            disc.check_control(u)?;
            u.clone()
        }
        None => ControlTrajectory::zeros(disc.grid.clone(), disc.spec.control),
    };
    if disc.spec.dynamics.is_linear() {
        solve_linear_quadratic(disc, u0, opts)
    } else {
        solve_newton_cg(disc, u0, opts)
    }
}

fn solve_linear_quadratic(disc: &Discretization, u0: ControlTrajectory, opts: &SolverOptions) -> Result<KktSolution> {
    // g(u) = H u + g(0); solve H u = -g(0)
    let zero = ControlTrajectory::zeros(disc.grid.clone(), disc.spec.control);
    let (x_zero, lin, lam_zero, g_zero) = evaluate(disc, &zero, None, opts)?;
    let b: Vec<f64> = g_zero.iter().map(|v| -v).collect();
    let b_norm = disc.dual_norm(&b);
    let base = BaseState {
        x: &x_zero,
        u: &zero,
        lam: &lam_zero,
        lin: &lin,
    };
    let outcome = pcg(
        |p| disc.hessian_coefficients(&base, p, HessianMode::GaussNewton),
        |r| disc.precondition(r),
        &b,
        u0.to_flat(),
        opts.cg_rel_tol * b_norm,
        opts.cg_max_iter,
    );
    let u = u0.with_flat(&outcome.x);
    let (x, _, lam, g) = evaluate(disc, &u, None, opts)?;
    let gradient_norm = disc.dual_norm(&g);
    let converged = outcome.converged || gradient_norm <= opts.cg_rel_tol * b_norm;
    Ok(KktSolution {
        x,
        u,
        lam,
        info: SolveInfo {
            outer_iterations: 1,
            gradient_norm,
            cg_iterations: outcome.iterations,
            converged,
            log: vec![IterationLog {
                iteration: 1,
                gradient_norm,
                step_length: 1.0,
            }],
        },
    })
}

fn solve_newton_cg(disc: &Discretization, u0: ControlTrajectory, opts: &SolverOptions) -> Result<KktSolution> {
    let mut u = u0;
    let (mut x, mut lin, mut lam, mut g) = evaluate(disc, &u, None, opts)?;
    let mut cost = disc.cost(&x, &u);
    let mut info = SolveInfo::default();
    let tol = opts.newton_tol * disc.reference_scale();
    for iter in 1..=opts.newton_max_iter {
        let gnorm = disc.dual_norm(&g);
        info.gradient_norm = gnorm;
        if gnorm <= tol {
            info.converged = true;
            break;
        }
        info.outer_iterations = iter;
        let base = BaseState {
            x: &x,
            u: &u,
            lam: &lam,
            lin: &lin,
        };
        let b: Vec<f64> = g.iter().map(|v| -v).collect();
        let inner_tol = 0.1f64.min(gnorm.sqrt()) * gnorm;
        let outcome = pcg(
            |p| disc.hessian_coefficients(&base, p, opts.hessian),
            |r| disc.precondition(r),
            &b,
            vec![0.0; b.len()],
            inner_tol,
            opts.cg_max_iter,
        );
        info.cg_iterations += outcome.iterations;
        let direction = if outcome.negative_curvature && outcome.iterations == 0 {
            disc.precondition(&b)
        } else {
            outcome.x
        };
        let slope = dot(&g, &direction);
        let direction = if slope < 0.0 { direction } else { disc.precondition(&b) };
        let slope = dot(&g, &direction);

        let flat = u.to_flat();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial_flat: Vec<f64> = flat.iter().zip(&direction).map(|(a, d)| a + step * d).collect();
            let trial = u.with_flat(&trial_flat);
            if let Ok(xt) = disc.solve_state(&trial, Some(&x), opts) {
                let ct = disc.cost(&xt, &trial);
                if ct <= cost + opts.armijo_sigma * step * slope {
                    accepted = Some((trial, xt, ct));
                    break;
                }
            }
            step *= 0.5;
        }
        // Armijo cannot resolve a decrease below the round-off of the cost.
        let stalled = accepted.is_none() || step < STALLED_STEP;
        if stalled && -slope <= DECREMENT_ROUNDOFF * cost.abs().max(1.0) {
            info.converged = true;
            break;
        }
        let Some((ut, xt, ct)) = accepted else {
            return Err(Error::LineSearchFailed {
                halvings: opts.max_halvings,
            });
        };
        u = ut;
        cost = ct;
        lin = disc.linearize(&xt)?;
        lam = disc.solve_adjoint(&xt, &lin, (0.0, disc.grid.time.end()))?;
        x = xt;
        g = disc.gradient_coefficients(&u, &lam);
        info.log.push(IterationLog {
            iteration: iter,
            gradient_norm: gnorm,
            step_length: step,
        });
    }
    if !info.converged {
        info.gradient_norm = disc.dual_norm(&g);
        info.converged = info.gradient_norm <= tol;
    }
    Ok(KktSolution { x, u, lam, info })
}

/// Secondary variables `(v, q, z)`.
#[derive(Debug, Clone)]
pub struct SecondarySolution {
    pub v: DgTrajectory,
    pub q: ControlTrajectory,
    pub z: DgTrajectory,
    pub cg_iterations: usize,
    pub converged: bool,
}

impl SecondarySolution {
    pub fn zeros(disc: &Discretization) -> Self {
        Self {
            v: DgTrajectory::zeros(disc.grid.clone()),
            q: ControlTrajectory::zeros(disc.grid.clone(), disc.spec.control),
            z: DgTrajectory::zeros(disc.grid.clone()),
            cg_iterations: 0,
            converged: true,
        }
    }
}

/// The QOI derivatives `I'_x`, `I'_u` as per-slab dual vectors (box-rule weighted).
#[derive(Debug, Clone)]
pub struct LinearizedRhs {
    pub state: Vec<Vec<f64>>,
    pub adjoint: Vec<Vec<f64>>,
    pub control: Vec<Vec<f64>>,
}

impl LinearizedRhs {
    /// `I'_x,m = k_m M (x_m - Π x_d)` and `I'_u,m = k_m α R u_m` on QOI slabs.
    pub fn for_qoi(disc: &Discretization, base: &KktSolution, qoi: &Qoi) -> Result<Self> {
        let end = qoi.window_end(disc.grid.time.end());
        let range = window_slabs(&disc.grid.time, 0.0, end)?;
        let m_count = disc.num_slabs();
        let zeros_state = |m: usize| vec![0.0; disc.grid.mesh(m).num_nodes()];
        let mut adjoint = vec![zeros_state(0)];
        let mut control = Vec::with_capacity(m_count);
        for m in 1..=m_count {
            let k = disc.k(m);
            if range.contains(&m) {
                adjoint.push(disc.tracking_gradient(m, base.x.slab(m)));
                control.push(
                    disc.control(m)
                        .riesz(base.u.slab(m))
                        .into_iter()
                        .map(|v| k * disc.spec.alpha * v)
                        .collect(),
                );
            } else {
                adjoint.push(zeros_state(m));
                control.push(vec![0.0; disc.control(m).dim()]);
            }
        }
        let state = (0..=m_count).map(zeros_state).collect();
        Ok(Self {
            state,
            adjoint,
            control,
        })
    }
}

/// Solves the linearized optimality system with right-hand side `-I'`.
pub fn solve_secondary(
    disc: &Discretization,
    base: &KktSolution,
    qoi: &Qoi,
    opts: &SolverOptions,
) -> Result<SecondarySolution> {
    let rhs = LinearizedRhs::for_qoi(disc, base, qoi)?;
    let lin = disc.linearize(&base.x)?;
    let mode = if disc.spec.dynamics.is_linear() {
        HessianMode::GaussNewton
    } else {
        opts.hessian
    };
    let state = BaseState {
        x: &base.x,
        u: &base.u,
        lam: &base.lam,
        lin: &lin,
    };
    // z_0: adjoint driven by -I'_x alone
    let neg_ix: Vec<Vec<f64>> = rhs.adjoint.iter().map(|f| f.iter().map(|v| -v).collect()).collect();
    let z0 = disc.backward_linear(&lin, &neg_ix);
    let mut b = Vec::new();
    for m in 1..=disc.num_slabs() {
        let k = disc.k(m);
        let bz = disc.control(m).apply_adjoint(z0.slab(m));
        b.extend(bz.iter().zip(&rhs.control[m - 1]).map(|(a, c)| k * a - c));
    }
    let b_norm = disc.dual_norm(&b);
    if b_norm == 0.0 && rhs.adjoint.iter().all(|f| f.iter().all(|v| *v == 0.0)) {
        return Ok(SecondarySolution::zeros(disc));
    }
    let outcome = pcg(
        |p| disc.hessian_coefficients(&state, p, mode),
        |r| disc.precondition(r),
        &b,
        vec![0.0; b.len()],
        opts.secondary_rel_tol * b_norm,
        opts.cg_max_iter,
    );
    let q = base.u.with_flat(&outcome.x);
    let forcing = disc.control_forcing(&q);
    let v = disc.forward_linear(&lin, vec![0.0; disc.grid.mesh(0).num_nodes()], &forcing);
    let mut zf = disc.second_order_forcing(&state, &v, mode);
    for (f, ix) in zf.iter_mut().zip(&rhs.adjoint) {
        for (a, b) in f.iter_mut().zip(ix) {
            *a -= b;
        }
    }
    let z = disc.backward_linear(&lin, &zf);
    Ok(SecondarySolution {
        v,
        q,
        z,
        cg_iterations: outcome.iterations,
        converged: outcome.converged || b_norm == 0.0,
    })
}

/// Residuals of the three discrete optimality equations, measured in dual
/// norms `‖r‖_{M^{-1}}` summed over slabs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub state: f64,
    pub adjoint: f64,
    pub gradient: f64,
}

pub fn kkt_residuals(disc: &Discretization, sol: &KktSolution) -> KktResiduals {
    let m_count = disc.num_slabs();
    let mut state = 0.0;
    let mut adjoint = 0.0;
    let dual = |m: usize, mut r: Vec<f64>| -> f64 {
        pin(disc.fixed(m), &mut r);
        dot(&disc.ops[m].mass_constrained_lu.solve(&r), &r).max(0.0)
    };
    for m in 1..=m_count {
        let op = &disc.ops[m];
        let x = sol.x.slab(m);
        let lam = sol.lam.slab(m);
        // state: M x_m + k a(x_m) - C x_{m-1} - k (B u_m + f)
        let rhs = disc.state_rhs(m, sol.x.slab(m - 1), sol.u.slab(m));
        let ax = disc.operator_value(m, x);
        let mx = op.mass.matvec(x);
        let r: Vec<f64> = (0..x.len()).map(|i| mx[i] + op.k * ax[i] - rhs[i]).collect();
        state += dual(m, r);
        // adjoint: M λ_m + k a'(x_m)^T λ_m - C λ_{m+1} + k M (x_m - x_d)
        let jt = disc.operator_jacobian(m, x).matvec_transpose(lam);
        let ml = op.mass.matvec(lam);
        let next = if m < m_count {
            disc.cross_from_next(m, sol.lam.slab(m + 1))
        } else {
            vec![0.0; lam.len()]
        };
        let tg = disc.tracking_gradient(m, x);
        let r: Vec<f64> = (0..x.len()).map(|i| ml[i] + op.k * jt[i] - next[i] + tg[i]).collect();
        adjoint += dual(m, r);
    }
    let g = disc.gradient_coefficients(&sol.u, &sol.lam);
    KktResiduals {
        state: state.sqrt(),
        adjoint: adjoint.sqrt(),
        gradient: disc.dual_norm(&g),
    }
}

/// `⟨Λ^k v, φ⟩ = Σ_m (⟨[v]_{m-1}, φ_m⟩ + k_m ⟨a'(x_m) v_m, φ_m⟩) + ⟨v_0^-, φ_0^-⟩`
/// with `a'` frozen at `x`.
pub fn lambda_form(disc: &Discretization, x: &DgTrajectory, v: &DgTrajectory, phi: &DgTrajectory) -> f64 {
    let mut total = dot(&disc.mass(0).matvec(v.slab(0)), phi.slab(0));
    for m in 1..=disc.num_slabs() {
        let own = dot(&disc.mass(m).matvec(v.slab(m)), phi.slab(m));
        let prev = dot(&disc.cross_from_previous(m, v.slab(m - 1)), phi.slab(m));
        let a = dot(&disc.operator_jacobian(m, x.slab(m)).matvec(v.slab(m)), phi.slab(m));
        total += own - prev + disc.k(m) * a;
    }
    total
}

/// `⟨Λ^{k,-} z, φ⟩ = -Σ_m ⟨[z]_{m-1}, φ_{m-1}^-⟩ + Σ_m k_m ⟨a'(x_m)^T z_m, φ_m⟩ + ⟨z_M^-, φ_M^-⟩`.
pub fn lambda_minus_form(disc: &Discretization, x: &DgTrajectory, z: &DgTrajectory, phi: &DgTrajectory) -> f64 {
    let m_count = disc.num_slabs();
    let mut total = dot(&disc.mass(m_count).matvec(z.slab(m_count)), phi.slab(m_count));
    for m in 1..=m_count {
        // ⟨z_m - z_{m-1}, φ_{m-1}⟩ with φ_{m-1} on mesh m-1
        let plus = dot(&disc.cross_from_next(m - 1, z.slab(m)), phi.slab(m - 1));
        let minus = dot(&disc.mass(m - 1).matvec(z.slab(m - 1)), phi.slab(m - 1));
        let a = dot(
            &disc.operator_jacobian(m, x.slab(m)).matvec_transpose(z.slab(m)),
            phi.slab(m),
        );
        total += -(plus - minus) + disc.k(m) * a;
    }
    total
}
