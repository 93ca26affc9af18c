//! Goal-oriented error estimation: weight reconstruction, the six residual
//! forms of the discrete Lagrangian and their localization to slabs and
//! elements.
//!
//! Test functions live in the P1 space enriched by one quadratic bubble per
//! element and are linear in time on each slab. Every form is assembled with
//! 3-point Gauss quadrature per element (per sub-interval of the common
//! refinement for cross-slab terms), and each contribution is attributed to
//! the slab and element carrying the test function.

use crate::error::{Error, Result};
use crate::fem::{ControlKind, GAUSS3};
use crate::grid::{Overlay, SpaceMesh};
use crate::model::{window_slabs, Dynamics, InitialState, Qoi};
use crate::solver::{Discretization, HessianMode, KktSolution, SecondarySolution};
use crate::trajectory::{ControlTrajectory, DgTrajectory};

/// P1 coefficients plus one bubble coefficient per element (the bubble is
/// `4 s (1 - s)` on the reference element). An empty `bubble` means none.
///
/// For Neumann boundary controls `nodal` holds the flux pair and `bubble` is empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Enriched {
    pub nodal: Vec<f64>,
    pub bubble: Vec<f64>,
}

impl Enriched {
    pub fn nodal(values: Vec<f64>) -> Self {
        Self {
            nodal: values,
            bubble: Vec::new(),
        }
    }

    pub fn bubbles(num_nodes: usize, bubble: Vec<f64>) -> Self {
        Self {
            nodal: vec![0.0; num_nodes],
            bubble,
        }
    }

    pub fn zeros(num_nodes: usize) -> Self {
        Self::nodal(vec![0.0; num_nodes])
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            nodal: self.nodal.iter().map(|v| a * v).collect(),
            bubble: self.bubble.iter().map(|v| a * v).collect(),
        }
    }

    fn is_zero(&self) -> bool {
        self.nodal.iter().chain(&self.bubble).all(|v| *v == 0.0)
    }

    fn bubble_at(&self, e: usize) -> f64 {
        self.bubble.get(e).copied().unwrap_or(0.0)
    }

    fn value(&self, e: usize, s: f64) -> f64 {
        self.nodal[e] * (1.0 - s) + self.nodal[e + 1] * s + self.bubble_at(e) * 4.0 * s * (1.0 - s)
    }

    fn slope(&self, e: usize, s: f64, h: f64) -> f64 {
        (self.nodal[e + 1] - self.nodal[e] + self.bubble_at(e) * 4.0 * (1.0 - 2.0 * s)) / h
    }
}

/// Test function on one slab: value at the left end (right limit), effective
/// time-integral value, and value at the right end (left limit).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlabTest {
    pub start: Enriched,
    pub mean: Enriched,
    pub end: Enriched,
}

impl SlabTest {
    /// Constant in time.
    pub fn constant(phi: Enriched) -> Self {
        Self {
            start: phi.clone(),
            mean: phi.clone(),
            end: phi,
        }
    }

    /// Linear in time from `start` to zero, integrated exactly.
    pub fn ramp(start: Enriched) -> Self {
        let n = start.nodal.len();
        Self {
            mean: start.scaled(0.5),
            start,
            end: Enriched::zeros(n),
        }
    }
}

/// State-space test function; entry 0 is the initial slab, of which only
/// `end` (the value at `t_0^-`) enters the forms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateTest {
    pub slabs: Vec<SlabTest>,
}

impl StateTest {
    pub fn zeros(disc: &Discretization) -> Self {
        let grid = disc.grid();
        Self {
            slabs: (0..=grid.num_slabs())
                .map(|m| SlabTest::constant(Enriched::zeros(grid.mesh(m).num_nodes())))
                .collect(),
        }
    }
}

/// Control test function: the effective time-integral value on slab `m`
/// at index `m - 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlTest {
    pub slabs: Vec<Enriched>,
}

impl ControlTest {
    pub fn zeros(disc: &Discretization) -> Self {
        Self {
            slabs: (1..=disc.num_slabs())
                .map(|m| Enriched::zeros(disc.control(m).dim()))
                .collect(),
        }
    }
}

/// Form contributions per slab (0..=M) and element of the slab mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Localized {
    pub slabs: Vec<Vec<f64>>,
}

impl Localized {
    fn zeros(disc: &Discretization) -> Self {
        let grid = disc.grid();
        Self {
            slabs: (0..=grid.num_slabs())
                .map(|m| vec![0.0; grid.mesh(m).num_elements()])
                .collect(),
        }
    }

    pub fn slab_totals(&self) -> Vec<f64> {
        self.slabs.iter().map(|s| s.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.slabs.iter().flatten().sum()
    }

    fn add(&mut self, other: &Localized) {
        for (a, b) in self.slabs.iter_mut().zip(&other.slabs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalResiduals {
    /// Adjoint equation residual `L_x`.
    pub lambda: Localized,
    /// Gradient residual `L_u`.
    pub u: Localized,
    /// State equation residual `L_λ`.
    pub x: Localized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualResiduals {
    pub z: Localized,
    pub q: Localized,
    pub v: Localized,
}

/// Weights for the primal residuals, built from `(v, q, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalWeights {
    pub v: StateTest,
    pub q: ControlTest,
    pub z: StateTest,
}

/// Weights for the dual residuals, built from `(x, u, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWeights {
    pub x: StateTest,
    pub u: ControlTest,
    pub lam: StateTest,
}

/// Signed error indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicators {
    /// `η_{k,m}` at index `m - 1`; the initial-value contribution is part of slab 1.
    pub time: Vec<f64>,
    /// `η_{h,m,e}` for `m = 0..=M` (entry 0 is the initial mesh).
    pub space: Vec<Vec<f64>>,
    pub eta_k: f64,
    pub eta_h: f64,
}

impl Indicators {
    fn from_parts(time: Vec<f64>, space: Vec<Vec<f64>>) -> Self {
        let eta_k = time.iter().sum();
        let eta_h = space.iter().flatten().sum();
        Self {
            time,
            space,
            eta_k,
            eta_h,
        }
    }

    /// Sum of the space indicators of each slab.
    pub fn space_per_slab(&self) -> Vec<f64> {
        self.space.iter().map(|s| s.iter().sum()).collect()
    }
}

/// Per-slab left-end weights `P_m y_{m-1} - y_m` of the piecewise linear time
/// reconstruction through `(t_m, y_m)`; entry 0 (the initial value) is zero.
pub fn reconstruct_time(disc: &Discretization, y: &DgTrajectory, constrained: bool) -> Result<Vec<Vec<f64>>> {
    let m_count = disc.num_slabs();
    if m_count < 2 {
        return Err(Error::InsufficientData(format!(
            "time reconstruction needs at least 2 slabs, got {m_count}"
        )));
    }
    let mut out = vec![vec![0.0; y.slab(0).len()]];
    for m in 1..=m_count {
        let prev = disc.project_from_previous(m, y.slab(m - 1), constrained);
        out.push(prev.iter().zip(y.slab(m)).map(|(a, b)| a - b).collect());
    }
    Ok(out)
}

/// Left-end time weights of a control; slab 1 extrapolates the line through
/// slabs 1 and 2. Entry `m - 1` belongs to slab `m`.
pub fn reconstruct_time_control(disc: &Discretization, u: &ControlTrajectory) -> Result<Vec<Vec<f64>>> {
    let m_count = disc.num_slabs();
    if m_count < 2 {
        return Err(Error::InsufficientData(format!(
            "time reconstruction needs at least 2 slabs, got {m_count}"
        )));
    }
    let moved = |m: usize, v: &[f64], from_next: bool| match u.kind() {
        ControlKind::NeumannBoundary => v.to_vec(),
        ControlKind::Distributed if from_next => disc.project_from_next(m, v, false),
        ControlKind::Distributed => disc.project_from_previous(m, v, false),
    };
    let ratio = disc.k(1) / disc.k(2);
    let next = moved(1, u.slab(2), true);
    let mut out = vec![u.slab(1).iter().zip(&next).map(|(a, b)| ratio * (a - b)).collect()];
    for m in 2..=m_count {
        let prev = moved(m, u.slab(m - 1), false);
        out.push(prev.iter().zip(u.slab(m)).map(|(a, b)| a - b).collect());
    }
    Ok(out)
}

/// Bubble coefficients of the patch-quadratic reconstruction: on each element
/// the quadratic through a patch of three consecutive nodes minus the linear
/// interpolant, at the element midpoint. Interior elements average their two
/// patches.
pub fn reconstruct_space(values: &[f64], mesh: &SpaceMesh) -> Result<Vec<f64>> {
    let n_el = mesh.num_elements();
    if n_el < 2 {
        return Err(Error::InsufficientData(
            "space reconstruction needs at least 2 elements".into(),
        ));
    }
    if values.len() != mesh.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} nodes",
            values.len(),
            mesh.num_nodes()
        )));
    }
    let x = mesh.nodes();
    // second divided difference of the patch centred at node i
    let curvature: Vec<f64> = (1..n_el)
        .map(|i| {
            let left = (values[i] - values[i - 1]) / (x[i] - x[i - 1]);
            let right = (values[i + 1] - values[i]) / (x[i + 1] - x[i]);
            (right - left) / (x[i + 1] - x[i - 1])
        })
        .collect();
    Ok((0..n_el)
        .map(|e| {
            let d2 = match e {
                0 => curvature[0],
                e if e == n_el - 1 => curvature[e - 1],
                e => 0.5 * (curvature[e - 1] + curvature[e]),
            };
            // q - l at the midpoint = d2 (mid - x_e)(mid - x_{e+1})
            -d2 * mesh.h(e).powi(2) / 4.0
        })
        .collect())
}

fn space_test(disc: &Discretization, y: &DgTrajectory) -> Result<StateTest> {
    let grid = disc.grid();
    Ok(StateTest {
        slabs: (0..=grid.num_slabs())
            .map(|m| {
                let mesh = grid.mesh(m);
                let b = reconstruct_space(y.slab(m), mesh)?;
                Ok(SlabTest::constant(Enriched::bubbles(mesh.num_nodes(), b)))
            })
            .collect::<Result<_>>()?,
    })
}

fn space_control_test(disc: &Discretization, u: &ControlTrajectory) -> Result<ControlTest> {
    let grid = disc.grid();
    Ok(ControlTest {
        slabs: (1..=grid.num_slabs())
            .map(|m| match u.kind() {
                ControlKind::NeumannBoundary => Ok(Enriched::zeros(2)),
                ControlKind::Distributed => {
                    let mesh = grid.mesh(m);
                    Ok(Enriched::bubbles(mesh.num_nodes(), reconstruct_space(u.slab(m), mesh)?))
                }
            })
            .collect::<Result<_>>()?,
    })
}

fn time_test(disc: &Discretization, y: &DgTrajectory, constrained: bool) -> Result<StateTest> {
    let w = reconstruct_time(disc, y, constrained)?;
    Ok(StateTest {
        slabs: w
            .into_iter()
            .enumerate()
            .map(|(m, w)| {
                if m == 0 {
                    SlabTest::constant(Enriched::nodal(w))
                } else {
                    SlabTest::ramp(Enriched::nodal(w))
                }
            })
            .collect(),
    })
}

fn time_control_test(disc: &Discretization, u: &ControlTrajectory) -> Result<ControlTest> {
    Ok(ControlTest {
        slabs: reconstruct_time_control(disc, u)?
            .into_iter()
            .map(|w| Enriched::nodal(w).scaled(0.5))
            .collect(),
    })
}

fn p1(v: &[f64], e: usize, s: f64) -> f64 {
    v[e] * (1.0 - s) + v[e + 1] * s
}

fn p1_slope(v: &[f64], e: usize, h: f64) -> f64 {
    (v[e + 1] - v[e]) / h
}

/// `out[e] += ∫_e f(e, s)` on `mesh`.
fn integrate(mesh: &SpaceMesh, out: &mut [f64], f: impl Fn(usize, f64, f64) -> f64) {
    for (e, slot) in out.iter_mut().enumerate() {
        let h = mesh.h(e);
        *slot += h * GAUSS3.iter().map(|&(s, w)| w * f(e, s, h)).sum::<f64>();
    }
}

/// `out[e] += ∫_e φ g` with `φ` enriched on `test` and `g` P1 on `other`,
/// integrated over the common refinement.
fn integrate_cross(
    test: &SpaceMesh,
    other: &SpaceMesh,
    overlay: &Overlay,
    test_is_a: bool,
    out: &mut [f64],
    phi: &Enriched,
    g: &[f64],
    scale: f64,
) {
    let (et, eo) = if test_is_a {
        (&overlay.elem_a, &overlay.elem_b)
    } else {
        (&overlay.elem_b, &overlay.elem_a)
    };
    for i in 0..overlay.num_intervals() {
        let (x0, x1) = (overlay.nodes[i], overlay.nodes[i + 1]);
        let (e, o) = (et[i], eo[i]);
        let (ta, th) = (test.nodes()[e], test.h(e));
        let (oa, oh) = (other.nodes()[o], other.h(o));
        let sum: f64 = GAUSS3
            .iter()
            .map(|&(s, w)| {
                let x = x0 + s * (x1 - x0);
                w * phi.value(e, (x - ta) / th) * p1(g, o, (x - oa) / oh)
            })
            .sum();
        out[e] += scale * (x1 - x0) * sum;
    }
}

/// Pointwise integrands of the spatial operator.
#[derive(Clone, Copy)]
struct Operator {
    dynamics: Dynamics,
}

impl Operator {
    /// `a(x) φ`.
    fn value(self, x: f64, xs: f64, phi: f64, phis: f64) -> f64 {
        match self.dynamics {
            Dynamics::Linear { nu, s } => nu * xs * phis - s * x * phi,
            Dynamics::Quasilinear { c, d } => (c * x * x + d) * xs * phis,
        }
    }

    /// `a'(x)[w] φ`.
    fn linear(self, x: f64, xs: f64, w: f64, ws: f64, phi: f64, phis: f64) -> f64 {
        match self.dynamics {
            Dynamics::Linear { nu, s } => nu * ws * phis - s * w * phi,
            Dynamics::Quasilinear { c, d } => ((c * x * x + d) * ws + 2.0 * c * x * w * xs) * phis,
        }
    }

    /// `a''(x)[v, φ] λ`.
    fn second(self, x: f64, xs: f64, v: f64, vs: f64, phi: f64, phis: f64, ls: f64) -> f64 {
        match self.dynamics {
            Dynamics::Linear { .. } => 0.0,
            Dynamics::Quasilinear { c, .. } => 2.0 * c * (xs * v * phi + x * v * phis + x * vs * phi) * ls,
        }
    }
}

/// `⟨y_m, φ⟩` pairings against the neighbouring slab: `sign ∫ y_n φ` on mesh `m`.
fn pair_slab(disc: &Discretization, m: usize, n: usize, out: &mut [f64], phi: &Enriched, y: &[f64], sign: f64) {
    let grid = disc.grid();
    let test = grid.mesh(m);
    if n == m {
        integrate(test, out, |e, s, _| sign * phi.value(e, s) * p1(y, e, s));
    } else if n + 1 == m {
        integrate_cross(test, grid.mesh(n), disc.overlay(n), false, out, phi, y, sign);
    } else {
        debug_assert_eq!(n, m + 1);
        integrate_cross(test, grid.mesh(n), disc.overlay(m), true, out, phi, y, sign);
    }
}

fn check_state(disc: &Discretization, t: &StateTest) -> Result<()> {
    let grid = disc.grid();
    if t.slabs.len() != grid.num_slabs() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "state test has {} slabs, grid has {}",
            t.slabs.len(),
            grid.num_slabs() + 1
        )));
    }
    for (m, st) in t.slabs.iter().enumerate() {
        let mesh = grid.mesh(m);
        for phi in [&st.start, &st.mean, &st.end] {
            if phi.nodal.len() != mesh.num_nodes()
                || !(phi.bubble.is_empty() || phi.bubble.len() == mesh.num_elements())
            {
                return Err(Error::ShapeMismatch(format!("state test on slab {m}")));
            }
        }
    }
    Ok(())
}

fn check_control(disc: &Discretization, t: &ControlTest) -> Result<()> {
    if t.slabs.len() != disc.num_slabs() {
        return Err(Error::ShapeMismatch(format!(
            "control test has {} slabs, grid has {}",
            t.slabs.len(),
            disc.num_slabs()
        )));
    }
    for (i, phi) in t.slabs.iter().enumerate() {
        let m = i + 1;
        let mesh = disc.grid().mesh(m);
        let ok = match disc.spec().control {
            ControlKind::Distributed => {
                phi.nodal.len() == mesh.num_nodes()
                    && (phi.bubble.is_empty() || phi.bubble.len() == mesh.num_elements())
            }
            ControlKind::NeumannBoundary => phi.nodal.len() == 2 && phi.bubble.is_empty(),
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!("control test on slab {m}")));
        }
    }
    Ok(())
}

/// Evaluator of the forms at a fixed discrete solution.
struct Forms<'a> {
    disc: &'a Discretization,
    base: &'a KktSolution,
    op: Operator,
}

impl<'a> Forms<'a> {
    fn new(disc: &'a Discretization, base: &'a KktSolution) -> Self {
        Self {
            disc,
            base,
            op: Operator {
                dynamics: disc.spec().dynamics,
            },
        }
    }

    /// `⟨B c, φ⟩` on slab `m`, subtracted with factor `scale`.
    fn control_load(&self, m: usize, out: &mut [f64], phi: &Enriched, c: &[f64], scale: f64) {
        let mesh = self.disc.grid().mesh(m);
        match self.disc.spec().control {
            ControlKind::Distributed => integrate(mesh, out, |e, s, _| scale * p1(c, e, s) * phi.value(e, s)),
            ControlKind::NeumannBoundary => {
                let last = mesh.num_elements() - 1;
                out[0] += scale * c[0] * phi.nodal[0];
                out[last] += scale * c[1] * phi.nodal[mesh.num_nodes() - 1];
            }
        }
    }

    /// State residual `L_λ(φ)` at `(y, c) = (x, u)` when `nonlinear`, else its
    /// linearization at `x` in direction `(y, c)`.
    fn state_like(&self, y: &DgTrajectory, c: &ControlTrajectory, nonlinear: bool, test: &StateTest) -> Localized {
        let disc = self.disc;
        let grid = disc.grid();
        let x = &self.base.x;
        let mut out = Localized::zeros(disc);
        // initial slab
        let phi0 = &test.slabs[0].end;
        if !phi0.is_zero() {
            let slot = &mut out.slabs[0];
            pair_slab(disc, 0, 0, slot, phi0, y.slab(0), 1.0);
            if nonlinear {
                subtract_initial(disc, slot, phi0);
            }
        }
        for m in 1..=grid.num_slabs() {
            let st = &test.slabs[m];
            let slot = &mut out.slabs[m];
            let k = disc.k(m);
            let mesh = grid.mesh(m);
            if !st.start.is_zero() {
                pair_slab(disc, m, m, slot, &st.start, y.slab(m), 1.0);
                pair_slab(disc, m, m - 1, slot, &st.start, y.slab(m - 1), -1.0);
            }
            let phi = &st.mean;
            if phi.is_zero() {
                continue;
            }
            let (xm, ym) = (x.slab(m), y.slab(m));
            let op = self.op;
            let f = disc.spec().f;
            if nonlinear {
                integrate(mesh, slot, |e, s, h| {
                    k * (op.value(p1(ym, e, s), p1_slope(ym, e, h), phi.value(e, s), phi.slope(e, s, h))
                        - f * phi.value(e, s))
                });
            } else {
                integrate(mesh, slot, |e, s, h| {
                    k * op.linear(
                        p1(xm, e, s),
                        p1_slope(xm, e, h),
                        p1(ym, e, s),
                        p1_slope(ym, e, h),
                        phi.value(e, s),
                        phi.slope(e, s, h),
                    )
                });
            }
            self.control_load(m, slot, phi, c.slab(m), -k);
        }
        out
    }

    /// Adjoint-type residual `Σ ⟨φ_m^- - φ_{m-1}^-, η_m⟩ + k ⟨a'(x) φ, η⟩ + k (src, φ)`
    /// with `src_m = x_m - x_d` (plain adjoint) or `v_m + [m ∈ window] (x_m - x_d)`
    /// plus the second-derivative term (dual form).
    fn adjoint_like(
        &self,
        eta: &DgTrajectory,
        dual: Option<(&DgTrajectory, std::ops::RangeInclusive<usize>, HessianMode)>,
        test: &StateTest,
    ) -> Localized {
        let disc = self.disc;
        let grid = disc.grid();
        let x = &self.base.x;
        let lam = &self.base.lam;
        let m_count = grid.num_slabs();
        let mut out = Localized::zeros(disc);
        let phi0 = &test.slabs[0].end;
        if !phi0.is_zero() {
            pair_slab(disc, 0, 0, &mut out.slabs[0], phi0, eta.slab(0), 1.0);
            pair_slab(disc, 0, 1, &mut out.slabs[0], phi0, eta.slab(1), -1.0);
        }
        for m in 1..=m_count {
            let st = &test.slabs[m];
            let slot = &mut out.slabs[m];
            if !st.end.is_zero() {
                pair_slab(disc, m, m, slot, &st.end, eta.slab(m), 1.0);
                if m < m_count {
                    pair_slab(disc, m, m + 1, slot, &st.end, eta.slab(m + 1), -1.0);
                }
            }
            let phi = &st.mean;
            if phi.is_zero() {
                continue;
            }
            let k = disc.k(m);
            let mesh = grid.mesh(m);
            let (xm, em, xd, lm) = (x.slab(m), eta.slab(m), disc.reference(m), lam.slab(m));
            let op = self.op;
            let (v, tracking, second) = match &dual {
                None => (None, true, false),
                Some((v, window, mode)) => (Some(v.slab(m)), window.contains(&m), *mode == HessianMode::Exact),
            };
            integrate(mesh, slot, |e, s, h| {
                let (xv, xs) = (p1(xm, e, s), p1_slope(xm, e, h));
                let (pv, ps) = (phi.value(e, s), phi.slope(e, s, h));
                let mut src = 0.0;
                if tracking {
                    src += xv - p1(xd, e, s);
                }
                let mut acc = op.linear(xv, xs, pv, ps, p1(em, e, s), p1_slope(em, e, h));
                if let Some(v) = v {
                    src += p1(v, e, s);
                    if second {
                        acc += op.second(xv, xs, p1(v, e, s), p1_slope(v, e, h), pv, ps, p1_slope(lm, e, h));
                    }
                }
                k * (acc + src * pv)
            });
        }
        out
    }

    /// `Σ k (α (c + [m ∈ window] u) - B* η, ψ)`.
    fn control_like(
        &self,
        c: &ControlTrajectory,
        eta: &DgTrajectory,
        window: Option<std::ops::RangeInclusive<usize>>,
        test: &ControlTest,
    ) -> Localized {
        let disc = self.disc;
        let grid = disc.grid();
        let alpha = disc.spec().alpha;
        let u = &self.base.u;
        let mut out = Localized::zeros(disc);
        for m in 1..=grid.num_slabs() {
            let psi = &test.slabs[m - 1];
            if psi.is_zero() {
                continue;
            }
            let k = disc.k(m);
            let mesh = grid.mesh(m);
            let slot = &mut out.slabs[m];
            let with_u = window.as_ref().is_some_and(|w| w.contains(&m));
            let coeff: Vec<f64> = c
                .slab(m)
                .iter()
                .zip(u.slab(m))
                .map(|(a, b)| alpha * (a + if with_u { *b } else { 0.0 }))
                .collect();
            let em = eta.slab(m);
            match disc.spec().control {
                ControlKind::Distributed => integrate(mesh, slot, |e, s, _| {
                    k * (p1(&coeff, e, s) - p1(em, e, s)) * psi.value(e, s)
                }),
                ControlKind::NeumannBoundary => {
                    let last = mesh.num_elements() - 1;
                    slot[0] += k * (coeff[0] - em[0]) * psi.nodal[0];
                    slot[last] += k * (coeff[1] - em[mesh.num_nodes() - 1]) * psi.nodal[1];
                }
            }
        }
        out
    }
}

/// `out -= ∫ x_0 φ` for the exact initial state.
fn subtract_initial(disc: &Discretization, out: &mut [f64], phi: &Enriched) {
    let mesh = disc.grid().mesh(0);
    if let InitialState::Nodal { nodes, values } = &disc.spec().x0 {
        let source = SpaceMesh::new(nodes.clone()).expect("validated at discretization");
        let overlay = Overlay::new(mesh, &source).expect("validated at discretization");
        integrate_cross(mesh, &source, &overlay, true, out, phi, values, -1.0);
    }
}

fn qoi_window(disc: &Discretization, qoi: &Qoi) -> Result<std::ops::RangeInclusive<usize>> {
    let time = &disc.grid().time;
    window_slabs(time, 0.0, qoi.window_end(time.end()))
}

/// The first-order residuals `(ρ^λ(φ_v), ρ^u(ψ_q), ρ^x(φ_z))`.
pub fn residuals_primal(disc: &Discretization, base: &KktSolution, w: &PrimalWeights) -> Result<PrimalResiduals> {
    check_state(disc, &w.v)?;
    check_state(disc, &w.z)?;
    check_control(disc, &w.q)?;
    let forms = Forms::new(disc, base);
    Ok(PrimalResiduals {
        lambda: forms.adjoint_like(&base.lam, None, &w.v),
        u: forms.control_like(&base.u, &base.lam, None, &w.q),
        x: forms.state_like(&base.x, &base.u, true, &w.z),
    })
}

/// The second-order residuals `(ρ^z(φ_x), ρ^q(ψ_u), ρ^v(φ_λ))` including the
/// QOI derivatives.
pub fn residuals_dual(
    disc: &Discretization,
    base: &KktSolution,
    chi: &SecondarySolution,
    qoi: &Qoi,
    mode: HessianMode,
    w: &DualWeights,
) -> Result<DualResiduals> {
    check_state(disc, &w.x)?;
    check_state(disc, &w.lam)?;
    check_control(disc, &w.u)?;
    let window = qoi_window(disc, qoi)?;
    let mode = if disc.spec().dynamics.is_linear() {
        HessianMode::GaussNewton
    } else {
        mode
    };
    let forms = Forms::new(disc, base);
    Ok(DualResiduals {
        z: forms.adjoint_like(&chi.z, Some((&chi.v, window.clone(), mode)), &w.x),
        q: forms.control_like(&chi.q, &chi.z, Some(window), &w.u),
        v: forms.state_like(&chi.v, &chi.q, false, &w.lam),
    })
}

fn combine(disc: &Discretization, p: &PrimalResiduals, d: &DualResiduals) -> Localized {
    let mut sum = Localized::zeros(disc);
    for part in [&p.lambda, &p.u, &p.x, &d.z, &d.q, &d.v] {
        sum.add(part);
    }
    for v in sum.slabs.iter_mut().flatten() {
        *v *= 0.5;
    }
    sum
}

/// Elementwise `k/2 (‖x_m - x_d‖² - ‖x_m - Π x_d‖²)` on the QOI window: the
/// change of the tracking term when the nodal interpolant of the reference is
/// replaced by the reference itself.
pub fn data_oscillation(disc: &Discretization, x: &DgTrajectory, qoi: &Qoi) -> Result<Vec<Vec<f64>>> {
    const SUB: usize = 4;
    let grid = disc.grid();
    let window = qoi_window(disc, qoi)?;
    let spec = disc.spec();
    let mut out: Vec<Vec<f64>> = (0..=grid.num_slabs())
        .map(|m| vec![0.0; grid.mesh(m).num_elements()])
        .collect();
    for m in window {
        let mesh = grid.mesh(m);
        let (xm, xd) = (x.slab(m), disc.reference(m));
        let t = grid.time.t(m);
        let k = disc.k(m);
        for (e, slot) in out[m].iter_mut().enumerate() {
            let (a, h) = (mesh.nodes()[e], mesh.h(e));
            let mut acc = 0.0;
            // composite rule: the reference varies on a finer scale than the mesh
            for j in 0..SUB {
                for &(s, w) in &GAUSS3 {
                    let s = (j as f64 + s) / SUB as f64;
                    let xv = p1(xm, e, s);
                    let exact = spec.reference_at(t, a + s * h);
                    let nodal = p1(xd, e, s);
                    acc += w / SUB as f64 * ((xv - exact).powi(2) - (xv - nodal).powi(2));
                }
            }
            *slot += 0.5 * k * h * acc;
        }
    }
    Ok(out)
}

/// Time and space error indicators for the QOI.
pub fn estimate(
    disc: &Discretization,
    base: &KktSolution,
    chi: &SecondarySolution,
    qoi: &Qoi,
    mode: HessianMode,
) -> Result<Indicators> {
    let constrained = disc.spec().control == ControlKind::Distributed;
    let time_primal = PrimalWeights {
        v: time_test(disc, &chi.v, constrained)?,
        q: time_control_test(disc, &chi.q)?,
        z: time_test(disc, &chi.z, constrained)?,
    };
    let time_dual = DualWeights {
        x: time_test(disc, &base.x, constrained)?,
        u: time_control_test(disc, &base.u)?,
        lam: time_test(disc, &base.lam, constrained)?,
    };
    let k_loc = combine(
        disc,
        &residuals_primal(disc, base, &time_primal)?,
        &residuals_dual(disc, base, chi, qoi, mode, &time_dual)?,
    );
    let space_primal = PrimalWeights {
        v: space_test(disc, &chi.v)?,
        q: space_control_test(disc, &chi.q)?,
        z: space_test(disc, &chi.z)?,
    };
    let space_dual = DualWeights {
        x: space_test(disc, &base.x)?,
        u: space_control_test(disc, &base.u)?,
        lam: space_test(disc, &base.lam)?,
    };
    let h_loc = combine(
        disc,
        &residuals_primal(disc, base, &space_primal)?,
        &residuals_dual(disc, base, chi, qoi, mode, &space_dual)?,
    );
    let mut space = h_loc.slabs;
    for (slot, d) in space.iter_mut().zip(data_oscillation(disc, &base.x, qoi)?) {
        for (a, b) in slot.iter_mut().zip(d) {
            *a += b;
        }
    }
    let mut time: Vec<f64> = k_loc.slab_totals().split_off(1);
    time[0] += k_loc.slab_totals()[0];
    Ok(Indicators::from_parts(time, space))
}
