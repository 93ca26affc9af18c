//! Problem definitions: dynamics, reference trajectories, cost and QOIs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, ControlKind};
use crate::grid::{SpaceMesh, TimeGrid};
use crate::trajectory::{ControlTrajectory, DgTrajectory};
use crate::tridiag::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    /// `x' = ν x'' + s x + B u + f`.
    Linear {
        #[serde(default = "default_nu")]
        nu: f64,
        #[serde(default)]
        s: f64,
    },
    /// `x' = ((c x² + d) x')' + B u + f`.
    Quasilinear { c: f64, d: f64 },
}

fn default_nu() -> f64 {
    0.1
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics::Linear { nu: 0.1, s: 0.0 }
    }
}

impl Dynamics {
    pub fn is_linear(&self) -> bool {
        matches!(self, Dynamics::Linear { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// `x_d ≡ 0`.
    Zero,
    /// Bump centred at the middle of the domain.
    #[default]
    Static,
    /// Bump whose centre travels as `1.5 - cos(π t / 10)`.
    Dynamic,
    /// Bump at the right endpoint growing like `e^{t/2}`.
    ExpIncreasing,
}

/// `10 exp(1 - 1/(1 - s²))` on `|s| < 1`, zero elsewhere.
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        10.0 * (1.0 - 1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

impl Reference {
    /// Value at absolute time `t` and coordinate `w`.
    pub fn eval(self, t: f64, w: f64) -> f64 {
        let scale = 10.0 / 3.0;
        match self {
            Reference::Zero => 0.0,
            Reference::Static => bump(scale * (w - 1.5).abs()),
            Reference::Dynamic => {
                let peak = 1.5 - (PI * t / 10.0).cos();
                bump(scale * (w - peak).abs())
            }
            Reference::ExpIncreasing => (t / 2.0).exp() * bump(scale * (w - 3.0).abs()),
        }
    }
}

/// Initial state `x_0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    #[default]
    Zero,
    /// Piecewise linear function through `(nodes[i], values[i])`.
    Nodal { nodes: Vec<f64>, values: Vec<f64> },
}

impl InitialState {
    /// Nodal interpolation onto `mesh`.
    pub fn interpolate(&self, mesh: &SpaceMesh) -> Result<Vec<f64>> {
        match self {
            InitialState::Zero => Ok(vec![0.0; mesh.num_nodes()]),
            InitialState::Nodal { nodes, values } => {
                if nodes.len() != values.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "initial state has {} nodes but {} values",
                        nodes.len(),
                        values.len()
                    )));
                }
                let source = SpaceMesh::new(nodes.clone())?;
                Ok(crate::grid::interpolate(values, &source, mesh))
            }
        }
    }
}

/// One optimal control problem on `[0, T] × [0, L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub length: f64,
    pub horizon: f64,
    pub dynamics: Dynamics,
    pub control: ControlKind,
    pub reference: Reference,
    pub alpha: f64,
    pub x0: InitialState,
    /// Constant source term.
    pub f: f64,
    /// Absolute time of the local time origin (nonzero inside an MPC loop).
    pub time_offset: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            length: 3.0,
            horizon: 10.0,
            dynamics: Dynamics::default(),
            control: ControlKind::Distributed,
            reference: Reference::Static,
            alpha: 1e-3,
            x0: InitialState::Zero,
            f: 0.0,
            time_offset: 0.0,
        }
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.horizon > 0.0) {
            return bad(format!("horizon T must be positive, got {}", self.horizon));
        }
        if !(self.length > 0.0) {
            return bad(format!("length L must be positive, got {}", self.length));
        }
        match self.dynamics {
            Dynamics::Linear { nu, s } => {
                if !(nu > 0.0) || !s.is_finite() {
                    return bad(format!("linear dynamics need nu > 0 and finite s (nu = {nu}, s = {s})"));
                }
            }
            Dynamics::Quasilinear { c, d } => {
                if !(d > 0.0) || !(c >= 0.0) {
                    return bad(format!("quasilinear dynamics need c >= 0 and d > 0 (c = {c}, d = {d})"));
                }
            }
        }
        if !self.f.is_finite() || !self.time_offset.is_finite() {
            return bad("source and time offset must be finite".into());
        }
        Ok(())
    }

    /// The same problem on the horizon starting `dt` later in absolute time.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            time_offset: self.time_offset + dt,
            ..self.clone()
        }
    }

    /// Reference at local time `t`.
    pub fn reference_at(&self, t: f64, w: f64) -> f64 {
        eval_reference(self, self.time_offset + t, w)
    }

    /// Nodal interpolant `Π x_d(t)` on `mesh` (local time).
    pub fn reference_nodal(&self, t: f64, mesh: &SpaceMesh) -> Vec<f64> {
        mesh.nodes().iter().map(|&w| self.reference_at(t, w)).collect()
    }
}

/// Reference of `spec` at absolute time `t`.
pub fn eval_reference(spec: &ProblemSpec, t: f64, w: f64) -> f64 {
    spec.reference.eval(t, w)
}

/// Quantity of interest.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Qoi {
    /// The full cost `J`.
    #[default]
    Full,
    /// The cost restricted to `[0, tau]`.
    Truncated { tau: f64 },
}

impl Qoi {
    /// Right end of the QOI window on a horizon of length `horizon`.
    pub fn window_end(&self, horizon: f64) -> f64 {
        match *self {
            Qoi::Full => horizon,
            Qoi::Truncated { tau } => tau,
        }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if let Qoi::Truncated { tau } = *self {
            if !(tau > 0.0 && tau <= horizon) {
                return Err(Error::InvalidParameter(format!(
                    "tau must lie in (0, {horizon}], got {tau}"
                )));
            }
        }
        Ok(())
    }
}

/// Slab range `lo..=hi` (1-based) covering `[a, b]`; empty when `a == b`.
pub fn window_slabs(time: &TimeGrid, a: f64, b: f64) -> Result<std::ops::RangeInclusive<usize>> {
    let not_aligned = || Error::WindowNotAligned { a, b };
    if !(a <= b) {
        return Err(not_aligned());
    }
    let ia = time.find_point(a).ok_or_else(not_aligned)?;
    let ib = time.find_point(b).ok_or_else(not_aligned)?;
    Ok(ia + 1..=ib)
}

/// Per-slab integrand `½ (‖x_m - Π x_d(t_m)‖² + α ‖u_m‖²_U)` (without `k_m`).
pub fn slab_cost(mesh: &SpaceMesh, x: &[f64], u: &[f64], t: f64, spec: &ProblemSpec) -> f64 {
    let mass = assemble_mass(mesh);
    let xd = spec.reference_nodal(t, mesh);
    let e: Vec<f64> = x.iter().zip(&xd).map(|(a, b)| a - b).collect();
    let tracking = dot(&mass.matvec(&e), &e);
    let control = match spec.control {
        ControlKind::Distributed => dot(&mass.matvec(u), u),
        ControlKind::NeumannBoundary => dot(u, u),
    };
    0.5 * (tracking + spec.alpha * control)
}

/// Box-rule cost over the slab-aligned window `[a, b]`.
pub fn eval_cost(traj: &DgTrajectory, u: &ControlTrajectory, spec: &ProblemSpec, window: (f64, f64)) -> Result<f64> {
    let grid = traj.grid();
    let range = window_slabs(&grid.time, window.0, window.1)?;
    Ok(range
        .map(|m| grid.time.k(m) * slab_cost(grid.mesh(m), traj.slab(m), u.slab(m), grid.time.t(m), spec))
        .sum())
}

pub fn eval_qoi(traj: &DgTrajectory, u: &ControlTrajectory, spec: &ProblemSpec, qoi: &Qoi) -> Result<f64> {
    let end = qoi.window_end(traj.grid().time.end());
    eval_cost(traj, u, spec, (0.0, end))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::grid::SpaceTimeGrid;

    #[test]
    fn bump_examples() {
        assert_eq!(bump(0.0), 10.0);
        assert_eq!(bump(1.0), 0.0);
        assert_eq!(bump(-3.0), 0.0);
        assert!((bump(0.5) - 10.0 * (-1.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((bump(0.5) - 7.1653).abs() < 1e-4);
        // continuity at the edge of the support
        for s in [0.9, 0.99, 0.999] {
            assert!(bump(s) < bump(s - 0.05));
        }
        assert!(bump(1.0 - 1e-3) < 1e-8);
        assert!(bump(-1.0 + 1e-3) < 1e-8);
    }

    #[test]
    fn reference_examples() {
        let spec = ProblemSpec::default();
        assert_eq!(eval_reference(&spec, 0.0, 1.5), 10.0);
        assert_eq!(eval_reference(&spec, 0.0, 0.0), 0.0);
        let dynamic = ProblemSpec {
            reference: Reference::Dynamic,
            ..ProblemSpec::default()
        };
        assert!((eval_reference(&dynamic, 0.0, 0.5) - 10.0).abs() < 1e-12);
        let exp = ProblemSpec {
            reference: Reference::ExpIncreasing,
            ..ProblemSpec::default()
        };
        assert!((eval_reference(&exp, 2.0, 3.0) - 27.1828).abs() < 1e-4);
        // shifted horizons read the reference at absolute time
        let shifted = exp.shifted(2.0);
        assert_eq!(shifted.reference_at(0.0, 3.0), eval_reference(&exp, 2.0, 3.0));
    }

    #[test]
    fn validation() {
        let mut spec = ProblemSpec::default();
        assert!(spec.validate().is_ok());
        spec.alpha = 0.0;
        assert!(spec.validate().is_err());
        let spec = ProblemSpec {
            dynamics: Dynamics::Quasilinear { c: 1.0, d: 0.0 },
            ..ProblemSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(Qoi::Truncated { tau: 12.0 }.validate(10.0).is_err());
        assert!(Qoi::Truncated { tau: 0.5 }.validate(10.0).is_ok());
    }

    fn one_slab() -> Arc<SpaceTimeGrid> {
        Arc::new(SpaceTimeGrid::uniform(
            TimeGrid::uniform(1.0, 1).unwrap(),
            SpaceMesh::uniform(3.0, 4).unwrap(),
        ))
    }

    #[test]
    fn cost_examples() {
        let grid = one_slab();
        let spec = ProblemSpec {
            reference: Reference::Zero,
            alpha: 2.0,
            ..ProblemSpec::default()
        };
        let x = DgTrajectory::zeros(grid.clone());
        let u = ControlTrajectory::constant(grid.clone(), ControlKind::Distributed, 1.0);
        assert!((eval_cost(&x, &u, &spec, (0.0, 1.0)).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(eval_cost(&x, &u, &spec, (0.0, 0.0)).unwrap(), 0.0);
        assert!(matches!(
            eval_cost(&x, &u, &spec, (0.0, 0.3)),
            Err(Error::WindowNotAligned { .. })
        ));

        // x equal to the interpolated reference, zero control
        let spec = ProblemSpec::default();
        let mut x = DgTrajectory::zeros(grid.clone());
        x.slab_mut(1).copy_from_slice(&spec.reference_nodal(1.0, grid.mesh(1)));
        let u = ControlTrajectory::zeros(grid.clone(), ControlKind::Distributed);
        assert_eq!(eval_cost(&x, &u, &spec, (0.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn qoi_windows_are_additive() {
        let grid = Arc::new(SpaceTimeGrid::uniform(
            TimeGrid::uniform(2.0, 4).unwrap(),
            SpaceMesh::uniform(3.0, 6).unwrap(),
        ));
        let spec = ProblemSpec::default();
        let mut x = DgTrajectory::zeros(grid.clone());
        for m in 1..=4 {
            x.slab_mut(m)
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i + m) as f64 * 0.3);
        }
        let u = ControlTrajectory::constant(grid.clone(), ControlKind::Distributed, 0.7);
        let full = eval_qoi(&x, &u, &spec, &Qoi::Full).unwrap();
        let as_trunc = eval_qoi(&x, &u, &spec, &Qoi::Truncated { tau: 2.0 }).unwrap();
        assert_eq!(full, as_trunc);
        let head = eval_qoi(&x, &u, &spec, &Qoi::Truncated { tau: 1.0 }).unwrap();
        let tail = eval_cost(&x, &u, &spec, (1.0, 2.0)).unwrap();
        assert!((head + tail - full).abs() <= 1e-14 * full);
        let shorter = eval_qoi(&x, &u, &spec, &Qoi::Truncated { tau: 0.5 }).unwrap();
        assert!(shorter <= head && head <= full);
        assert_eq!(
            eval_qoi(
                &DgTrajectory::zeros(grid.clone()),
                &ControlTrajectory::zeros(grid.clone(), ControlKind::Distributed),
                &ProblemSpec {
                    reference: Reference::Zero,
                    ..spec
                },
                &Qoi::Full
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ProblemSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(spec, ProblemSpec::default());
        let spec: ProblemSpec = serde_json::from_str(
            r#"{"dynamics": {"kind": "quasilinear", "c": 0.01, "d": 0.1},
                "control": "neumann_boundary", "reference": "exp_increasing"}"#,
        )
        .unwrap();
        assert_eq!(spec.dynamics, Dynamics::Quasilinear { c: 0.01, d: 0.1 });
        assert_eq!(spec.control, ControlKind::NeumannBoundary);
        let qoi: Qoi = serde_json::from_str(r#"{"kind": "truncated", "tau": 0.5}"#).unwrap();
        assert_eq!(qoi, Qoi::Truncated { tau: 0.5 });
    }
}
