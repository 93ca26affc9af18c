//! dG(0)cG(1) space-time functions and piecewise-constant controls.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, stiffness, ControlKind};
use crate::grid::{interpolate, Overlay, SpaceMesh, SpaceTimeGrid};
use crate::tridiag::dot;

/// Nodal values per slab on a [`SpaceTimeGrid`]: index 0 holds the initial
/// value `v_0^-` on mesh 0, index `m` the constant value on slab `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgTrajectory {
    grid: Arc<SpaceTimeGrid>,
    values: Vec<Vec<f64>>,
}

impl DgTrajectory {
    pub fn new(grid: Arc<SpaceTimeGrid>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.num_slabs() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} value vectors for {} slabs (need M + 1)",
                values.len(),
                grid.num_slabs()
            )));
        }
        for (m, v) in values.iter().enumerate() {
            if v.len() != grid.mesh(m).num_nodes() {
                return Err(Error::ShapeMismatch(format!(
                    "slab {m}: {} values for {} nodes",
                    v.len(),
                    grid.mesh(m).num_nodes()
                )));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<SpaceTimeGrid>) -> Self {
        let values = grid.meshes.iter().map(|m| vec![0.0; m.num_nodes()]).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }

    pub fn initial(&self) -> &[f64] {
        &self.values[0]
    }

    /// Value on slab `m` (`m = 0` gives the initial value).
    pub fn slab(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    pub fn slab_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.values[m]
    }

    /// Left limit `v_m^-` at `t_m`.
    pub fn value_minus(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    /// Right limit `v_m^+` at `t_m`, `m < M`.
    pub fn value_plus(&self, m: usize) -> &[f64] {
        &self.values[m + 1]
    }

    /// `[v]_m = v_m^+ - v_m^-` on the common refinement of meshes `m` and `m + 1`.
    pub fn jump(&self, m: usize) -> Result<(SpaceMesh, Vec<f64>)> {
        if m >= self.grid.num_slabs() {
            return Err(Error::IndexOutOfRange {
                index: m,
                len: self.grid.num_slabs(),
            });
        }
        let (a, b) = (self.grid.mesh(m), self.grid.mesh(m + 1));
        let common = Overlay::new(a, b)?.into_mesh();
        let minus = interpolate(&self.values[m], a, &common);
        let plus = interpolate(&self.values[m + 1], b, &common);
        let jump = plus.iter().zip(&minus).map(|(p, q)| p - q).collect();
        Ok((common, jump))
    }

    /// Re-samples onto `target`, whose time points must contain the source's.
    pub fn transfer(&self, target: Arc<SpaceTimeGrid>) -> Result<Self> {
        let parents = parent_slabs(&self.grid, &target)?;
        let mut values = Vec::with_capacity(target.num_slabs() + 1);
        values.push(interpolate(&self.values[0], self.grid.mesh(0), target.mesh(0)));
        for (m, &p) in parents.iter().enumerate() {
            values.push(interpolate(&self.values[p], self.grid.mesh(p), target.mesh(m + 1)));
        }
        Self::new(target, values)
    }

    /// Per-slab `‖v_m‖_{L2}` (if requested) plus `√coeff ‖∇v_m‖_{L2}`.
    pub fn l2v_norm(&self, weight: NormWeight) -> Vec<f64> {
        (1..=self.grid.num_slabs())
            .map(|m| {
                let mesh = self.grid.mesh(m);
                let v = &self.values[m];
                let mut norm = 0.0;
                if weight.l2_part {
                    norm += dot(&assemble_mass(mesh).matvec(v), v).max(0.0).sqrt();
                }
                if weight.grad_part_coeff > 0.0 {
                    let k = stiffness(mesh, 1.0).expect("unit coefficient");
                    norm += weight.grad_part_coeff.sqrt() * dot(&k.matvec(v), v).max(0.0).sqrt();
                }
                norm
            })
            .collect()
    }

    /// `⟨v_a, w_b⟩_{L2}` of slab values that may live on different meshes.
    pub fn cross_inner(&self, a: usize, other: &DgTrajectory, b: usize) -> Result<f64> {
        let (ma, mb) = (self.grid.mesh(a), other.grid.mesh(b));
        let overlay = Overlay::new(ma, mb)?;
        Ok(dot(
            &overlay.mass_apply_b_to_a(ma, mb, &other.values[b]),
            &self.values[a],
        ))
    }

    /// Both sides of the jump-energy identity
    /// `Σ_m ⟨[v]_{m-1}, v_{m-1}^+⟩ + ‖v_0^-‖² = Σ_m ½‖[v]_{m-1}‖² + ½(‖v_M^-‖² + ‖v_0^-‖²)`.
    pub fn jump_energy(&self) -> Result<(f64, f64)> {
        let m_count = self.grid.num_slabs();
        let sq = |m: usize| -> Result<f64> { self.cross_inner(m, self, m) };
        let mut lhs = sq(0)?;
        let mut rhs = 0.5 * (sq(m_count)? + sq(0)?);
        for m in 1..=m_count {
            let (common, jump) = self.jump(m - 1)?;
            let mass = assemble_mass(&common);
            let plus = interpolate(&self.values[m], self.grid.mesh(m), &common);
            lhs += dot(&mass.matvec(&jump), &plus);
            rhs += 0.5 * dot(&mass.matvec(&jump), &jump);
        }
        Ok((lhs, rhs))
    }
}

/// Which parts enter [`DgTrajectory::l2v_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormWeight {
    pub l2_part: bool,
    pub grad_part_coeff: f64,
}

impl NormWeight {
    pub const L2: NormWeight = NormWeight {
        l2_part: true,
        grad_part_coeff: 0.0,
    };
}

/// For every slab of `target`, the slab of `source` containing it.
fn parent_slabs(source: &SpaceTimeGrid, target: &SpaceTimeGrid) -> Result<Vec<usize>> {
    let not_refinement = || Error::InvalidGrid("target time grid does not refine the source time grid".into());
    if source
        .time
        .points()
        .iter()
        .any(|&t| target.time.find_point(t).is_none())
    {
        return Err(not_refinement());
    }
    Ok((1..=target.num_slabs())
        .map(|m| {
            let mid = 0.5 * (target.time.t(m - 1) + target.time.t(m));
            source.time.slab_containing(mid)
        })
        .collect())
}

/// Piecewise-constant-in-time control; slab `m` (1-based) holds nodal values on
/// mesh `m` (distributed) or the endpoint pair (boundary).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    grid: Arc<SpaceTimeGrid>,
    kind: ControlKind,
    slabs: Vec<Vec<f64>>,
}

impl ControlTrajectory {
    pub fn new(grid: Arc<SpaceTimeGrid>, kind: ControlKind, slabs: Vec<Vec<f64>>) -> Result<Self> {
        if slabs.len() != grid.num_slabs() {
            return Err(Error::ShapeMismatch(format!(
                "{} control slabs for {} time slabs",
                slabs.len(),
                grid.num_slabs()
            )));
        }
        for (i, u) in slabs.iter().enumerate() {
            let want = kind.dim(grid.mesh(i + 1));
            if u.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "control slab {}: {} coefficients, expected {want}",
                    i + 1,
                    u.len()
                )));
            }
        }
        Ok(Self { grid, kind, slabs })
    }

    pub fn zeros(grid: Arc<SpaceTimeGrid>, kind: ControlKind) -> Self {
        Self::constant(grid, kind, 0.0)
    }

    pub fn constant(grid: Arc<SpaceTimeGrid>, kind: ControlKind, value: f64) -> Self {
        let slabs = (1..=grid.num_slabs())
            .map(|m| vec![value; kind.dim(grid.mesh(m))])
            .collect();
        Self { grid, kind, slabs }
    }

    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn slabs(&self) -> &[Vec<f64>] {
        &self.slabs
    }

    pub fn slab(&self, m: usize) -> &[f64] {
        &self.slabs[m - 1]
    }

    pub fn slab_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.slabs[m - 1]
    }

    /// Re-samples onto `target`, whose time points must contain the source's.
    pub fn transfer(&self, target: Arc<SpaceTimeGrid>) -> Result<Self> {
        let parents = parent_slabs(&self.grid, &target)?;
        let slabs = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| match self.kind {
                ControlKind::Distributed => interpolate(&self.slabs[p - 1], self.grid.mesh(p), target.mesh(i + 1)),
                ControlKind::NeumannBoundary => self.slabs[p - 1].clone(),
            })
            .collect();
        Self::new(target, self.kind, slabs)
    }

    /// Per-slab `‖u_m‖_U`.
    pub fn norms(&self) -> Vec<f64> {
        self.slabs
            .iter()
            .enumerate()
            .map(|(i, u)| match self.kind {
                ControlKind::Distributed => dot(&assemble_mass(self.grid.mesh(i + 1)).matvec(u), u).max(0.0).sqrt(),
                ControlKind::NeumannBoundary => dot(u, u).sqrt(),
            })
            .collect()
    }

    /// All coefficients, slab by slab.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slabs.concat()
    }

    /// Inverse of [`Self::to_flat`] with the layout of `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut slabs = Vec::with_capacity(self.slabs.len());
        let mut at = 0;
        for s in &self.slabs {
            slabs.push(flat[at..at + s.len()].to_vec());
            at += s.len();
        }
        assert_eq!(at, flat.len(), "flat control length");
        Self {
            grid: self.grid.clone(),
            kind: self.kind,
            slabs,
        }
    }
}
