//! Time partitions, 1D spatial meshes, and transfer between meshes.
//!
//! Every time slab carries its own mesh. Meshes of neighbouring slabs are
//! reconciled through their common refinement (the union of node sets), on
//! which products of P1 functions from both meshes are again piecewise
//! linear and can be integrated exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance under which two node coordinates are the same node.
const NODE_TOL: f64 = 1e-12;

fn same_point(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= NODE_TOL * scale.max(1.0)
}

/// Partition `0 = t_0 < t_1 < ... < t_M = T`, with optional protected points
/// that refinement must keep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    protected: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("a time grid needs at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "time grid must start at 0, got {}",
                points[0]
            )));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid(
                "time points must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            points,
            protected: Vec::new(),
        })
    }

    /// `n` equal slabs on `[0, t_end]`.
    pub fn uniform(t_end: f64, n: usize) -> Result<Self> {
        if n == 0 || !(t_end > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "uniform time grid needs n >= 1 and T > 0 (n = {n}, T = {t_end})"
            )));
        }
        let mut points: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        points[n] = t_end;
        Self::new(points)
    }

    /// Inserts `tau` (if not already a grid point) and marks it protected.
    pub fn with_protected(mut self, tau: f64) -> Result<Self> {
        let t_end = self.end();
        if !(tau > 0.0 && tau <= t_end) {
            return Err(Error::InvalidParameter(format!(
                "protected time {tau} outside (0, {t_end}]"
            )));
        }
        match self.find_point(tau) {
            Some(i) => {
                let exact = self.points[i];
                self.protected.push(exact);
            }
            None => {
                let pos = self.points.partition_point(|t| *t < tau);
                self.points.insert(pos, tau);
                self.protected.push(tau);
            }
        }
        Ok(self)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn protected(&self) -> &[f64] {
        &self.protected
    }

    /// Number of slabs `M`.
    pub fn num_slabs(&self) -> usize {
        self.points.len() - 1
    }

    pub fn end(&self) -> f64 {
        *self.points.last().expect("non-empty")
    }

    /// Right endpoint `t_m` of slab `m` (also valid for `m = 0`).
    pub fn t(&self, m: usize) -> f64 {
        self.points[m]
    }

    /// Length `k_m` of slab `m`, `1 <= m <= M`.
    pub fn k(&self, m: usize) -> f64 {
        self.points[m] - self.points[m - 1]
    }

    /// Index `i` with `t_i == t` up to round-off.
    pub fn find_point(&self, t: f64) -> Option<usize> {
        let scale = self.end();
        let pos = self.points.partition_point(|p| *p < t);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .find(|&i| i < self.points.len() && same_point(self.points[i], t, scale))
    }

    /// Slab `m` (1-based) with `t_{m-1} < t <= t_m`; `t = 0` maps to slab 1.
    pub fn slab_containing(&self, t: f64) -> usize {
        let pos = self.points.partition_point(|p| *p < t);
        pos.clamp(1, self.num_slabs())
    }

    /// Bisects every marked slab (1-based indices).
    pub fn refine(&self, marks: &BTreeSet<usize>) -> Result<Self> {
        let m_count = self.num_slabs();
        if let Some(&bad) = marks.iter().find(|&&m| m == 0 || m > m_count) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: m_count,
            });
        }
        let mut points = Vec::with_capacity(self.points.len() + marks.len());
        points.push(self.points[0]);
        for m in 1..=m_count {
            if marks.contains(&m) {
                points.push(0.5 * (self.points[m - 1] + self.points[m]));
            }
            points.push(self.points[m]);
        }
        let mut refined = Self::new(points)?;
        refined.protected = self.protected.clone();
        Ok(refined)
    }
}

/// Strictly increasing nodes on `[0, L]` with a refinement level per element.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceMesh {
    nodes: Vec<f64>,
    levels: Vec<u32>,
}

impl SpaceMesh {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        let levels = vec![0; nodes.len().saturating_sub(1)];
        Self::with_levels(nodes, levels)
    }

    pub fn with_levels(nodes: Vec<f64>, levels: Vec<u32>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("a mesh needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("mesh must start at 0, got {}", nodes[0])));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid(
                "mesh nodes must be finite and strictly increasing".into(),
            ));
        }
        if levels.len() != nodes.len() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} levels for {} elements",
                levels.len(),
                nodes.len() - 1
            )));
        }
        Ok(Self { nodes, levels })
    }

    /// `n` equal elements on `[0, length]`.
    pub fn uniform(length: f64, n: usize) -> Result<Self> {
        if n == 0 || !(length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "uniform mesh needs n >= 1 and L > 0 (n = {n}, L = {length})"
            )));
        }
        let mut nodes: Vec<f64> = (0..=n).map(|i| length * i as f64 / n as f64).collect();
        nodes[n] = length;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn length(&self) -> f64 {
        *self.nodes.last().expect("non-empty")
    }

    /// Length of element `e`.
    pub fn h(&self, e: usize) -> f64 {
        self.nodes[e + 1] - self.nodes[e]
    }

    pub fn midpoint(&self, e: usize) -> f64 {
        0.5 * (self.nodes[e] + self.nodes[e + 1])
    }

    /// Element containing `w`; points on a node map to the element on its left
    /// (the first element for `w = 0`).
    pub fn locate(&self, w: f64) -> usize {
        let pos = self.nodes.partition_point(|x| *x < w);
        pos.clamp(1, self.num_elements()) - 1
    }

    /// Evaluates the P1 function with nodal `values` at `w`.
    pub fn eval(&self, values: &[f64], w: f64) -> f64 {
        let e = self.locate(w);
        self.eval_in(values, e, w)
    }

    /// Evaluates on element `e` (linear extension outside it).
    pub fn eval_in(&self, values: &[f64], e: usize, w: f64) -> f64 {
        let (a, b) = (self.nodes[e], self.nodes[e + 1]);
        let s = (w - a) / (b - a);
        values[e] * (1.0 - s) + values[e + 1] * s
    }

    /// Bisects the marked elements (0-based).
    pub fn refine(&self, marks: &BTreeSet<usize>) -> Result<Self> {
        let n_el = self.num_elements();
        if let Some(&bad) = marks.iter().find(|&&e| e >= n_el) {
            return Err(Error::IndexOutOfRange { index: bad, len: n_el });
        }
        let mut nodes = Vec::with_capacity(self.nodes.len() + marks.len());
        let mut levels = Vec::with_capacity(n_el + marks.len());
        nodes.push(self.nodes[0]);
        for e in 0..n_el {
            if marks.contains(&e) {
                nodes.push(self.midpoint(e));
                levels.push(self.levels[e] + 1);
                levels.push(self.levels[e] + 1);
            } else {
                levels.push(self.levels[e]);
            }
            nodes.push(self.nodes[e + 1]);
        }
        Self::with_levels(nodes, levels)
    }

    /// Bisects every element `n` times.
    pub fn uniform_refine(&self, n: usize) -> Self {
        let mut mesh = self.clone();
        for _ in 0..n {
            let all: BTreeSet<usize> = (0..mesh.num_elements()).collect();
            mesh = mesh.refine(&all).expect("all indices valid");
        }
        mesh
    }

    /// True if every node of `self` is a node of `other`.
    pub fn is_nested_in(&self, other: &SpaceMesh) -> bool {
        let scale = self.length();
        let mut j = 0;
        for &x in &self.nodes {
            while j < other.nodes.len() && other.nodes[j] < x && !same_point(other.nodes[j], x, scale) {
                j += 1;
            }
            if j == other.nodes.len() || !same_point(other.nodes[j], x, scale) {
                return false;
            }
        }
        true
    }
}

fn check_domains(a: &SpaceMesh, b: &SpaceMesh) -> Result<()> {
    if !same_point(a.length(), b.length(), a.length()) {
        return Err(Error::DomainMismatch {
            left: a.length(),
            right: b.length(),
        });
    }
    Ok(())
}

/// Union of the node sets of `a` and `b`.
pub fn common_refinement(a: &SpaceMesh, b: &SpaceMesh) -> Result<SpaceMesh> {
    Ok(Overlay::new(a, b)?.into_mesh())
}

/// Interpolates the P1 function `values` on `from` at the nodes of `to`.
/// Requires `to` to contain every node of `from`, so the result represents the
/// same function exactly.
pub fn prolong(values: &[f64], from: &SpaceMesh, to: &SpaceMesh) -> Result<Vec<f64>> {
    check_domains(from, to)?;
    if values.len() != from.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} nodes",
            values.len(),
            from.num_nodes()
        )));
    }
    if !from.is_nested_in(to) {
        return Err(Error::NotARefinement);
    }
    Ok(interpolate(values, from, to))
}

/// Nodal interpolation of a P1 function onto an arbitrary mesh of the same domain.
pub fn interpolate(values: &[f64], from: &SpaceMesh, to: &SpaceMesh) -> Vec<f64> {
    let mut e = 0;
    to.nodes
        .iter()
        .map(|&w| {
            while e + 1 < from.num_elements() && from.nodes[e + 1] < w {
                e += 1;
            }
            from.eval_in(values, e, w)
        })
        .collect()
}

/// Common refinement of two meshes together with, for every sub-interval,
/// the element of each parent mesh that contains it.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub nodes: Vec<f64>,
    pub elem_a: Vec<usize>,
    pub elem_b: Vec<usize>,
    levels: Vec<u32>,
}

impl Overlay {
    pub fn new(a: &SpaceMesh, b: &SpaceMesh) -> Result<Self> {
        check_domains(a, b)?;
        let scale = a.length();
        let (na, nb) = (a.nodes(), b.nodes());
        let mut nodes = vec![0.0];
        let mut elem_a = Vec::new();
        let mut elem_b = Vec::new();
        let mut levels = Vec::new();
        let (mut i, mut j) = (1, 1);
        while i < na.len() || j < nb.len() {
            let (xa, xb) = (
                na.get(i).copied().unwrap_or(f64::INFINITY),
                nb.get(j).copied().unwrap_or(f64::INFINITY),
            );
            let next = if same_point(xa, xb, scale) { xa } else { xa.min(xb) };
            elem_a.push(i - 1);
            elem_b.push(j - 1);
            levels.push(a.levels[i - 1].max(b.levels[j - 1]));
            if same_point(xa, next, scale) {
                i += 1;
            }
            if same_point(xb, next, scale) {
                j += 1;
            }
            nodes.push(next);
        }
        *nodes.last_mut().expect("non-empty") = a.length();
        Ok(Self {
            nodes,
            elem_a,
            elem_b,
            levels,
        })
    }

    pub fn num_intervals(&self) -> usize {
        self.elem_a.len()
    }

    pub fn into_mesh(self) -> SpaceMesh {
        SpaceMesh::with_levels(self.nodes, self.levels).expect("union of valid meshes")
    }

    pub fn mesh(&self) -> SpaceMesh {
        SpaceMesh::with_levels(self.nodes.clone(), self.levels.clone()).expect("union of valid meshes")
    }

    /// `out_i = ∫ φ^a_i g` for `g` the P1 function `vb` on mesh `b`
    /// (the cross-mesh mass matrix `M_ab` applied to `vb`).
    pub fn mass_apply_b_to_a(&self, a: &SpaceMesh, b: &SpaceMesh, vb: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.num_nodes()];
        for s in 0..self.num_intervals() {
            let (x0, x1) = (self.nodes[s], self.nodes[s + 1]);
            let h = x1 - x0;
            let (ea, eb) = (self.elem_a[s], self.elem_b[s]);
            let g0 = b.eval_in(vb, eb, x0);
            let g1 = b.eval_in(vb, eb, x1);
            let (a0, a1) = (a.nodes[ea], a.nodes[ea + 1]);
            let ha = a1 - a0;
            // values of the two local hats of `a` at the sub-interval ends
            let left = [(a1 - x0) / ha, (a1 - x1) / ha];
            let right = [(x0 - a0) / ha, (x1 - a0) / ha];
            let lump = |p: [f64; 2]| h / 6.0 * (p[0] * (2.0 * g0 + g1) + p[1] * (g0 + 2.0 * g1));
            out[ea] += lump(left);
            out[ea + 1] += lump(right);
        }
        out
    }

    /// Transposed action: `out_j = ∫ φ^b_j g` for `g` the P1 function `va` on mesh `a`.
    pub fn mass_apply_a_to_b(&self, a: &SpaceMesh, b: &SpaceMesh, va: &[f64]) -> Vec<f64> {
        let swapped = Overlay {
            nodes: self.nodes.clone(),
            elem_a: self.elem_b.clone(),
            elem_b: self.elem_a.clone(),
            levels: self.levels.clone(),
        };
        swapped.mass_apply_b_to_a(b, a, va)
    }
}

/// A time grid plus one spatial mesh per slab; `meshes[0]` carries the
/// initial value and `meshes[m]` slab `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub time: TimeGrid,
    pub meshes: Vec<SpaceMesh>,
}

impl SpaceTimeGrid {
    pub fn new(time: TimeGrid, meshes: Vec<SpaceMesh>) -> Result<Self> {
        if meshes.len() != time.num_slabs() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} meshes for {} slabs (need M + 1)",
                meshes.len(),
                time.num_slabs()
            )));
        }
        let length = meshes[0].length();
        for mesh in &meshes[1..] {
            check_domains(&meshes[0], mesh)?;
            let _ = length;
        }
        Ok(Self { time, meshes })
    }

    /// Same mesh on every slab.
    pub fn uniform(time: TimeGrid, mesh: SpaceMesh) -> Self {
        let meshes = vec![mesh; time.num_slabs() + 1];
        Self { time, meshes }
    }

    pub fn num_slabs(&self) -> usize {
        self.time.num_slabs()
    }

    pub fn mesh(&self, m: usize) -> &SpaceMesh {
        &self.meshes[m]
    }

    pub fn length(&self) -> f64 {
        self.meshes[0].length()
    }

    pub fn time_points(&self) -> usize {
        self.time.points().len()
    }

    /// Total number of spatial nodes over the initial mesh and all slabs.
    pub fn space_dofs_total(&self) -> usize {
        self.meshes.iter().map(SpaceMesh::num_nodes).sum()
    }

    /// Bisects marked slabs; both halves inherit the parent's mesh.
    pub fn refine_time(&self, marks: &BTreeSet<usize>) -> Result<Self> {
        let time = self.time.refine(marks)?;
        let mut meshes = Vec::with_capacity(time.num_slabs() + 1);
        meshes.push(self.meshes[0].clone());
        for m in 1..=self.num_slabs() {
            if marks.contains(&m) {
                meshes.push(self.meshes[m].clone());
            }
            meshes.push(self.meshes[m].clone());
        }
        Self::new(time, meshes)
    }

    /// Bisects marked `(slab, element)` pairs; slab `0` is the initial mesh.
    pub fn refine_space(&self, marks: &BTreeSet<(usize, usize)>) -> Result<Self> {
        let mut meshes = self.meshes.clone();
        for (m, mesh) in meshes.iter_mut().enumerate() {
            let local: BTreeSet<usize> = marks.range((m, 0)..(m + 1, 0)).map(|&(_, e)| e).collect();
            if !local.is_empty() {
                *mesh = mesh.refine(&local)?;
            }
        }
        if let Some(&(m, _)) = marks.iter().find(|(m, _)| *m > self.num_slabs()) {
            return Err(Error::IndexOutOfRange {
                index: m,
                len: self.num_slabs() + 1,
            });
        }
        Self::new(self.time.clone(), meshes)
    }

    pub fn to_json_value(&self) -> GridJson {
        GridJson {
            time: self.time.points().to_vec(),
            meshes: self.meshes.iter().map(|m| m.nodes().to_vec()).collect(),
        }
    }

    pub fn from_json_value(json: &GridJson) -> Result<Self> {
        let time = TimeGrid::new(json.time.clone())?;
        let meshes = json
            .meshes
            .iter()
            .map(|n| SpaceMesh::new(n.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(time, meshes)
    }
}

/// Serialized form `{"time": [...], "meshes": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridJson {
    pub time: Vec<f64>,
    pub meshes: Vec<Vec<f64>>,
}
