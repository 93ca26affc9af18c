//! P1 element assembly on a [`SpaceMesh`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpaceMesh;
use crate::tridiag::TriMatrix;

/// 3-point Gauss rule on the reference interval [0, 1]: (abscissa, weight).
pub const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

pub fn assemble_mass(mesh: &SpaceMesh) -> TriMatrix {
    let mut m = TriMatrix::zeros(mesh.num_nodes());
    for e in 0..mesh.num_elements() {
        let h = mesh.h(e);
        m.add_block(e, [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]]);
    }
    m
}

/// `K_ij = Σ_e coeff_e ∫_e φ_i' φ_j'`.
pub fn assemble_stiffness(mesh: &SpaceMesh, coeff: &[f64]) -> Result<TriMatrix> {
    if coeff.len() != mesh.num_elements() {
        return Err(Error::ShapeMismatch(format!(
            "{} coefficients for {} elements",
            coeff.len(),
            mesh.num_elements()
        )));
    }
    if let Some(c) = coeff.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "stiffness coefficient must be nonnegative, got {c}"
        )));
    }
    let mut k = TriMatrix::zeros(mesh.num_nodes());
    for (e, &c) in coeff.iter().enumerate() {
        let g = c / mesh.h(e);
        k.add_block(e, [[g, -g], [-g, g]]);
    }
    Ok(k)
}

/// Constant-coefficient stiffness.
pub fn stiffness(mesh: &SpaceMesh, coeff: f64) -> Result<TriMatrix> {
    assemble_stiffness(mesh, &vec![coeff; mesh.num_elements()])
}

/// `∫ f φ_i` for a constant source `f`.
pub fn load_vector(mesh: &SpaceMesh, f: f64) -> Vec<f64> {
    let mut b = vec![0.0; mesh.num_nodes()];
    for e in 0..mesh.num_elements() {
        let half = 0.5 * f * mesh.h(e);
        b[e] += half;
        b[e + 1] += half;
    }
    b
}

fn check_quasilinear(mesh: &SpaceMesh, xh: &[f64], c: f64, d: f64) -> Result<()> {
    if !(d > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "diffusion offset d must be positive, got {d}"
        )));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "diffusion coefficient c must be nonnegative, got {c}"
        )));
    }
    if xh.len() != mesh.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {} nodes",
            xh.len(),
            mesh.num_nodes()
        )));
    }
    Ok(())
}

/// `r_i = ∫ (c x² + d) x' φ_i'`.
pub fn assemble_quasilinear_residual(mesh: &SpaceMesh, xh: &[f64], c: f64, d: f64) -> Result<Vec<f64>> {
    check_quasilinear(mesh, xh, c, d)?;
    let mut r = vec![0.0; mesh.num_nodes()];
    for e in 0..mesh.num_elements() {
        let h = mesh.h(e);
        let slope = (xh[e + 1] - xh[e]) / h;
        let kappa_mean: f64 = GAUSS3
            .iter()
            .map(|&(s, w)| {
                let x = xh[e] * (1.0 - s) + xh[e + 1] * s;
                w * (c * x * x + d)
            })
            .sum();
        // ∫_e κ x' φ' with φ' = ∓1/h
        let flux = kappa_mean * slope;
        r[e] -= flux;
        r[e + 1] += flux;
    }
    Ok(r)
}

/// Jacobian of [`assemble_quasilinear_residual`]:
/// `J_ij = ∫ (κ(x) φ_j' + 2c x φ_j x') φ_i'`.
pub fn assemble_quasilinear_jacobian(mesh: &SpaceMesh, xh: &[f64], c: f64, d: f64) -> Result<TriMatrix> {
    check_quasilinear(mesh, xh, c, d)?;
    let mut jac = TriMatrix::zeros(mesh.num_nodes());
    for e in 0..mesh.num_elements() {
        let h = mesh.h(e);
        let slope = (xh[e + 1] - xh[e]) / h;
        let mut kappa = 0.0;
        let mut lin = [0.0; 2];
        for &(s, w) in &GAUSS3 {
            let x = xh[e] * (1.0 - s) + xh[e + 1] * s;
            kappa += w * (c * x * x + d);
            lin[0] += w * 2.0 * c * x * (1.0 - s);
            lin[1] += w * 2.0 * c * x * s;
        }
        // ∫_e (...) φ_i' = h * mean(...) * (±1/h)
        let a = kappa / h;
        let (l0, l1) = (lin[0] * slope, lin[1] * slope);
        jac.add_block(e, [[a - l0, -a - l1], [-a + l0, a + l1]]);
    }
    Ok(jac)
}

/// λ-weighted second derivative of the quasilinear residual in direction `dx`:
/// `out_j = Σ_i λ_i ∂²r_i/∂x_j∂x_k dx_k = ∫ 2c (x' dx φ_j + x dx φ_j' + x dx' φ_j) λ'`.
pub fn quasilinear_second_derivative(mesh: &SpaceMesh, xh: &[f64], dx: &[f64], lam: &[f64], c: f64) -> Vec<f64> {
    let mut out = vec![0.0; mesh.num_nodes()];
    if c == 0.0 {
        return out;
    }
    for e in 0..mesh.num_elements() {
        let h = mesh.h(e);
        let xs = (xh[e + 1] - xh[e]) / h;
        let ds = (dx[e + 1] - dx[e]) / h;
        let ls = (lam[e + 1] - lam[e]) / h;
        let mut acc = [0.0; 2];
        for &(s, w) in &GAUSS3 {
            let x = xh[e] * (1.0 - s) + xh[e + 1] * s;
            let d = dx[e] * (1.0 - s) + dx[e + 1] * s;
            let phi = [1.0 - s, s];
            let dphi = [-1.0 / h, 1.0 / h];
            for j in 0..2 {
                acc[j] += w * h * 2.0 * c * (xs * d * phi[j] + x * d * dphi[j] + x * ds * phi[j]) * ls;
            }
        }
        out[e] += acc[0];
        out[e + 1] += acc[1];
    }
    out
}

/// Where the control acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// Nodal control in `L2(0, L)`, homogeneous Dirichlet state.
    Distributed,
    /// Flux pair `(u_left, u_right)` at the two endpoints, Neumann state.
    NeumannBoundary,
}

impl ControlKind {
    /// Number of control coefficients per slab on `mesh`.
    pub fn dim(self, mesh: &SpaceMesh) -> usize {
        match self {
            ControlKind::Distributed => mesh.num_nodes(),
            ControlKind::NeumannBoundary => 2,
        }
    }

    /// Boundary nodes pinned to zero in the state space.
    pub fn constrained(self, mesh: &SpaceMesh) -> Vec<bool> {
        let mut fixed = vec![false; mesh.num_nodes()];
        if self == ControlKind::Distributed {
            fixed[0] = true;
            *fixed.last_mut().expect("non-empty") = true;
        }
        fixed
    }
}

/// The control operator `B` on one mesh together with the control Riesz map.
#[derive(Debug, Clone)]
pub struct ControlOperator {
    kind: ControlKind,
    mass: Option<TriMatrix>,
    nodes: usize,
}

pub fn assemble_control(mesh: &SpaceMesh, kind: ControlKind) -> ControlOperator {
    ControlOperator {
        kind,
        mass: (kind == ControlKind::Distributed).then(|| assemble_mass(mesh)),
        nodes: mesh.num_nodes(),
    }
}

impl ControlOperator {
    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ControlKind::Distributed => self.nodes,
            ControlKind::NeumannBoundary => 2,
        }
    }

    /// Load vector `(B u)_i`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match &self.mass {
            Some(m) => m.matvec(u),
            None => {
                let mut b = vec![0.0; self.nodes];
                b[0] += u[0];
                b[self.nodes - 1] += u[1];
                b
            }
        }
    }

    /// `B* λ` as a vector in the control dual.
    pub fn apply_adjoint(&self, lam: &[f64]) -> Vec<f64> {
        match &self.mass {
            Some(m) => m.matvec(lam),
            None => vec![lam[0], lam[self.nodes - 1]],
        }
    }

    /// Riesz map `R u` of the control inner product.
    pub fn riesz(&self, u: &[f64]) -> Vec<f64> {
        match &self.mass {
            Some(m) => m.matvec(u),
            None => u.to_vec(),
        }
    }

    /// Inverse Riesz map.
    pub fn riesz_inverse(&self, g: &[f64]) -> Result<Vec<f64>> {
        match &self.mass {
            Some(m) => m.solve(g),
            None => Ok(g.to_vec()),
        }
    }

    /// `⟨u, w⟩_U`.
    pub fn inner(&self, u: &[f64], w: &[f64]) -> f64 {
        crate::tridiag::dot(&self.riesz(u), w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    fn mesh(nodes: &[f64]) -> SpaceMesh {
        SpaceMesh::new(nodes.to_vec()).unwrap()
    }

    #[test]
    fn mass_examples() {
        let m = assemble_mass(&mesh(&[0.0, 0.5, 1.0]));
        assert_eq!(m.diag, vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0]);
        assert_eq!(m.sub, vec![1.0 / 12.0, 1.0 / 12.0]);
        assert!(m.is_symmetric(0.0));
        let m = assemble_mass(&mesh(&[0.0, 1.0]));
        assert_eq!(m.diag, vec![1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(m.sup, vec![1.0 / 6.0]);
        let m = assemble_mass(&mesh(&[0.0, 0.2, 1.1, 1.7, 3.0]));
        let total: f64 = m.diag.iter().chain(&m.sub).chain(&m.sup).sum();
        assert!(close(total, 3.0, 1e-14));
    }

    #[test]
    fn stiffness_examples() {
        let k = assemble_stiffness(&mesh(&[0.0, 0.5, 1.0]), &[1.0, 1.0]).unwrap();
        assert_eq!(k.diag, vec![2.0, 4.0, 2.0]);
        assert_eq!(k.sub, vec![-2.0, -2.0]);
        let z = assemble_stiffness(&mesh(&[0.0, 0.5, 1.0]), &[0.0, 0.0]).unwrap();
        assert!(z.diag.iter().chain(&z.sub).all(|v| *v == 0.0));
        let k = assemble_stiffness(&mesh(&[0.0, 1.0]), &[2.5]).unwrap();
        assert_eq!((k.diag.clone(), k.sub.clone()), (vec![2.5, 2.5], vec![-2.5]));
        assert!(matches!(
            assemble_stiffness(&mesh(&[0.0, 1.0]), &[-1.0]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn quasilinear_examples() {
        let m = mesh(&[0.0, 0.4, 1.0, 2.2, 3.0]);
        let r = assemble_quasilinear_residual(&m, &[2.0; 5], 1.5, 0.7).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-14));

        let x = [0.3, -1.0, 0.8, 2.0, 0.1];
        let r = assemble_quasilinear_residual(&m, &x, 0.0, 0.7).unwrap();
        let kx = stiffness(&m, 0.7).unwrap().matvec(&x);
        for (a, b) in r.iter().zip(&kx) {
            assert!(close(*a, *b, 1e-14));
        }

        let r = assemble_quasilinear_residual(&mesh(&[0.0, 1.0]), &[0.0, 1.0], 1.0, 1.0).unwrap();
        assert!(close(r[1], 4.0 / 3.0, 1e-14) && close(r[0], -4.0 / 3.0, 1e-14));

        assert!(assemble_quasilinear_residual(&m, &x, 1.0, 0.0).is_err());
        assert!(assemble_quasilinear_jacobian(&m, &x, 1.0, -1.0).is_err());
    }

    #[test]
    fn quasilinear_jacobian_matches_differences() {
        let m = mesh(&[0.0, 0.4, 1.0, 2.2, 3.0]);
        let x = [0.3, -1.0, 0.8, 2.0, 0.1];
        let (c, d) = (1.3, 0.2);
        let jac = assemble_quasilinear_jacobian(&m, &x, c, d).unwrap();
        let eps = 1e-5;
        for i in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let rp = assemble_quasilinear_residual(&m, &xp, c, d).unwrap();
            let rm = assemble_quasilinear_residual(&m, &xm, c, d).unwrap();
            for row in 0..5 {
                let fd = (rp[row] - rm[row]) / (2.0 * eps);
                assert!(
                    close(fd, jac.get(row, i), 1e-6),
                    "({row},{i}): {fd} vs {}",
                    jac.get(row, i)
                );
            }
        }
        let k = stiffness(&m, d).unwrap();
        assert_eq!(assemble_quasilinear_jacobian(&m, &x, 0.0, d).unwrap(), k);
        let j0 = assemble_quasilinear_jacobian(&m, &[0.0; 5], c, d).unwrap();
        for (a, b) in j0.diag.iter().zip(&k.diag) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn second_derivative_matches_differenced_jacobian() {
        let m = mesh(&[0.0, 0.4, 1.0, 2.2, 3.0]);
        let x = [0.3, -1.0, 0.8, 2.0, 0.1];
        let dx = [1.0, 0.5, -0.3, 0.2, -1.1];
        let lam = [0.2, -0.7, 1.5, 0.4, 0.9];
        let (c, d) = (1.3, 0.2);
        let h2 = quasilinear_second_derivative(&m, &x, &dx, &lam, c);
        let eps = 1e-5;
        let shift = |sign: f64| -> Vec<f64> {
            let xs: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + sign * eps * b).collect();
            assemble_quasilinear_jacobian(&m, &xs, c, d)
                .unwrap()
                .matvec_transpose(&lam)
        };
        let (p, q) = (shift(1.0), shift(-1.0));
        for j in 0..5 {
            let fd = (p[j] - q[j]) / (2.0 * eps);
            assert!(close(fd, h2[j], 1e-7), "{j}: {fd} vs {}", h2[j]);
        }
    }

    #[test]
    fn control_examples() {
        let m = mesh(&[0.0, 0.5, 1.5, 3.0]);
        let b = assemble_control(&m, ControlKind::Distributed);
        assert_eq!(b.dim(), 4);
        let load = b.apply(&[1.0; 4]);
        let hats = load_vector(&m, 1.0);
        for (a, h) in load.iter().zip(&hats) {
            assert!(close(*a, *h, 1e-15));
        }
        assert!(b.apply(&[0.0; 4]).iter().all(|v| *v == 0.0));
        let n = assemble_control(&m, ControlKind::NeumannBoundary);
        assert_eq!(n.apply(&[1.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(n.apply_adjoint(&[3.0, 1.0, 2.0, 5.0]), vec![3.0, 5.0]);
        assert_eq!(n.inner(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(ControlKind::Distributed.constrained(&m), vec![true, false, false, true]);
    }

    #[test]
    fn assembly_matches_five_point_reference() {
        // independent element-loop assembly with 5-point Gauss
        let xs = [
            0.046_910_077_030_668_0,
            0.230_765_344_947_158_45,
            0.5,
            0.769_234_655_052_841_6,
            0.953_089_922_969_332,
        ];
        let ws = [
            0.118_463_442_528_094_54,
            0.239_314_335_249_683_23,
            0.284_444_444_444_444_44,
            0.239_314_335_249_683_23,
            0.118_463_442_528_094_54,
        ];
        let m = mesh(&[0.0, 0.3, 0.35, 1.2, 2.0, 3.0]);
        let coeff = [0.5, 1.0, 2.0, 0.1, 3.0];
        let mass = assemble_mass(&m);
        let stiff = assemble_stiffness(&m, &coeff).unwrap();
        let n = m.num_nodes();
        let mut mref = vec![vec![0.0; n]; n];
        let mut kref = vec![vec![0.0; n]; n];
        for e in 0..m.num_elements() {
            let h = m.h(e);
            for (s, w) in xs.iter().zip(&ws) {
                let phi = [1.0 - s, *s];
                let dphi = [-1.0 / h, 1.0 / h];
                for a in 0..2 {
                    for b in 0..2 {
                        mref[e + a][e + b] += w * h * phi[a] * phi[b];
                        kref[e + a][e + b] += w * h * coeff[e] * dphi[a] * dphi[b];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!(close(mass.get(i, j), mref[i][j], 1e-12));
                assert!(close(stiff.get(i, j), kref[i][j], 1e-12));
            }
        }
    }
}
