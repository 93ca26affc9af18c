//! Dense monolithic KKT solve for linear-quadratic problems on tiny grids,
//! assembled from scratch with nalgebra.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use mpc_dwr::fem::ControlKind;
use mpc_dwr::grid::{SpaceMesh, SpaceTimeGrid, TimeGrid};
use mpc_dwr::model::{Dynamics, InitialState, ProblemSpec, Qoi, Reference};
use mpc_dwr::solver::{solve_ocp, solve_secondary, Discretization, SolverOptions};

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

fn hat(nodes: &[f64], i: usize, w: f64) -> f64 {
    let left = if i > 0 { nodes[i - 1] } else { nodes[i] };
    let right = if i + 1 < nodes.len() { nodes[i + 1] } else { nodes[i] };
    if w < left || w > right {
        0.0
    } else if w <= nodes[i] {
        if i == 0 {
            1.0
        } else {
            (w - left) / (nodes[i] - left)
        }
    } else if i + 1 == nodes.len() {
        1.0
    } else {
        (right - w) / (right - nodes[i])
    }
}

fn dhat(nodes: &[f64], i: usize, w: f64) -> f64 {
    if i > 0 && w > nodes[i - 1] && w < nodes[i] {
        1.0 / (nodes[i] - nodes[i - 1])
    } else if i + 1 < nodes.len() && w > nodes[i] && w < nodes[i + 1] {
        -1.0 / (nodes[i + 1] - nodes[i])
    } else {
        0.0
    }
}

/// `∫ f(test_i, trial_j)` over the union of both node sets.
fn bilinear(test: &[f64], trial: &[f64], f: impl Fn(&[f64], usize, &[f64], usize, f64) -> f64) -> DMatrix<f64> {
    let mut pts: Vec<f64> = test.iter().chain(trial).copied().collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    DMatrix::from_fn(test.len(), trial.len(), |i, j| {
        pts.windows(2)
            .map(|iv| {
                let (a, b) = (iv[0], iv[1]);
                GAUSS
                    .iter()
                    .map(|g| 0.5 * (b - a) * f(test, i, trial, j, 0.5 * (a + b) + 0.5 * (b - a) * g))
                    .sum::<f64>()
            })
            .sum()
    })
}

fn mass(test: &[f64], trial: &[f64]) -> DMatrix<f64> {
    bilinear(test, trial, |p, i, q, j, w| hat(p, i, w) * hat(q, j, w))
}

fn stiff(nodes: &[f64]) -> DMatrix<f64> {
    bilinear(nodes, nodes, |p, i, q, j, w| dhat(p, i, w) * dhat(q, j, w))
}

pub struct Case {
    pub spec: ProblemSpec,
    pub times: Vec<f64>,
    pub meshes: Vec<Vec<f64>>,
}

/// Free node indices per mesh.
pub fn free(kind: ControlKind, n: usize) -> Vec<usize> {
    match kind {
        ControlKind::Distributed => (1..n - 1).collect(),
        ControlKind::NeumannBoundary => (0..n).collect(),
    }
}

fn select(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

struct Dense {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    q: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
}

fn dense_solve(case: &Case, window_end: f64) -> Dense {
    let spec = &case.spec;
    let (nu, s) = match spec.dynamics {
        Dynamics::Linear { nu, s } => (nu, s),
        Dynamics::Quasilinear { .. } => unreachable!(),
    };
    let kind = spec.control;
    let m_count = case.times.len() - 1;
    let frees: Vec<Vec<usize>> = case.meshes.iter().map(|n| free(kind, n.len())).collect();
    let nx: Vec<usize> = frees.iter().map(Vec::len).collect();
    let nu_dim: Vec<usize> = case
        .meshes
        .iter()
        .map(|n| if kind == ControlKind::Distributed { n.len() } else { 2 })
        .collect();
    let mut x_off = vec![0; m_count + 1];
    let mut total = 0;
    for m in 1..=m_count {
        x_off[m] = total;
        total += nx[m];
    }
    let mut u_off = vec![0; m_count + 1];
    for m in 1..=m_count {
        u_off[m] = total;
        total += nu_dim[m];
    }
    let n_con: usize = (1..=m_count).map(|m| nx[m]).sum();
    let mut c_off = vec![0; m_count + 1];
    let mut acc = 0;
    for m in 1..=m_count {
        c_off[m] = acc;
        acc += nx[m];
    }

    // x_0: constrained L2 projection of the nodal initial state.
    let InitialState::Nodal { nodes: src, values } = &spec.x0 else {
        unreachable!()
    };
    let m0 = &case.meshes[0];
    let rhs =
        select(&mass(m0, src), &frees[0], &(0..src.len()).collect::<Vec<_>>()) * DVector::from_column_slice(values);
    let x0f = select(&mass(m0, m0), &frees[0], &frees[0]).lu().solve(&rhs).unwrap();

    let mut h = DMatrix::<f64>::zeros(total, total);
    let mut g = DVector::<f64>::zeros(total);
    let mut e = DMatrix::<f64>::zeros(n_con, total);
    let mut b = DVector::<f64>::zeros(n_con);
    for m in 1..=m_count {
        let nodes = &case.meshes[m];
        let all: Vec<usize> = (0..nodes.len()).collect();
        let k = case.times[m] - case.times[m - 1];
        let mm = mass(nodes, nodes);
        let a = stiff(nodes) * nu - &mm * s;
        let r = if kind == ControlKind::Distributed {
            mm.clone()
        } else {
            DMatrix::identity(2, 2)
        };
        let bmat = if kind == ControlKind::Distributed {
            mm.clone()
        } else {
            let mut bm = DMatrix::zeros(nodes.len(), 2);
            bm[(0, 0)] = 1.0;
            bm[(nodes.len() - 1, 1)] = 1.0;
            bm
        };
        let xd = DVector::from_iterator(nodes.len(), nodes.iter().map(|&w| spec.reference_at(case.times[m], w)));
        let fr = &frees[m];
        let hxx = select(&mm, fr, fr) * k;
        let gx = (select(&mm, fr, &all) * &xd) * k;
        let huu = &r * (k * spec.alpha);
        h.view_mut((x_off[m], x_off[m]), (nx[m], nx[m])).copy_from(&hxx);
        h.view_mut((u_off[m], u_off[m]), (nu_dim[m], nu_dim[m])).copy_from(&huu);
        g.rows_mut(x_off[m], nx[m]).copy_from(&gx);
        // Rows: M x_m - C x_{m-1} + k (A x_m - B u_m - F) = 0 on free test functions.
        let rows = c_off[m];
        let step = select(&mm, fr, fr) + select(&a, fr, fr) * k;
        e.view_mut((rows, x_off[m]), (nx[m], nx[m])).copy_from(&step);
        e.view_mut((rows, u_off[m]), (nx[m], nu_dim[m]))
            .copy_from(&(-select(&bmat, fr, &(0..nu_dim[m]).collect::<Vec<_>>()) * k));
        let cross = select(&mass(nodes, &case.meshes[m - 1]), fr, &frees[m - 1]);
        // Hats sum to one, so row sums of the mass matrix give ∫φ_i.
        let load: Vec<f64> = (0..nodes.len()).map(|i| spec.f * mm.row(i).sum()).collect();
        let load_f = DVector::from_iterator(fr.len(), fr.iter().map(|&i| load[i] * k));
        if m == 1 {
            b.rows_mut(rows, nx[m]).copy_from(&(cross * &x0f + load_f));
        } else {
            e.view_mut((rows, x_off[m - 1]), (nx[m], nx[m - 1]))
                .copy_from(&(-cross));
            b.rows_mut(rows, nx[m]).copy_from(&load_f);
        }
    }
    // Window gradient of the QOI: tracking and control parts.
    let mut iprime = DVector::<f64>::zeros(total);
    let kkt = {
        let mut k = DMatrix::<f64>::zeros(total + n_con, total + n_con);
        k.view_mut((0, 0), (total, total)).copy_from(&h);
        k.view_mut((0, total), (total, n_con)).copy_from(&e.transpose());
        k.view_mut((total, 0), (n_con, total)).copy_from(&e);
        k
    };
    let mut rhs = DVector::<f64>::zeros(total + n_con);
    rhs.rows_mut(0, total).copy_from(&g);
    rhs.rows_mut(total, n_con).copy_from(&b);
    let lu = kkt.clone().lu();
    let sol = lu.solve(&rhs).unwrap();
    let y = sol.rows(0, total).into_owned();
    let hy = &h * &y - &g;
    for m in 1..=m_count {
        if case.times[m] <= window_end + 1e-12 {
            iprime.rows_mut(x_off[m], nx[m]).copy_from(&hy.rows(x_off[m], nx[m]));
            iprime
                .rows_mut(u_off[m], nu_dim[m])
                .copy_from(&hy.rows(u_off[m], nu_dim[m]));
        }
    }
    let mut rhs2 = DVector::<f64>::zeros(total + n_con);
    rhs2.rows_mut(0, total).copy_from(&(-iprime));
    let sol2 = lu.solve(&rhs2).unwrap();

    let expand = |v: DVector<f64>, m: usize| {
        let mut full = DVector::zeros(case.meshes[m].len());
        for (a, &i) in frees[m].iter().enumerate() {
            full[i] = v[a];
        }
        full
    };
    let pick = |s: &DVector<f64>, off: &[usize], dims: &[usize], m: usize| s.rows(off[m], dims[m]).into_owned();
    Dense {
        x: (1..=m_count).map(|m| expand(pick(&sol, &x_off, &nx, m), m)).collect(),
        u: (1..=m_count).map(|m| pick(&sol, &u_off, &nu_dim, m)).collect(),
        lam: (1..=m_count)
            .map(|m| expand(sol.rows(total + c_off[m], nx[m]).into_owned(), m))
            .collect(),
        v: (1..=m_count).map(|m| expand(pick(&sol2, &x_off, &nx, m), m)).collect(),
        q: (1..=m_count).map(|m| pick(&sol2, &u_off, &nu_dim, m)).collect(),
        z: (1..=m_count)
            .map(|m| expand(sol2.rows(total + c_off[m], nx[m]).into_owned(), m))
            .collect(),
    }
}

/// One distributed and one boundary-control case on `meshes` (4 meshes, 3 slabs).
pub fn cases(meshes: Vec<Vec<f64>>) -> Vec<Case> {
    let fine = vec![0.0, 0.75, 1.5, 2.25, 3.0];
    let x0 = InitialState::Nodal {
        nodes: fine.clone(),
        values: vec![0.0, 0.4, -0.3, 0.8, 0.0],
    };
    vec![
        Case {
            spec: ProblemSpec {
                dynamics: Dynamics::Linear { nu: 0.1, s: 0.3 },
                horizon: 1.5,
                x0: x0.clone(),
                f: 0.2,
                ..ProblemSpec::default()
            },
            times: vec![0.0, 0.4, 1.0, 1.5],
            meshes: meshes.clone(),
        },
        Case {
            spec: ProblemSpec {
                dynamics: Dynamics::Linear { nu: 0.1, s: 0.0 },
                control: ControlKind::NeumannBoundary,
                reference: Reference::Dynamic,
                horizon: 1.5,
                alpha: 1e-2,
                x0,
                f: -0.1,
                ..ProblemSpec::default()
            },
            times: vec![0.0, 0.4, 1.0, 1.5],
            meshes,
        },
    ]
}

/// Meshes differing from slab to slab.
pub fn mixed_meshes() -> Vec<Vec<f64>> {
    let coarse = vec![0.0, 1.5, 3.0];
    let fine = vec![0.0, 0.75, 1.5, 2.25, 3.0];
    let graded = vec![0.0, 0.75, 1.5, 3.0];
    vec![fine.clone(), coarse, graded, fine]
}

fn scaled_diff(ours: &[f64], dense: &DVector<f64>, scale: f64) -> f64 {
    assert_eq!(ours.len(), dense.len());
    ours.iter()
        .zip(dense.iter())
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

fn max_abs(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(|v| v.amax()).fold(1e-300, f64::max)
}

/// Largest coefficient-wise deviation from the dense solve over x, u, λ and
/// the secondary v, q, z for both QOIs, relative to the size of each field.
pub fn max_deviation(case: &Case) -> f64 {
    let opts = SolverOptions {
        cg_rel_tol: 1e-13,
        newton_tol: 1e-11,
        secondary_rel_tol: 1e-13,
        ..SolverOptions::default()
    };
    let grid = Arc::new(
        SpaceTimeGrid::new(
            TimeGrid::new(case.times.clone()).unwrap(),
            case.meshes.iter().map(|n| SpaceMesh::new(n.clone()).unwrap()).collect(),
        )
        .unwrap(),
    );
    let disc = Discretization::new(grid, &case.spec).unwrap();
    let base = solve_ocp(&disc, None, &opts).unwrap();
    let mut worst = 0.0f64;
    for qoi in [Qoi::Full, Qoi::Truncated { tau: 1.0 }] {
        let dense = dense_solve(case, qoi.window_end(case.spec.horizon));
        let chi = solve_secondary(&disc, &base, &qoi, &opts).unwrap();
        // Full-horizon sensitivities vanish at the optimum, so scale by the primal sizes.
        let floor = max_abs(&dense.x).max(max_abs(&dense.u)).max(max_abs(&dense.lam));
        let scale = |vs: &[DVector<f64>]| max_abs(vs).max(1e-3 * floor);
        for m in 1..case.times.len() {
            worst = worst
                .max(scaled_diff(base.x.slab(m), &dense.x[m - 1], scale(&dense.x)))
                .max(scaled_diff(base.u.slab(m), &dense.u[m - 1], scale(&dense.u)))
                .max(scaled_diff(base.lam.slab(m), &dense.lam[m - 1], scale(&dense.lam)))
                .max(scaled_diff(chi.v.slab(m), &dense.v[m - 1], scale(&dense.v)))
                .max(scaled_diff(chi.q.slab(m), &dense.q[m - 1], scale(&dense.q)))
                .max(scaled_diff(chi.z.slab(m), &dense.z[m - 1], scale(&dense.z)));
        }
    }
    worst
}
