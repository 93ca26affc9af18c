//! Receding-horizon control with per-step adaptive OCP solves, fine-grid plant
//! simulation and closed-loop cost accounting, plus decay diagnostics.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_loop, AdaptConfig, AdaptResult};
use crate::dwr::Indicators;
use crate::error::{Error, Result};
use crate::fem::ControlKind;
use crate::grid::{interpolate, SpaceMesh, SpaceTimeGrid, TimeGrid};
use crate::model::{eval_qoi, InitialState, ProblemSpec, Qoi};
use crate::solver::{Discretization, KktSolution, SecondarySolution, SolverOptions};
use crate::trajectory::{ControlTrajectory, DgTrajectory, NormWeight};

/// QOI used to drive refinement inside each MPC step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QoiPolicy {
    Full,
    #[default]
    Truncated,
}

impl QoiPolicy {
    pub fn qoi(self, tau: f64) -> Qoi {
        match self {
            QoiPolicy::Full => Qoi::Full,
            QoiPolicy::Truncated => Qoi::Truncated { tau },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QoiPolicy::Full => "full",
            QoiPolicy::Truncated => "truncated",
        }
    }
}

/// Grid on which the plant is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimGrid {
    /// Uniform fine grid merged with the OCP breakpoints.
    #[default]
    Fine,
    /// The OCP grid itself restricted to `[0, τ]`.
    OcpGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub tau: f64,
    pub n_steps: usize,
    pub adapt: AdaptConfig,
    pub sim_time_points_per_tau: usize,
    /// Uniform refinements of the initial OCP mesh for the plant simulation.
    pub sim_uniform_refs: usize,
    pub refinement_qoi: QoiPolicy,
    pub sim_grid: SimGrid,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            n_steps: 4,
            adapt: AdaptConfig::default(),
            sim_time_points_per_tau: 51,
            sim_uniform_refs: 5,
            refinement_qoi: QoiPolicy::Truncated,
            sim_grid: SimGrid::Fine,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= horizon) {
            return Err(Error::InvalidParameter(format!(
                "tau must lie in (0, T] = (0, {horizon}], got {}",
                self.tau
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        if self.sim_time_points_per_tau < 2 {
            return Err(Error::InvalidParameter(
                "sim_time_points_per_tau must be at least 2".into(),
            ));
        }
        self.adapt.validate()
    }
}

/// Bookkeeping of one MPC step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub open_loop_qoi: f64,
    pub step_cost: f64,
    pub cumulative_closed_loop_cost: f64,
    pub time_points: usize,
    pub space_dofs: usize,
    /// Space DOFs added on OCP slabs starting at or after local time [`LATE_TIME`].
    pub late_added_dofs: usize,
    pub rounds: usize,
}

/// Control held on `[t0, t1]` (absolute time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSegment {
    pub t0: f64,
    pub t1: f64,
    pub mesh: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub closed_loop_cost: f64,
    pub steps: Vec<StepRecord>,
    pub control: Vec<ControlSegment>,
    /// Simulation mesh nodes (the `SimGrid::Fine` mesh; per-sample meshes otherwise).
    pub state_times: Vec<f64>,
    pub state_meshes: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

/// Local time after which slabs count as late for DOF locality.
pub const LATE_TIME: f64 = 2.0;

/// Space DOFs added by refinement on slabs with `t_{m-1} >= LATE_TIME`.
pub fn late_added_dofs(grid: &SpaceTimeGrid, initial_nodes: usize) -> usize {
    (1..=grid.num_slabs())
        .filter(|&m| grid.time.t(m - 1) >= LATE_TIME - 1e-12)
        .map(|m| grid.mesh(m).num_nodes().saturating_sub(initial_nodes))
        .sum()
}

fn sim_mesh(initial: &SpaceMesh, cfg: &MpcConfig) -> SpaceMesh {
    initial.uniform_refine(cfg.sim_uniform_refs)
}

/// Sim grid on `[0, τ]`: uniform points merged with the OCP breakpoints.
fn fine_time_grid(ocp: &TimeGrid, tau: f64, points: usize) -> Result<TimeGrid> {
    let mut t: Vec<f64> = (0..points).map(|i| tau * i as f64 / (points - 1) as f64).collect();
    t.extend(ocp.points().iter().copied().filter(|&p| p > 0.0 && p < tau));
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * tau);
    *t.last_mut().expect("non-empty") = tau;
    TimeGrid::new(t)
}

/// The open-loop control restricted to the simulation grid.
fn held_control(u: &ControlTrajectory, sim: &Arc<SpaceTimeGrid>) -> Result<ControlTrajectory> {
    let ocp = u.grid();
    let slabs = (1..=sim.num_slabs())
        .map(|m| {
            let mid = 0.5 * (sim.time.t(m - 1) + sim.time.t(m));
            let p = ocp.time.slab_containing(mid);
            match u.kind() {
                ControlKind::Distributed => interpolate(u.slab(p), ocp.mesh(p), sim.mesh(m)),
                ControlKind::NeumannBoundary => u.slab(p).to_vec(),
            }
        })
        .collect();
    ControlTrajectory::new(sim.clone(), u.kind(), slabs)
}

struct Step {
    late_added_dofs: usize,
    adapt: AdaptResult,
    sim_disc: Discretization,
    sim_x: DgTrajectory,
    sim_u: ControlTrajectory,
}

fn run_step(spec_k: &ProblemSpec, cfg: &MpcConfig, opts: &SolverOptions) -> Result<Step> {
    let qoi = cfg.refinement_qoi.qoi(cfg.tau);
    let initial = cfg.adapt.initial_grid(spec_k, Some(cfg.tau))?;
    let initial_nodes = initial.mesh(0).num_nodes();
    let base_mesh = initial.mesh(0).clone();
    let adapt = adapt_loop(spec_k, &qoi, &cfg.adapt, initial, opts)?;
    let ocp = adapt.grid.clone();
    let end = ocp
        .time
        .find_point(cfg.tau)
        .ok_or(Error::WindowNotAligned { a: 0.0, b: cfg.tau })?;
    let sim_grid = match cfg.sim_grid {
        SimGrid::Fine => {
            let time = fine_time_grid(&ocp.time, cfg.tau, cfg.sim_time_points_per_tau)?;
            let mesh = sim_mesh(&base_mesh, cfg);
            SpaceTimeGrid::uniform(time, mesh)
        }
        SimGrid::OcpGrid => SpaceTimeGrid::new(
            TimeGrid::new(ocp.time.points()[..=end].to_vec())?,
            ocp.meshes[..=end].to_vec(),
        )?,
    };
    let sim_grid = Arc::new(sim_grid);
    let sim_u = held_control(&adapt.solution.u, &sim_grid)?;
    let sim_spec = ProblemSpec {
        horizon: cfg.tau,
        ..spec_k.clone()
    };
    let sim_disc = Discretization::new(sim_grid, &sim_spec)?;
    let sim_x = sim_disc.solve_state(&sim_u, None, opts)?;
    Ok(Step {
        late_added_dofs: late_added_dofs(&adapt.grid, initial_nodes),
        adapt,
        sim_disc,
        sim_x,
        sim_u,
    })
}

/// Runs `n_steps` of receding-horizon control.
pub fn mpc_run(spec: &ProblemSpec, cfg: &MpcConfig, opts: &SolverOptions) -> Result<ClosedLoopResult> {
    spec.validate()?;
    cfg.validate(spec.horizon)?;
    let mut x0 = spec.x0.clone();
    let mut result = ClosedLoopResult {
        closed_loop_cost: 0.0,
        steps: Vec::new(),
        control: Vec::new(),
        state_times: Vec::new(),
        state_meshes: Vec::new(),
        states: Vec::new(),
    };
    for k in 0..cfg.n_steps {
        let offset = k as f64 * cfg.tau;
        let spec_k = ProblemSpec {
            x0: x0.clone(),
            ..spec.shifted(offset)
        };
        let step = run_step(&spec_k, cfg, opts).map_err(|e| Error::MpcStep {
            step: k,
            source: Box::new(e),
        })?;
        let disc = &step.sim_disc;
        let grid = disc.grid().clone();
        let step_cost = disc.cost(&step.sim_x, &step.sim_u);
        result.closed_loop_cost += step_cost;
        let first = if k == 0 { 0 } else { 1 };
        for m in first..=grid.num_slabs() {
            result.state_times.push(offset + grid.time.t(m));
            result.state_meshes.push(grid.mesh(m).nodes().to_vec());
            result.states.push(step.sim_x.slab(m).to_vec());
        }
        for m in 1..=grid.num_slabs() {
            let values = step.sim_u.slab(m).to_vec();
            let mesh = match step.sim_u.kind() {
                ControlKind::Distributed => grid.mesh(m).nodes().to_vec(),
                ControlKind::NeumannBoundary => vec![0.0, spec.length],
            };
            result.control.push(ControlSegment {
                t0: offset + grid.time.t(m - 1),
                t1: offset + grid.time.t(m),
                mesh,
                values,
            });
        }
        let ocp = &step.adapt.grid;
        let qoi = cfg.refinement_qoi.qoi(cfg.tau);
        result.steps.push(StepRecord {
            step: k,
            open_loop_qoi: eval_qoi(&step.adapt.solution.x, &step.adapt.solution.u, &spec_k, &qoi)?,
            step_cost,
            cumulative_closed_loop_cost: result.closed_loop_cost,
            time_points: ocp.time_points(),
            space_dofs: ocp.space_dofs_total(),
            late_added_dofs: step.late_added_dofs,
            rounds: step.adapt.history.len(),
        });
        let last = grid.num_slabs();
        x0 = InitialState::Nodal {
            nodes: grid.mesh(last).nodes().to_vec(),
            values: step.sim_x.slab(last).to_vec(),
        };
    }
    Ok(result)
}

/// Runs the Full and the Truncated policy concurrently.
pub fn compare_policies(
    spec: &ProblemSpec,
    cfg: &MpcConfig,
    opts: &SolverOptions,
) -> (Result<ClosedLoopResult>, Result<ClosedLoopResult>) {
    let arm = |policy| MpcConfig {
        refinement_qoi: policy,
        ..*cfg
    };
    let (full, truncated) = (arm(QoiPolicy::Full), arm(QoiPolicy::Truncated));
    std::thread::scope(|s| {
        let handle = s.spawn(|| mpc_run(spec, &full, opts));
        let t = mpc_run(spec, &truncated, opts);
        (handle.join().expect("MPC worker panicked"), t)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub points_used: usize,
}

/// Least-squares line through `(t, ln value)` for samples in `[a, b]` above `floor`.
pub fn fit_decay(series: &[(f64, f64)], window: (f64, f64), floor: f64) -> Result<DecayFit> {
    let (a, b) = window;
    if !(a < b) || !(floor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "decay fit needs a < b and floor > 0 (window [{a}, {b}], floor {floor})"
        )));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, v)| *t >= a && *t <= b && *v > floor)
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} samples above the floor in [{a}, {b}]",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(DecayFit {
        slope,
        intercept: my - slope * mt,
        points_used: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub m: usize,
    pub t: f64,
    pub v_norm: f64,
    pub q_norm: f64,
    pub z_norm: f64,
    pub eta_k: f64,
    pub eta_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub window: (f64, f64),
    /// Fit of `‖q‖_U`; `None` when too few samples lie above the floor.
    pub q_fit: Option<DecayFit>,
    pub eta_k_fit: Option<DecayFit>,
}

/// Floor below which samples are treated as solver noise.
pub const DECAY_FLOOR: f64 = 1e-11;

/// Per-slab sensitivity norms and indicator magnitudes with decay fits on
/// `[2τ, 0.6 T]`.
pub fn decay_report(base: &KktSolution, chi: &SecondarySolution, indicators: &Indicators, tau: f64) -> DecayReport {
    let grid = base.x.grid();
    let v = chi.v.l2v_norm(NormWeight::L2);
    let z = chi.z.l2v_norm(NormWeight::L2);
    let q = chi.q.norms();
    let space = indicators.space_per_slab();
    let rows: Vec<DecayRow> = (1..=grid.num_slabs())
        .map(|m| DecayRow {
            m,
            t: grid.time.t(m),
            v_norm: v[m - 1],
            q_norm: q[m - 1],
            z_norm: z[m - 1],
            eta_k: indicators.time[m - 1].abs(),
            eta_h: space[m].abs(),
        })
        .collect();
    let window = (2.0 * tau, 0.6 * grid.time.end());
    let fit = |f: fn(&DecayRow) -> f64| {
        let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, f(r))).collect();
        fit_decay(&series, window, DECAY_FLOOR).ok()
    };
    DecayReport {
        q_fit: fit(|r| r.q_norm),
        eta_k_fit: fit(|r| r.eta_k),
        rows,
        window,
    }
}
