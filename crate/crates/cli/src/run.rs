use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use mpc_dwr::adapt::{adapt_loop, AdaptMode};
use mpc_dwr::dwr::estimate;
use mpc_dwr::grid::{SpaceMesh, SpaceTimeGrid, TimeGrid};
use mpc_dwr::model::{eval_cost, ProblemSpec, Qoi};
use mpc_dwr::mpc::{compare_policies, decay_report, mpc_run, ClosedLoopResult, MpcConfig, QoiPolicy};
use mpc_dwr::solver::{solve_ocp, solve_secondary, Discretization};

use crate::config::{Experiment, RunConfig};
use crate::output::{num, OutDir};
use crate::CliError;

/// Caps the number of concurrent sweep arms.
pub const WORKERS_ENV: &str = "MPC_DWR_WORKERS";

pub fn workers_from_env() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs the experiment, writes its files under `out` and returns the summary.
pub fn run(cfg: &RunConfig, out: &Path, compare: bool, workers: usize) -> Result<Value, CliError> {
    let dir = OutDir::create(out)?;
    let summary = match cfg.experiment {
        Experiment::SolveOcp => solve(cfg, &dir)?,
        Experiment::Mpc => closed_loop(cfg, &dir, compare)?,
        Experiment::Decay => decay(cfg, &dir)?,
        Experiment::Sweep => sweep(cfg, &dir, workers)?,
    };
    dir.json("summary.json", &summary)?;
    Ok(summary)
}

fn solve(cfg: &RunConfig, dir: &OutDir) -> Result<Value, CliError> {
    let spec = &cfg.problem;
    let protect = match cfg.qoi {
        Qoi::Truncated { tau } => Some(tau),
        Qoi::Full => None,
    };
    let init = cfg.adapt.initial_grid(spec, protect)?;
    let res = adapt_loop(spec, &cfg.qoi, &cfg.adapt, init, &cfg.solver)?;

    let history: Vec<Vec<String>> = res
        .history
        .iter()
        .map(|h| {
            vec![
                h.round.to_string(),
                h.time_points.to_string(),
                h.space_dofs_total.to_string(),
                num(h.qoi_value),
                num(h.eta_k),
                num(h.eta_h),
            ]
        })
        .collect();
    dir.csv(
        "history.csv",
        &[
            "round",
            "time_points",
            "space_dofs_total",
            "qoi_value",
            "eta_k",
            "eta_h",
        ],
        &history,
    )?;

    let grid = &res.grid;
    let mut indicators = Vec::new();
    for (i, v) in res.indicators.time.iter().enumerate() {
        indicators.push(vec!["time".into(), (i + 1).to_string(), String::new(), num(*v)]);
    }
    for (m, slab) in res.indicators.space.iter().enumerate() {
        for (e, v) in slab.iter().enumerate() {
            indicators.push(vec!["space".into(), m.to_string(), e.to_string(), num(*v)]);
        }
    }
    dir.csv("indicators.csv", &["kind", "slab", "element", "value"], &indicators)?;

    let sol = &res.solution;
    let mut traj = Vec::new();
    for m in 0..=grid.num_slabs() {
        let nodes = grid.mesh(m).nodes();
        for (i, w) in nodes.iter().enumerate() {
            traj.push(vec![
                m.to_string(),
                num(grid.time.t(m)),
                i.to_string(),
                num(*w),
                num(sol.x.slab(m)[i]),
                num(sol.lam.slab(m)[i]),
            ]);
        }
    }
    dir.csv("trajectory.csv", &["slab", "t", "node", "w", "x", "lambda"], &traj)?;

    let mut control = Vec::new();
    for m in 1..=grid.num_slabs() {
        for (i, u) in sol.u.slab(m).iter().enumerate() {
            control.push(vec![
                m.to_string(),
                num(grid.time.t(m - 1)),
                num(grid.time.t(m)),
                i.to_string(),
                num(*u),
            ]);
        }
    }
    dir.csv("control.csv", &["slab", "t0", "t1", "index", "u"], &control)?;

    let last = res.history.last().expect("adaptive loop records its first round");
    Ok(json!({
        "experiment": "solve_ocp",
        "seed": cfg.seed,
        "cost": eval_cost(&sol.x, &sol.u, spec, (0.0, spec.horizon))?,
        "qoi_value": last.qoi_value,
        "eta_k": last.eta_k,
        "eta_h": last.eta_h,
        "rounds": res.history.len(),
        "time_points": grid.time_points(),
        "space_dofs_total": grid.space_dofs_total(),
        "newton_iterations": sol.info.outer_iterations,
    }))
}

fn budget_of(mpc: &MpcConfig) -> usize {
    match mpc.adapt.mode {
        AdaptMode::TimeOnly => mpc.adapt.max_time_points,
        _ => mpc.adapt.max_space_dofs_total,
    }
}

const STEP_HEADER: [&str; 10] = [
    "policy",
    "budget",
    "step",
    "open_loop_qoi",
    "step_cost",
    "cumulative_closed_loop_cost",
    "time_points",
    "space_dofs",
    "late_added_dofs",
    "rounds",
];

fn step_rows(policy: QoiPolicy, budget: usize, res: &ClosedLoopResult) -> Vec<Vec<String>> {
    res.steps
        .iter()
        .map(|s| {
            vec![
                policy.name().to_string(),
                budget.to_string(),
                s.step.to_string(),
                num(s.open_loop_qoi),
                num(s.step_cost),
                num(s.cumulative_closed_loop_cost),
                s.time_points.to_string(),
                s.space_dofs.to_string(),
                s.late_added_dofs.to_string(),
                s.rounds.to_string(),
            ]
        })
        .collect()
}

fn write_closed_loop(dir: &OutDir, policy: QoiPolicy, res: &ClosedLoopResult) -> Result<(), CliError> {
    let mut states = Vec::new();
    for (i, (t, x)) in res.state_times.iter().zip(&res.states).enumerate() {
        let mesh = res.state_meshes.get(i).unwrap_or(&res.state_meshes[0]);
        for (j, (w, v)) in mesh.iter().zip(x).enumerate() {
            states.push(vec![num(*t), j.to_string(), num(*w), num(*v)]);
        }
    }
    dir.csv(
        &format!("state_{}.csv", policy.name()),
        &["t", "node", "w", "x"],
        &states,
    )?;
    let mut control = Vec::new();
    for seg in &res.control {
        for (i, u) in seg.values.iter().enumerate() {
            control.push(vec![num(seg.t0), num(seg.t1), i.to_string(), num(*u)]);
        }
    }
    dir.csv(
        &format!("control_{}.csv", policy.name()),
        &["t0", "t1", "index", "u"],
        &control,
    )
}

fn closed_loop(cfg: &RunConfig, dir: &OutDir, compare: bool) -> Result<Value, CliError> {
    let runs: Vec<(QoiPolicy, ClosedLoopResult)> = if compare {
        let (full, truncated) = compare_policies(&cfg.problem, &cfg.mpc, &cfg.solver);
        vec![(QoiPolicy::Full, full?), (QoiPolicy::Truncated, truncated?)]
    } else {
        let policy = cfg.mpc.refinement_qoi;
        vec![(policy, mpc_run(&cfg.problem, &cfg.mpc, &cfg.solver)?)]
    };
    let budget = budget_of(&cfg.mpc);
    let rows: Vec<Vec<String>> = runs.iter().flat_map(|(p, r)| step_rows(*p, budget, r)).collect();
    dir.csv("results.csv", &STEP_HEADER, &rows)?;
    for (p, r) in &runs {
        write_closed_loop(dir, *p, r)?;
    }
    let policies: Vec<Value> = runs
        .iter()
        .map(|(p, r)| {
            json!({
                "policy": p.name(),
                "closed_loop_cost": r.closed_loop_cost,
                "steps": r.steps.len(),
            })
        })
        .collect();
    let mut summary = json!({
        "experiment": "mpc",
        "seed": cfg.seed,
        "budget": budget,
        "policies": policies,
    });
    if let [(_, r)] = runs.as_slice() {
        summary["closed_loop_cost"] = json!(r.closed_loop_cost);
    }
    Ok(summary)
}

fn decay(cfg: &RunConfig, dir: &OutDir) -> Result<Value, CliError> {
    let spec = &cfg.problem;
    let Qoi::Truncated { tau } = cfg.qoi else {
        unreachable!("validated: decay needs a truncated QOI")
    };
    let grid = Arc::new(SpaceTimeGrid::uniform(
        TimeGrid::uniform(spec.horizon, cfg.decay.time_slabs)?,
        SpaceMesh::uniform(spec.length, cfg.decay.elements)?,
    ));
    let disc = Discretization::new(grid, spec)?;
    let base = solve_ocp(&disc, None, &cfg.solver)?;
    let chi = solve_secondary(&disc, &base, &cfg.qoi, &cfg.solver)?;
    let ind = estimate(&disc, &base, &chi, &cfg.qoi, cfg.solver.hessian)?;
    let report = decay_report(&base, &chi, &ind, tau);
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                num(r.t),
                num(r.v_norm),
                num(r.q_norm),
                num(r.z_norm),
                num(r.eta_k),
                num(r.eta_h),
            ]
        })
        .collect();
    dir.csv(
        "decay.csv",
        &["slab", "t", "v_norm", "q_norm", "z_norm", "eta_k", "eta_h"],
        &rows,
    )?;
    Ok(json!({
        "experiment": "decay",
        "seed": cfg.seed,
        "tau": tau,
        "window": [report.window.0, report.window.1],
        "q_fit": report.q_fit,
        "eta_k_fit": report.eta_k_fit,
    }))
}

struct Arm {
    alpha: f64,
    budget: usize,
    policy: QoiPolicy,
}

/// Runs `jobs` on up to `workers` threads; results keep the job order.
fn parallel<T: Sync, R: Send>(jobs: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn sweep(cfg: &RunConfig, dir: &OutDir, workers: usize) -> Result<Value, CliError> {
    let alphas = if cfg.sweep.alphas.is_empty() {
        vec![cfg.problem.alpha]
    } else {
        cfg.sweep.alphas.clone()
    };
    let mut arms = Vec::new();
    for &alpha in &alphas {
        for &budget in &cfg.sweep.budgets {
            for policy in [QoiPolicy::Full, QoiPolicy::Truncated] {
                arms.push(Arm { alpha, budget, policy });
            }
        }
    }
    let results = parallel(&arms, workers, |arm| {
        let spec = ProblemSpec {
            alpha: arm.alpha,
            ..cfg.problem.clone()
        };
        let mpc = MpcConfig {
            adapt: cfg.with_budget(arm.budget),
            refinement_qoi: arm.policy,
            ..cfg.mpc
        };
        mpc_run(&spec, &mpc, &cfg.solver)
    });
    let results: Vec<ClosedLoopResult> = results.into_iter().collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut steps = Vec::new();
    for (arm, res) in arms.iter().zip(&results) {
        let last = res.steps.last().expect("at least one MPC step");
        rows.push(vec![
            arm.policy.name().to_string(),
            arm.budget.to_string(),
            num(arm.alpha),
            num(res.closed_loop_cost),
            res.steps.len().to_string(),
            last.time_points.to_string(),
            last.space_dofs.to_string(),
        ]);
        for mut r in step_rows(arm.policy, arm.budget, res) {
            r.insert(2, num(arm.alpha));
            steps.push(r);
        }
    }
    dir.csv(
        "sweep.csv",
        &[
            "policy",
            "budget",
            "alpha",
            "closed_loop_cost",
            "steps",
            "time_points",
            "space_dofs",
        ],
        &rows,
    )?;
    let mut header = STEP_HEADER.to_vec();
    header.insert(2, "alpha");
    dir.csv("sweep_steps.csv", &header, &steps)?;
    Ok(json!({
        "experiment": "sweep",
        "seed": cfg.seed,
        "budget_kind": if cfg.adapt.mode == AdaptMode::TimeOnly { "time_points" } else { "space_dofs_total" },
        "arms": rows.len(),
    }))
}
