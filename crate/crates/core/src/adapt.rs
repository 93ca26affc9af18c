//! Dörfler marking and the solve, estimate, mark, refine loop under DOF budgets.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dwr::{estimate, Indicators};
use crate::error::{Error, Result};
use crate::grid::{SpaceMesh, SpaceTimeGrid, TimeGrid};
use crate::model::{eval_qoi, ProblemSpec, Qoi};
use crate::solver::{solve_ocp, solve_secondary, Discretization, KktSolution, SecondarySolution, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    #[default]
    TimeOnly,
    SpaceOnly,
    SpaceTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub theta_time: f64,
    pub theta_space: f64,
    /// Budget on `M + 1`.
    pub max_time_points: usize,
    /// Budget on the node count summed over all slab meshes and the initial mesh.
    pub max_space_dofs_total: usize,
    pub max_rounds: usize,
    /// Uniform slabs of the initial time grid before τ is inserted.
    pub initial_time_slabs: usize,
    /// Elements of the initial spatial mesh; `None` picks 48 for time-only
    /// adaptivity and 6 otherwise.
    pub initial_elements: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::TimeOnly,
            theta_time: 0.5,
            theta_space: 0.3,
            max_time_points: 41,
            max_space_dofs_total: 2000,
            max_rounds: 200,
            initial_time_slabs: 3,
            initial_elements: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, theta) in [("theta_time", self.theta_time), ("theta_space", self.theta_space)] {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in (0, 1], got {theta}"
                )));
            }
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidParameter("max_rounds must be at least 1".into()));
        }
        if self.initial_time_slabs == 0 {
            return Err(Error::InvalidParameter("initial_time_slabs must be at least 1".into()));
        }
        if self.initial_elements == Some(0) {
            return Err(Error::InvalidParameter("initial_elements must be at least 1".into()));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.initial_elements.unwrap_or(match self.mode {
            AdaptMode::TimeOnly => 48,
            AdaptMode::SpaceOnly | AdaptMode::SpaceTime => 6,
        })
    }

    /// The coarse starting grid: uniform slabs with `tau` inserted and
    /// protected, one uniform mesh on every slab.
    pub fn initial_grid(&self, spec: &ProblemSpec, tau: Option<f64>) -> Result<SpaceTimeGrid> {
        self.validate()?;
        let mut time = TimeGrid::uniform(spec.horizon, self.initial_time_slabs)?;
        if let Some(tau) = tau {
            time = time.with_protected(tau)?;
        }
        Ok(SpaceTimeGrid::uniform(
            time,
            SpaceMesh::uniform(spec.length, self.elements())?,
        ))
    }
}

/// Indices of a smallest set whose values sum to at least `theta` times the
/// total, taken in descending order (ties by ascending index).
pub fn mark(values: &[f64], theta: f64) -> BTreeSet<usize> {
    let order = descending(values);
    let total: f64 = values.iter().sum();
    let goal = theta * total;
    let mut sum = 0.0;
    let mut marked = BTreeSet::new();
    for i in order {
        if sum >= goal || values[i] <= 0.0 {
            break;
        }
        sum += values[i];
        marked.insert(i);
    }
    marked
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub time_points: usize,
    pub space_dofs_total: usize,
    pub qoi_value: f64,
    pub eta_k: f64,
    pub eta_h: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub grid: Arc<SpaceTimeGrid>,
    pub solution: KktSolution,
    pub secondary: SecondarySolution,
    pub indicators: Indicators,
    pub history: Vec<HistoryRow>,
}

/// Which refinement a round performs.
enum Refinement {
    Time(BTreeSet<usize>),
    Space(BTreeSet<(usize, usize)>),
}

fn time_refinement(grid: &SpaceTimeGrid, ind: &Indicators, cfg: &AdaptConfig, space_budget: bool) -> BTreeSet<usize> {
    let values: Vec<f64> = ind.time.iter().map(|v| v.abs()).collect();
    let wanted = mark(&values, cfg.theta_time);
    let mut points = grid.time_points();
    let mut dofs = grid.space_dofs_total();
    let mut chosen = BTreeSet::new();
    for i in descending(&values).into_iter().filter(|i| wanted.contains(i)) {
        let m = i + 1;
        let extra = grid.mesh(m).num_nodes();
        if points + 1 > cfg.max_time_points || (space_budget && dofs + extra > cfg.max_space_dofs_total) {
            break;
        }
        points += 1;
        dofs += extra;
        chosen.insert(m);
    }
    chosen
}

fn space_refinement(grid: &SpaceTimeGrid, ind: &Indicators, cfg: &AdaptConfig) -> BTreeSet<(usize, usize)> {
    let pairs: Vec<(usize, usize)> = ind
        .space
        .iter()
        .enumerate()
        .flat_map(|(m, s)| (0..s.len()).map(move |e| (m, e)))
        .collect();
    let values: Vec<f64> = ind.space.iter().flatten().map(|v| v.abs()).collect();
    let wanted = mark(&values, cfg.theta_space);
    // bisecting an element adds one node
    let room = cfg.max_space_dofs_total.saturating_sub(grid.space_dofs_total());
    descending(&values)
        .into_iter()
        .filter(|i| wanted.contains(i))
        .take(room)
        .map(|i| pairs[i])
        .collect()
}

fn choose(grid: &SpaceTimeGrid, ind: &Indicators, cfg: &AdaptConfig) -> Option<Refinement> {
    let refinement = match cfg.mode {
        AdaptMode::TimeOnly => Refinement::Time(time_refinement(grid, ind, cfg, false)),
        AdaptMode::SpaceOnly => Refinement::Space(space_refinement(grid, ind, cfg)),
        AdaptMode::SpaceTime => {
            if ind.eta_k.abs() >= ind.eta_h.abs() {
                Refinement::Time(time_refinement(grid, ind, cfg, true))
            } else {
                Refinement::Space(space_refinement(grid, ind, cfg))
            }
        }
    };
    let empty = match &refinement {
        Refinement::Time(m) => m.is_empty(),
        Refinement::Space(m) => m.is_empty(),
    };
    (!empty).then_some(refinement)
}

/// One OCP solve plus sensitivities and indicators on a fixed grid.
pub fn solve_and_estimate(
    grid: Arc<SpaceTimeGrid>,
    spec: &ProblemSpec,
    qoi: &Qoi,
    warm: Option<&crate::trajectory::ControlTrajectory>,
    opts: &SolverOptions,
) -> Result<(KktSolution, SecondarySolution, Indicators)> {
    let disc = Discretization::new(grid, spec)?;
    let warm = warm.map(|u| u.transfer(disc.grid().clone())).transpose()?;
    let solution = solve_ocp(&disc, warm.as_ref(), opts)?;
    if !solution.info.converged {
        return Err(Error::OcpNotConverged {
            iterations: solution.info.outer_iterations,
            gradient_norm: solution.info.gradient_norm,
        });
    }
    let secondary = solve_secondary(&disc, &solution, qoi, opts)?;
    if !secondary.converged {
        return Err(Error::CgNotConverged {
            iterations: secondary.cg_iterations,
            residual: f64::NAN,
        });
    }
    let indicators = estimate(&disc, &solution, &secondary, qoi, opts.hessian)?;
    Ok((solution, secondary, indicators))
}

/// Solves, estimates and refines until a budget or `max_rounds` is reached.
/// On failure the error carries the rounds completed so far.
pub fn adapt_loop(
    spec: &ProblemSpec,
    qoi: &Qoi,
    cfg: &AdaptConfig,
    initial: SpaceTimeGrid,
    opts: &SolverOptions,
) -> Result<AdaptResult> {
    cfg.validate()?;
    qoi.validate(spec.horizon)?;
    if let Qoi::Truncated { tau } = qoi {
        if initial.time.find_point(*tau).is_none() {
            return Err(Error::WindowNotAligned { a: 0.0, b: *tau });
        }
    }
    if initial.time_points() > cfg.max_time_points && cfg.mode != AdaptMode::SpaceOnly {
        return Err(Error::InvalidParameter(format!(
            "time budget {} below the initial {} time points",
            cfg.max_time_points,
            initial.time_points()
        )));
    }
    if initial.space_dofs_total() > cfg.max_space_dofs_total && cfg.mode != AdaptMode::TimeOnly {
        return Err(Error::InvalidParameter(format!(
            "space budget {} below the initial {} DOFs",
            cfg.max_space_dofs_total,
            initial.space_dofs_total()
        )));
    }
    let mut grid = Arc::new(initial);
    let mut history = Vec::new();
    let mut warm: Option<crate::trajectory::ControlTrajectory> = None;
    for round in 0..cfg.max_rounds {
        let (solution, secondary, indicators) = match solve_and_estimate(grid.clone(), spec, qoi, warm.as_ref(), opts) {
            Ok(r) => r,
            Err(source) => {
                return Err(Error::AdaptRound {
                    round,
                    history,
                    source: Box::new(source),
                })
            }
        };
        history.push(HistoryRow {
            round,
            time_points: grid.time_points(),
            space_dofs_total: grid.space_dofs_total(),
            qoi_value: eval_qoi(&solution.x, &solution.u, spec, qoi)?,
            eta_k: indicators.eta_k,
            eta_h: indicators.eta_h,
        });
        let next = if round + 1 < cfg.max_rounds {
            choose(&grid, &indicators, cfg)
        } else {
            None
        };
        let Some(refinement) = next else {
            return Ok(AdaptResult {
                grid,
                solution,
                secondary,
                indicators,
                history,
            });
        };
        grid = Arc::new(match refinement {
            Refinement::Time(marks) => grid.refine_time(&marks)?,
            Refinement::Space(marks) => grid.refine_space(&marks)?,
        });
        warm = Some(solution.u);
    }
    unreachable!("the last round always returns")
}
