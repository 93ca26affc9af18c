use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mpc_dwr::adapt::{AdaptConfig, AdaptMode};
use mpc_dwr::model::{ProblemSpec, Qoi};
use mpc_dwr::mpc::MpcConfig;
use mpc_dwr::solver::SolverOptions;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SolveOcp,
    Mpc,
    Decay,
    Sweep,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SolveOcp => "solve_ocp",
            Experiment::Mpc => "mpc",
            Experiment::Decay => "decay",
            Experiment::Sweep => "sweep",
        }
    }
}

/// Uniform grid for the decay experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayGrid {
    pub time_slabs: usize,
    pub elements: usize,
}

impl Default for DecayGrid {
    fn default() -> Self {
        Self {
            time_slabs: 80,
            elements: 24,
        }
    }
}

/// Cartesian product of budgets and α values; both policies per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Time points for `time_only` adaptivity, total space DOFs otherwise.
    pub budgets: Vec<usize>,
    /// Empty means the problem's own α.
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![5, 8, 11, 21, 31, 41],
            alphas: Vec::new(),
        }
    }
}

/// The raw file layout; every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    experiment: Option<Experiment>,
    problem: ProblemSpec,
    qoi: Option<Qoi>,
    adapt: AdaptConfig,
    mpc: Option<serde_json::Value>,
    solver: SolverOptions,
    decay: DecayGrid,
    sweep: SweepConfig,
    seed: u64,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub problem: ProblemSpec,
    pub qoi: Qoi,
    pub adapt: AdaptConfig,
    /// `mpc.adapt` always equals `adapt`.
    pub mpc: MpcConfig,
    pub solver: SolverOptions,
    pub decay: DecayGrid,
    pub sweep: SweepConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

fn schema(err: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = err.path().to_string();
    CliError::Config(format!("at `{path}`: {}", err.into_inner()))
}

/// Parses and validates a JSON config. `experiment` comes from the command
/// line; a different value in the file is an error.
pub fn parse_config(text: &str, experiment: Experiment) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(schema)?;
    if let Some(e) = raw.experiment {
        if e != experiment {
            return Err(CliError::Config(format!(
                "config is for experiment `{}` but `{}` was requested",
                e.name(),
                experiment.name()
            )));
        }
    }
    let mpc = match raw.mpc {
        None => MpcConfig::default(),
        Some(v) => {
            if v.get("adapt").is_some() {
                return Err(CliError::Config(
                    "at `mpc.adapt`: refinement settings belong in the top-level `adapt` section".into(),
                ));
            }
            let mpc: MpcConfig = serde_path_to_error::deserialize(v).map_err(|e| {
                let path = e.path().to_string();
                CliError::Config(format!("at `mpc.{path}`: {}", e.into_inner()))
            })?;
            mpc
        }
    };
    let mpc = MpcConfig {
        adapt: raw.adapt,
        ..mpc
    };
    let cfg = RunConfig {
        experiment,
        qoi: raw.qoi.unwrap_or(Qoi::Truncated { tau: mpc.tau }),
        problem: raw.problem,
        adapt: raw.adapt,
        mpc,
        solver: raw.solver,
        decay: raw.decay,
        sweep: raw.sweep,
        seed: raw.seed,
        out_dir: raw.out_dir,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |section: &str, e: mpc_dwr::Error| CliError::Config(format!("in `{section}`: {e}"));
        self.problem.validate().map_err(|e| invalid("problem", e))?;
        self.qoi.validate(self.problem.horizon).map_err(|e| invalid("qoi", e))?;
        self.adapt.validate().map_err(|e| invalid("adapt", e))?;
        if matches!(self.experiment, Experiment::Mpc | Experiment::Sweep) {
            self.mpc.validate(self.problem.horizon).map_err(|e| invalid("mpc", e))?;
        }
        if self.experiment == Experiment::Decay {
            if self.decay.time_slabs == 0 || self.decay.elements == 0 {
                return Err(CliError::Config("in `decay`: grid sizes must be positive".into()));
            }
            if !matches!(self.qoi, Qoi::Truncated { .. }) {
                return Err(CliError::Config(
                    "in `qoi`: the decay experiment needs a truncated QOI".into(),
                ));
            }
        }
        if self.experiment == Experiment::Sweep {
            if self.sweep.budgets.is_empty() {
                return Err(CliError::Config(
                    "in `sweep.budgets`: at least one budget is needed".into(),
                ));
            }
            if let Some(a) = self.sweep.alphas.iter().find(|a| a.is_nan() || **a <= 0.0) {
                return Err(CliError::Config(format!(
                    "in `sweep.alphas`: alpha must be positive, got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Adaptivity settings with `budget` applied to the refined direction.
    pub fn with_budget(&self, budget: usize) -> AdaptConfig {
        match self.adapt.mode {
            AdaptMode::TimeOnly => AdaptConfig {
                max_time_points: budget,
                ..self.adapt
            },
            _ => AdaptConfig {
                max_space_dofs_total: budget,
                ..self.adapt
            },
        }
    }
}
