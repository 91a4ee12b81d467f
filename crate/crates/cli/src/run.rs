//! Command orchestration: build the problem, solve, simulate, write.

use std::path::{Path, PathBuf};
use std::time::Instant;

use covsteer::ira::{classify, ira_solve};
use covsteer::montecarlo::run_monte_carlo;
use covsteer::risk::{RiskAllocation, RISK_FLOOR};
use covsteer::steering::{
    evaluate_cost, solve_lower_stage, true_risk_grid, ControllerSolution, FeedbackPolicy, SteeringProblem,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{to_rows, ProblemConfig, SCHEMA_VERSION};
use crate::report::{write_outputs, IterationRow, MonteCarloSummary, RunReport, StoredPolicy, Timing};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// One lower-stage solve at the uniform allocation.
    Solve,
    /// Full iterative risk allocation.
    Ira,
    /// Rollouts of a stored or freshly allocated controller.
    MonteCarlo,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Ira => "ira",
            Command::MonteCarlo => "montecarlo",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `summary.json` of an earlier run whose controller is simulated.
    pub solution: Option<PathBuf>,
    /// Simulate the uniform-allocation controller instead of the allocated one.
    pub uniform: bool,
}

struct Solved {
    solution: ControllerSolution,
    allocation: DMatrix<f64>,
    trace: Vec<IterationRow>,
    warning: Option<String>,
}

struct Clock {
    timings: Vec<Timing>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            phase: phase.to_string(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

fn single_solve(problem: &SteeringProblem, tol_active: f64) -> Result<Solved, CliError> {
    let allocation = problem.uniform_allocation()?;
    let solution = solve_lower_stage(problem, &allocation)?;
    let active = classify(&allocation, &solution.true_risks, tol_active)?.active_count();
    Ok(Solved {
        trace: vec![IterationRow {
            iteration: 1,
            cost: solution.cost,
            active,
            residual: allocation.budget() - allocation.total(),
        }],
        allocation: allocation.grid().clone(),
        solution,
        warning: None,
    })
}

fn allocated_solve(problem: &SteeringProblem, config: &ProblemConfig) -> Result<Solved, CliError> {
    let outcome = ira_solve(problem, &config.ira_config())?;
    let trace = outcome
        .trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| IterationRow {
            iteration: i + 1,
            cost: r.cost,
            active: r.active,
            residual: r.residual,
        })
        .collect();
    Ok(Solved {
        solution: outcome.solution,
        allocation: outcome.allocation.grid().clone(),
        trace,
        warning: outcome.warning,
    })
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(CliError::Parse(format!("stored {what} does not have shape {shape:?}")));
    }
    Ok(DMatrix::from_row_iterator(
        shape.0,
        shape.1,
        rows.iter().flatten().copied(),
    ))
}

/// Rebuilds a controller from a stored report for the current problem.
fn stored_solve(problem: &SteeringProblem, path: &Path) -> Result<Solved, CliError> {
    let stored = RunReport::load(path)?;
    let cs = problem.system();
    let feedforward = DVector::from_vec(stored.policy.feedforward.clone());
    if feedforward.len() != cs.stacked_inputs() {
        return Err(CliError::Parse(format!(
            "policy.feedforward: stored length {} does not match {}",
            feedforward.len(),
            cs.stacked_inputs()
        )));
    }
    let gain = matrix(&stored.policy.gain, (cs.stacked_inputs(), cs.stacked_states()), "gain")?;
    let shape = (problem.constraints().allocation_rows(), problem.horizon());
    let allocation = RiskAllocation::from_grid(matrix(&stored.allocation, shape, "allocation")?, problem.budget())?;
    let policy = FeedbackPolicy { feedforward, gain };
    let mean_trajectory = cs.propagate_mean(&problem.initial().mean, &policy.feedforward)?;
    let state_covariance = cs.propagate_covariance(&policy.gain)?;
    let true_risks = true_risk_grid(problem, &policy, &mean_trajectory)?;
    let cost = evaluate_cost(problem, &policy.feedforward, &policy.gain)?;
    let status = serde_json::from_value(serde_json::Value::String(stored.status.clone()))
        .map_err(|e| CliError::Parse(format!("status: {e}")))?;
    Ok(Solved {
        solution: ControllerSolution {
            policy,
            cost,
            mean_trajectory,
            state_covariance,
            true_risks,
            status,
            solver_iterations: 0,
        },
        allocation: allocation.grid().clone(),
        trace: stored.cost_trace,
        warning: stored.warning,
    })
}

/// Runs `command` on `config` and writes every output file into `out`.
pub fn run(config: &ProblemConfig, command: Command, out: &Path, options: &RunOptions) -> Result<RunReport, CliError> {
    let mut clock = Clock::new();
    let problem = config.build()?;
    clock.lap("build");

    let solved = match command {
        Command::Solve => single_solve(&problem, config.ira.tol_active)?,
        Command::Ira => allocated_solve(&problem, config)?,
        Command::MonteCarlo => match (&options.solution, options.uniform) {
            (Some(path), _) => stored_solve(&problem, path)?,
            (None, true) => single_solve(&problem, config.ira.tol_active)?,
            (None, false) => allocated_solve(&problem, config)?,
        },
    };
    clock.lap("solve");

    let mut trials = None;
    let montecarlo = if command == Command::MonteCarlo {
        let mc = config.mc_config();
        let report = run_monte_carlo(&problem, &solved.solution.policy, &mc)?;
        let s = report.summary;
        trials = report.trajectories;
        clock.lap("montecarlo");
        Some(MonteCarloSummary {
            family: mc.family,
            trials: s.trials,
            seed: mc.seed,
            joint_violations: s.joint_violations,
            joint_rate: s.joint_rate,
            joint_interval: [s.joint_interval.0, s.joint_interval.1],
            mean_cost: s.mean_cost,
            cost_std_error: s.cost_std_error,
            cell_rates: to_rows(&s.cell_rates),
        })
    } else {
        None
    };

    let sol = &solved.solution;
    let cs = problem.system();
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone(),
        command: command.as_str().to_string(),
        config_sha256: config.digest(),
        notes: config.notes.clone(),
        mode: problem.mode(),
        budget: problem.budget(),
        risk_floor: RISK_FLOOR,
        status: sol.status.to_string(),
        cost: sol.cost,
        cost_trace: solved.trace,
        allocation: to_rows(&solved.allocation),
        true_risks: to_rows(&sol.true_risks),
        policy: StoredPolicy {
            feedforward: sol.policy.feedforward.iter().copied().collect(),
            gain: to_rows(&sol.policy.gain),
        },
        mean_trajectory: (0..=cs.horizon())
            .map(|k| cs.state_block(&sol.mean_trajectory, k).iter().copied().collect())
            .collect(),
        montecarlo,
        solution_source: options.solution.as_ref().map(|p| p.display().to_string()),
        warning: solved.warning,
        timings: Vec::new(),
    };
    report.timings = clock.timings;
    write_outputs(out, &report, trials.as_deref())?;
    Ok(report)
}
