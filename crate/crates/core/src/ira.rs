//! Iterative risk allocation: alternate lower-stage solves with moving
//! unused risk from slack constraints to the ones that bind.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::{RiskAllocation, RISK_FLOOR};
use crate::steering::{constraint_margins, solve_lower_stage, ControllerSolution, SteeringProblem};

const INCUMBENT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IraConfig {
    pub rho: f64,
    /// Absolute cost change that ends the loop. `None` means
    /// `1e-4 · max(1, |J₁|)`.
    pub cost_tolerance: Option<f64>,
    pub tol_active: f64,
    pub max_iterations: usize,
}

impl Default for IraConfig {
    fn default() -> Self {
        Self {
            rho: 0.7,
            cost_tolerance: None,
            tol_active: 1e-3,
            max_iterations: 30,
        }
    }
}

impl IraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Domain {
                value: self.rho,
                domain: "(0, 1)",
            });
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("at least one iteration is required".into()));
        }
        if self.tol_active.is_nan() || self.tol_active <= 0.0 {
            return Err(Error::Invalid(format!(
                "activity tolerance must be positive, got {}",
                self.tol_active
            )));
        }
        if let Some(tol) = self.cost_tolerance {
            if tol.is_nan() || tol <= 0.0 {
                return Err(Error::Invalid(format!("cost tolerance must be positive, got {tol}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IraRecord {
    pub allocation: DMatrix<f64>,
    pub true_risks: DMatrix<f64>,
    pub cost: f64,
    pub active: usize,
    /// Budget left after tightening, before it is handed to active cells.
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IraTrace {
    pub records: Vec<IraRecord>,
}

impl IraTrace {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// `(row, step)` with 1-based steps.
    pub active: Vec<(usize, usize)>,
    pub inactive: Vec<(usize, usize)>,
}

impl Partition {
    pub fn active_count(&self) -> usize {
        self.active.len()
    }
}

/// A cell is active when its allocated risk is (almost) all used.
pub fn classify(alloc: &RiskAllocation, true_risks: &DMatrix<f64>, tol_active: f64) -> Result<Partition> {
    if true_risks.shape() != alloc.grid().shape() {
        return Err(Error::Dimension(format!(
            "true risks are {:?}, allocation is {:?}",
            true_risks.shape(),
            alloc.grid().shape()
        )));
    }
    let mut active = Vec::new();
    let mut inactive = Vec::new();
    for k in 1..=alloc.steps() {
        for i in 0..alloc.rows() {
            let delta = alloc.get(i, k);
            if delta - true_risks[(i, k - 1)] <= tol_active * delta {
                active.push((i, k));
            } else {
                inactive.push((i, k));
            }
        }
    }
    Ok(Partition { active, inactive })
}

/// Moves every inactive cell toward its true risk, never below the floor.
pub fn tighten_inactive(
    alloc: &RiskAllocation,
    true_risks: &DMatrix<f64>,
    rho: f64,
    partition: &Partition,
) -> Result<RiskAllocation> {
    let mut grid = alloc.grid().clone();
    for &(i, k) in &partition.inactive {
        let old = grid[(i, k - 1)];
        let blended = rho * old + (1.0 - rho) * true_risks[(i, k - 1)];
        grid[(i, k - 1)] = blended.min(old).max(RISK_FLOOR);
    }
    RiskAllocation::from_grid(grid, alloc.budget())
}

/// Spreads the unused budget evenly over the active cells.
pub fn redistribute(alloc: &RiskAllocation, partition: &Partition) -> Result<RiskAllocation> {
    let count = partition.active_count();
    if count == 0 {
        return Err(Error::Logic(
            "no active constraints to receive the residual budget".into(),
        ));
    }
    let residual = alloc.budget() - alloc.total();
    if residual < -1e-12 {
        return Err(Error::Logic(format!(
            "allocation overspends the budget by {}",
            -residual
        )));
    }
    let share = residual / count as f64;
    let mut grid = alloc.grid().clone();
    for &(i, k) in &partition.active {
        grid[(i, k - 1)] += share;
    }
    RiskAllocation::from_grid(grid, alloc.budget())
}

#[derive(Debug, Clone)]
pub struct IraOutcome {
    pub solution: ControllerSolution,
    pub allocation: RiskAllocation,
    pub trace: IraTrace,
    /// Set when a reallocated program failed and the loop fell back to the
    /// previous allocation.
    pub warning: Option<String>,
}

pub fn ira_solve(problem: &SteeringProblem, config: &IraConfig) -> Result<IraOutcome> {
    config.validate()?;
    let mut allocation = problem.uniform_allocation()?;
    let mut solution = solve_lower_stage(problem, &allocation)?;
    let tolerance = config.cost_tolerance.unwrap_or(1e-4 * solution.cost.abs().max(1.0));
    let cells = allocation.rows() * allocation.steps();
    let mut trace = IraTrace::default();
    let mut warning = None;
    let mut previous_cost: Option<f64> = None;

    for iteration in 1..=config.max_iterations {
        let partition = classify(&allocation, &solution.true_risks, config.tol_active)?;
        let active = partition.active_count();
        let mut record = IraRecord {
            allocation: allocation.grid().clone(),
            true_risks: solution.true_risks.clone(),
            cost: solution.cost,
            active,
            residual: allocation.budget() - allocation.total(),
        };
        let converged = previous_cost.is_some_and(|prev| (solution.cost - prev).abs() <= tolerance);
        if cells == 0 || active == 0 || active == cells || converged || iteration == config.max_iterations {
            trace.records.push(record);
            break;
        }

        let tightened = tighten_inactive(&allocation, &solution.true_risks, config.rho, &partition)?;
        record.residual = tightened.budget() - tightened.total();
        trace.records.push(record);
        let next_allocation = redistribute(&tightened, &partition)?;

        let candidate = match solve_lower_stage(problem, &next_allocation) {
            Ok(c) => c,
            Err(Error::Infeasible(report)) => {
                warning = Some(format!(
                    "reallocated program infeasible at iteration {}; kept the previous allocation ({report})",
                    iteration + 1
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        previous_cost = Some(solution.cost);
        // A solve that lands above the incumbent while the incumbent still
        // fits the new allocation is solver noise; keep the incumbent.
        let keep_incumbent = candidate.cost > solution.cost
            && constraint_margins(problem, &next_allocation, &solution.policy)?.min() >= -INCUMBENT_TOLERANCE;
        if !keep_incumbent {
            solution = candidate;
        }
        allocation = next_allocation;
    }

    Ok(IraOutcome {
        solution,
        allocation,
        trace,
        warning,
    })
}
