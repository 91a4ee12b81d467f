//! Lower-stage covariance steering program: quadratic cost, mean steering,
//! terminal covariance LMI and tightened state constraints.
//!
//! The feedback enters only through `Z = K L` where `L Lᵀ = Σ_Y` is a thin
//! factor, so the program is posed in `(V, Z)` and `K = Z L⁺` is recovered
//! after the solve. With `causal_feedback` the entries of a block lower
//! triangular `K` become variables tied to `Z` by equality rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cone::{self, SecondOrderConeSet};
use crate::dynamics::{
    build_concatenation, check_psd, symmetrize, ConcatenatedSystem, LinearSystemSpec, MomentPair, PsdFactor,
};
use crate::error::{Error, InfeasibilityReport, Result};
use crate::program::{ConeKind, ConicProgram, LinExpr, SolveStatus, SolverSettings};
use crate::risk::{self, HalfSpace, RiskAllocation, RiskMode};

const FACTOR_TOLERANCE: f64 = 1e-12;
const PD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum ConstraintSet {
    HalfSpaces(Vec<HalfSpace>),
    Cone(SecondOrderConeSet),
}

impl ConstraintSet {
    /// Rows of the risk allocation grid: one per half-space, or a single row
    /// for a cone.
    pub fn allocation_rows(&self) -> usize {
        match self {
            ConstraintSet::HalfSpaces(hs) => hs.len(),
            ConstraintSet::Cone(_) => 1,
        }
    }

    fn state_dim(&self) -> Option<usize> {
        match self {
            ConstraintSet::HalfSpaces(hs) => hs.first().map(|h| h.normal().len()),
            ConstraintSet::Cone(c) => Some(c.state_dim()),
        }
    }
}

/// Raw problem description, validated by [`SteeringProblem::new`].
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub system: LinearSystemSpec,
    pub initial: MomentPair,
    pub terminal: MomentPair,
    /// `Q_k` for `k = 0..N`.
    pub state_cost: Vec<DMatrix<f64>>,
    /// `R_k` for `k = 0..N`.
    pub input_cost: Vec<DMatrix<f64>>,
    pub constraints: ConstraintSet,
    pub budget: f64,
    pub mode: RiskMode,
    pub causal_feedback: bool,
}

#[derive(Debug, Clone)]
pub struct SteeringProblem {
    data: ProblemData,
    cs: ConcatenatedSystem,
    factor: PsdFactor,
    q_bar: DMatrix<f64>,
    r_bar: DMatrix<f64>,
}

impl SteeringProblem {
    pub fn new(data: ProblemData) -> Result<Self> {
        let horizon = data.system.horizon();
        let n = data.system.state_dim();
        let m = data.system.input_dim();
        if !(data.budget > 0.0 && data.budget <= 0.5) {
            return Err(Error::Domain {
                value: data.budget,
                domain: "(0, 0.5]",
            });
        }
        if data.terminal.dim() != n {
            return Err(Error::Dimension(format!(
                "terminal moments have dimension {}, state has {n}",
                data.terminal.dim()
            )));
        }
        if data.state_cost.len() != horizon || data.input_cost.len() != horizon {
            return Err(Error::Dimension(format!(
                "need {horizon} state and input cost blocks, got {} and {}",
                data.state_cost.len(),
                data.input_cost.len()
            )));
        }
        for (k, q) in data.state_cost.iter().enumerate() {
            if q.shape() != (n, n) {
                return Err(Error::StepDimension {
                    step: k,
                    detail: format!("Q is {:?}, expected ({n}, {n})", q.shape()),
                });
            }
            check_psd(q)?;
        }
        for (k, r) in data.input_cost.iter().enumerate() {
            if r.shape() != (m, m) {
                return Err(Error::StepDimension {
                    step: k,
                    detail: format!("R is {:?}, expected ({m}, {m})", r.shape()),
                });
            }
            check_psd(r)?;
            let min = symmetrize(r).symmetric_eigenvalues().min();
            if min <= PD_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "input cost at step {k} is not positive definite (min eigenvalue {min:e})"
                )));
            }
        }
        if let Some(dim) = data.constraints.state_dim() {
            if dim != n {
                return Err(Error::Dimension(format!(
                    "constraints act on dimension {dim}, state has {n}"
                )));
            }
        }

        let cs = build_concatenation(&data.system, &data.initial)?;
        let factor = PsdFactor::new(&cs.sigma_y, FACTOR_TOLERANCE)?;
        let stacked = cs.stacked_states();
        let mut q_bar = DMatrix::zeros(stacked, stacked);
        let mut r_bar = DMatrix::zeros(horizon * m, horizon * m);
        for k in 0..horizon {
            q_bar
                .view_mut((k * n, k * n), (n, n))
                .copy_from(&symmetrize(&data.state_cost[k]));
            r_bar
                .view_mut((k * m, k * m), (m, m))
                .copy_from(&symmetrize(&data.input_cost[k]));
        }
        Ok(Self {
            data,
            cs,
            factor,
            q_bar,
            r_bar,
        })
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    pub fn system(&self) -> &ConcatenatedSystem {
        &self.cs
    }

    pub fn horizon(&self) -> usize {
        self.cs.horizon()
    }

    pub fn mode(&self) -> RiskMode {
        self.data.mode
    }

    pub fn budget(&self) -> f64 {
        self.data.budget
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.data.constraints
    }

    pub fn initial(&self) -> &MomentPair {
        &self.data.initial
    }

    pub fn terminal(&self) -> &MomentPair {
        &self.data.terminal
    }

    /// Block diagonal state weight over the stacked state; the terminal
    /// block is zero.
    pub fn q_bar(&self) -> &DMatrix<f64> {
        &self.q_bar
    }

    pub fn r_bar(&self) -> &DMatrix<f64> {
        &self.r_bar
    }

    pub fn sigma_y_factor(&self) -> &PsdFactor {
        &self.factor
    }

    pub fn with_mode(&self, mode: RiskMode) -> Self {
        let mut p = self.clone();
        p.data.mode = mode;
        p
    }

    pub fn with_budget(&self, budget: f64) -> Result<Self> {
        if !(budget > 0.0 && budget <= 0.5) {
            return Err(Error::Domain {
                value: budget,
                domain: "(0, 0.5]",
            });
        }
        let mut p = self.clone();
        p.data.budget = budget;
        Ok(p)
    }

    pub fn uniform_allocation(&self) -> Result<RiskAllocation> {
        RiskAllocation::uniform(
            self.data.budget,
            self.data.constraints.allocation_rows(),
            self.horizon(),
        )
    }

    fn check_allocation(&self, alloc: &RiskAllocation) -> Result<()> {
        let expected = (self.data.constraints.allocation_rows(), self.horizon());
        if (alloc.rows(), alloc.steps()) != expected {
            return Err(Error::Dimension(format!(
                "allocation grid is {:?}, expected {:?}",
                (alloc.rows(), alloc.steps()),
                expected
            )));
        }
        Ok(())
    }

    fn free_mean(&self) -> DVector<f64> {
        &self.cs.a_cat * &self.data.initial.mean
    }

    /// `ℬᵀQ̄ℬ + R̄`, the Hessian shared by `V` and every column of `Z`.
    fn input_hessian(&self) -> DMatrix<f64> {
        symmetrize(&(self.cs.b_cat.tr_mul(&(&self.q_bar * &self.cs.b_cat)) + &self.r_bar))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub feedforward: DVector<f64>,
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSolution {
    pub policy: FeedbackPolicy,
    pub cost: f64,
    pub mean_trajectory: DVector<f64>,
    pub state_covariance: DMatrix<f64>,
    /// Same shape as the allocation grid.
    pub true_risks: DMatrix<f64>,
    pub status: SolveStatus,
    pub solver_iterations: u32,
}

/// Variable layout of an assembled program and the affine maps from the
/// variables to mean states and deviation directions.
pub struct ProgramContext<'a> {
    problem: &'a SteeringProblem,
    free_mean: DVector<f64>,
    pub v_start: usize,
    pub z_start: usize,
    pub k_layout: Option<CausalLayout>,
}

/// Positions of the free entries of a block lower triangular gain.
#[derive(Debug, Clone)]
pub struct CausalLayout {
    pub start: usize,
    /// `(row, col)` of `K` for each variable, in variable order.
    pub entries: Vec<(usize, usize)>,
}

impl<'a> ProgramContext<'a> {
    fn new(problem: &'a SteeringProblem, program: &mut ConicProgram) -> Self {
        let nm = problem.cs.stacked_inputs();
        let rank = problem.factor.rank();
        let v_start = program.add_variables("V", nm);
        let z_start = program.add_variables("Z", nm * rank);
        let k_layout = problem.data.causal_feedback.then(|| {
            let n = problem.cs.state_dim();
            let m = problem.cs.input_dim();
            let mut entries = Vec::new();
            for row in 0..nm {
                let step = row / m;
                for col in 0..(step + 1) * n {
                    entries.push((row, col));
                }
            }
            let start = program.add_variables("K", entries.len());
            CausalLayout { start, entries }
        });
        Self {
            problem,
            free_mean: problem.free_mean(),
            v_start,
            z_start,
            k_layout,
        }
    }

    pub fn problem(&self) -> &SteeringProblem {
        self.problem
    }

    fn z_index(&self, row: usize, col: usize) -> usize {
        self.z_start + col * self.problem.cs.stacked_inputs() + row
    }

    /// `aᵀ E_k X̄` as an affine expression in `V`.
    pub fn mean_along(&self, direction: &DVector<f64>, k: usize) -> LinExpr {
        let cs = &self.problem.cs;
        let n = cs.state_dim();
        let rows = cs.b_cat.rows(k * n, n);
        let g = rows.tr_mul(direction);
        let mut expr = LinExpr::constant(direction.dot(&self.free_mean.rows(k * n, n)));
        for (j, &c) in g.iter().enumerate() {
            expr.push(self.v_start + j, c);
        }
        expr
    }

    /// `E_k X̄`, one expression per state coordinate.
    pub fn mean_expr(&self, k: usize) -> Vec<LinExpr> {
        let n = self.problem.cs.state_dim();
        (0..n)
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                self.mean_along(&e, k)
            })
            .collect()
    }

    /// `(L + ℬZ)ᵀ E_kᵀ a`, whose norm is the spread of `aᵀx_k`.
    pub fn spread_exprs(&self, direction: &DVector<f64>, k: usize) -> Vec<LinExpr> {
        let cs = &self.problem.cs;
        let n = cs.state_dim();
        let g = cs.b_cat.rows(k * n, n).tr_mul(direction);
        let lt = self.problem.factor.factor.rows(k * n, n).tr_mul(direction);
        (0..self.problem.factor.rank())
            .map(|c| {
                let mut expr = LinExpr::constant(lt[c]);
                for (j, &coef) in g.iter().enumerate() {
                    expr.push(self.z_index(j, c), coef);
                }
                expr
            })
            .collect()
    }

    fn extract(&self, x: &[f64]) -> FeedbackPolicy {
        let cs = &self.problem.cs;
        let nm = cs.stacked_inputs();
        let feedforward = DVector::from_column_slice(&x[self.v_start..self.v_start + nm]);
        let gain = match &self.k_layout {
            Some(layout) => {
                let mut k = DMatrix::zeros(nm, cs.stacked_states());
                for (idx, &(row, col)) in layout.entries.iter().enumerate() {
                    k[(row, col)] = x[layout.start + idx];
                }
                k
            }
            None => {
                let rank = self.problem.factor.rank();
                let z = DMatrix::from_column_slice(nm, rank, &x[self.z_start..self.z_start + nm * rank]);
                z * &self.problem.factor.pseudo_inverse
            }
        };
        FeedbackPolicy { feedforward, gain }
    }
}

/// Builds the lower-stage conic program for `alloc`.
pub fn assemble(problem: &SteeringProblem, alloc: &RiskAllocation) -> Result<ConicProgram> {
    Ok(assemble_with_context(problem, alloc)?.0)
}

fn assemble_with_context<'a>(
    problem: &'a SteeringProblem,
    alloc: &RiskAllocation,
) -> Result<(ConicProgram, ProgramContext<'a>)> {
    problem.check_allocation(alloc)?;
    let mut program = ConicProgram::new();
    let ctx = ProgramContext::new(problem, &mut program);
    let cs = &problem.cs;
    let n = cs.state_dim();
    let nm = cs.stacked_inputs();
    let horizon = cs.horizon();
    let l = &problem.factor.factor;
    let rank = problem.factor.rank();

    let hess = problem.input_hessian();
    let qb = &problem.q_bar;
    let free_mean = &ctx.free_mean;
    let mean_lin = cs.b_cat.tr_mul(&(qb * free_mean)) * 2.0;
    let cov_lin = cs.b_cat.tr_mul(&(qb * l)) * 2.0;
    for a in 0..nm {
        for b in a..nm {
            let h = hess[(a, b)];
            if h == 0.0 {
                continue;
            }
            program.add_quadratic(ctx.v_start + a, ctx.v_start + b, h);
            for c in 0..rank {
                program.add_quadratic(ctx.z_index(a, c), ctx.z_index(b, c), h);
            }
        }
        program.add_linear(ctx.v_start + a, mean_lin[a]);
        for c in 0..rank {
            program.add_linear(ctx.z_index(a, c), cov_lin[(a, c)]);
        }
    }
    program.add_constant(free_mean.dot(&(qb * free_mean)));
    program.add_constant((l.transpose() * qb * l).trace());

    let terminal = problem.terminal();
    let mean_rows: Vec<LinExpr> = ctx
        .mean_expr(horizon)
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.plus(&LinExpr::constant(-terminal.mean[i])))
        .collect();
    program.add_cone(ConeKind::Zero, "terminal mean", mean_rows)?;

    if let Some(layout) = &ctx.k_layout {
        let mut rows = Vec::with_capacity(nm * rank);
        for c in 0..rank {
            for row in 0..nm {
                let mut expr = LinExpr::var(ctx.z_index(row, c));
                for (idx, &(kr, kc)) in layout.entries.iter().enumerate() {
                    if kr == row {
                        expr.push(layout.start + idx, -l[(kc, c)]);
                    }
                }
                rows.push(expr);
            }
        }
        program.add_cone(ConeKind::Zero, "causal gain", rows)?;
    }

    // [[Σ_f, G], [Gᵀ, I]] ⪰ 0 with G = E_N (L + ℬZ).
    let order = n + rank;
    let g_rows: Vec<Vec<LinExpr>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            ctx.spread_exprs(&e, horizon)
        })
        .collect();
    let mut lmi = Vec::with_capacity(order * (order + 1) / 2);
    for col in 0..order {
        #[allow(clippy::needless_range_loop)]
        for row in 0..=col {
            lmi.push(if col < n {
                LinExpr::constant(terminal.cov[(row, col)])
            } else if row < n {
                g_rows[row][col - n].clone()
            } else {
                LinExpr::constant(if row == col { 1.0 } else { 0.0 })
            });
        }
    }
    program.add_cone(ConeKind::Psd(order), "terminal covariance", lmi)?;

    match &problem.data.constraints {
        ConstraintSet::HalfSpaces(halfspaces) => {
            for k in 1..=horizon {
                for (i, hs) in halfspaces.iter().enumerate() {
                    let q = risk::quantile(problem.mode(), alloc.get(i, k))?;
                    let mut rows = vec![ctx
                        .mean_along(hs.normal(), k)
                        .scaled(-1.0)
                        .plus(&LinExpr::constant(hs.offset()))];
                    rows.extend(ctx.spread_exprs(hs.normal(), k).into_iter().map(|e| e.scaled(q)));
                    program.add_cone(ConeKind::SecondOrder, format!("halfspace {i} step {k}"), rows)?;
                }
            }
        }
        ConstraintSet::Cone(set) => {
            let deltas = alloc.step_risks();
            let params = cone::default_params(set, &deltas)?;
            cone::emit_cone_rows(set, &params, &ctx, &mut program)?;
        }
    }
    Ok((program, ctx))
}

pub fn solve_lower_stage(problem: &SteeringProblem, alloc: &RiskAllocation) -> Result<ControllerSolution> {
    solve_lower_stage_with(problem, alloc, &SolverSettings::default())
}

pub fn solve_lower_stage_with(
    problem: &SteeringProblem,
    alloc: &RiskAllocation,
    settings: &SolverSettings,
) -> Result<ControllerSolution> {
    let (program, ctx) = assemble_with_context(problem, alloc)?;
    let sol = program.solve(settings)?;
    if sol.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible(diagnose(problem, alloc, &sol.solver_status)?));
    }
    let policy = ctx.extract(&sol.x);
    let cs = &problem.cs;
    let mean_trajectory = cs.propagate_mean(&problem.initial().mean, &policy.feedforward)?;
    let state_covariance = cs.propagate_covariance(&policy.gain)?;
    let true_risks = true_risk_grid(problem, &policy, &mean_trajectory)?;
    let cost = evaluate_cost(problem, &policy.feedforward, &policy.gain)?;
    Ok(ControllerSolution {
        policy,
        cost,
        mean_trajectory,
        state_covariance,
        true_risks,
        status: sol.status,
        solver_iterations: sol.iterations,
    })
}

/// True risk of every allocation cell at a fixed policy.
pub fn true_risk_grid(
    problem: &SteeringProblem,
    policy: &FeedbackPolicy,
    mean_trajectory: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let cs = &problem.cs;
    let horizon = cs.horizon();
    match &problem.data.constraints {
        ConstraintSet::HalfSpaces(halfspaces) => {
            let mut grid = DMatrix::zeros(halfspaces.len(), horizon);
            for k in 1..=horizon {
                let x = cs.state_block(mean_trajectory, k);
                for (i, hs) in halfspaces.iter().enumerate() {
                    let sigma = risk::spread(hs.normal(), cs, &policy.gain, k)?;
                    let slack = hs.slack(&x);
                    if slack < -slack_tolerance(hs.offset()) {
                        return Err(Error::InfeasibleMean {
                            constraint: i,
                            step: k,
                            slack,
                        });
                    }
                    grid[(i, k - 1)] = risk::risk_from_margin(slack.max(0.0), sigma, problem.mode())?;
                }
            }
            Ok(grid)
        }
        ConstraintSet::Cone(set) => {
            let risks = cone::true_step_risks(set, cs, mean_trajectory, &policy.gain)?;
            Ok(DMatrix::from_row_slice(1, horizon, &risks))
        }
    }
}

fn slack_tolerance(scale: f64) -> f64 {
    1e-7 * (1.0 + scale.abs())
}

/// Margin of every tightened constraint at a fixed policy: slack minus
/// offset for half-spaces, `κ_k − ‖f_k‖` at the smallest feasible `f` for
/// cones. Nonnegative everywhere iff the policy is feasible for `alloc`.
pub fn constraint_margins(
    problem: &SteeringProblem,
    alloc: &RiskAllocation,
    policy: &FeedbackPolicy,
) -> Result<DMatrix<f64>> {
    problem.check_allocation(alloc)?;
    let cs = &problem.cs;
    let horizon = cs.horizon();
    let mean = cs.propagate_mean(&problem.initial().mean, &policy.feedforward)?;
    match &problem.data.constraints {
        ConstraintSet::HalfSpaces(halfspaces) => {
            let mut grid = DMatrix::zeros(halfspaces.len(), horizon);
            for k in 1..=horizon {
                let x = cs.state_block(&mean, k);
                for (i, hs) in halfspaces.iter().enumerate() {
                    let offset = risk::tightening_offset(hs, cs, &policy.gain, k, alloc.get(i, k), problem.mode())?;
                    grid[(i, k - 1)] = hs.slack(&x) - offset;
                }
            }
            Ok(grid)
        }
        ConstraintSet::Cone(set) => {
            let mut grid = DMatrix::zeros(1, horizon);
            for k in 1..=horizon {
                grid[(0, k - 1)] = cone::step_margin(set, cs, &mean, &policy.gain, k, alloc.get(0, k))?;
            }
            Ok(grid)
        }
    }
}

/// Expected quadratic cost of the policy `U = V + K Y`.
pub fn evaluate_cost(problem: &SteeringProblem, feedforward: &DVector<f64>, gain: &DMatrix<f64>) -> Result<f64> {
    let (mean, cov) = cost_components(problem, feedforward, gain)?;
    Ok(mean + cov)
}

/// `(J_μ, J_Σ)`: the part driven by the mean and the part driven by the
/// covariance. `J_μ` ignores `K` and `J_Σ` ignores `V`.
pub fn cost_components(
    problem: &SteeringProblem,
    feedforward: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let cs = &problem.cs;
    let mean = cs.propagate_mean(&problem.initial().mean, feedforward)?;
    let sigma_x = cs.propagate_covariance(gain)?;
    let qb = &problem.q_bar;
    let rb = &problem.r_bar;
    let j_mu = mean.dot(&(qb * &mean)) + feedforward.dot(&(rb * feedforward));
    let j_sigma = (qb * sigma_x).trace() + (rb * gain * &cs.sigma_y * gain.transpose()).trace();
    Ok((j_mu, j_sigma))
}

/// Locates the tightest constraint at the minimum-norm feedforward that
/// meets the terminal mean, with zero feedback.
fn diagnose(problem: &SteeringProblem, alloc: &RiskAllocation, status: &str) -> Result<InfeasibilityReport> {
    let cs = &problem.cs;
    let horizon = cs.horizon();
    let n = cs.state_dim();
    let reach = cs.b_cat.rows(horizon * n, n).into_owned();
    let target = &problem.terminal().mean - cs.a_cat.rows(horizon * n, n) * &problem.initial().mean;
    let feedforward = reach.pseudo_inverse(1e-12).map_err(|e| Error::Logic(e.to_string()))? * target;
    let gain = DMatrix::zeros(cs.stacked_inputs(), cs.stacked_states());
    let mean = cs.propagate_mean(&problem.initial().mean, &feedforward)?;
    let mut worst: Option<InfeasibilityReport> = None;
    let mut consider = |constraint: usize, step: usize, required: f64, available: f64| {
        let report = InfeasibilityReport {
            solver_status: status.to_string(),
            constraint,
            step,
            required_offset: required,
            available_slack: available,
        };
        if worst.as_ref().is_none_or(|w| report.violation() > w.violation()) {
            worst = Some(report);
        }
    };
    match &problem.data.constraints {
        ConstraintSet::HalfSpaces(halfspaces) => {
            for k in 1..=horizon {
                let x = cs.state_block(&mean, k);
                for (i, hs) in halfspaces.iter().enumerate() {
                    let offset = risk::tightening_offset(hs, cs, &gain, k, alloc.get(i, k), problem.mode())?;
                    consider(i, k, offset, hs.slack(&x));
                }
            }
        }
        ConstraintSet::Cone(set) => {
            for k in 1..=horizon {
                let (required, available) = cone::step_requirement(set, cs, &mean, &gain, k, alloc.get(0, k))?;
                consider(0, k, required, available);
            }
        }
    }
    Ok(worst.unwrap_or(InfeasibilityReport {
        solver_status: status.to_string(),
        constraint: 0,
        step: horizon,
        required_offset: 0.0,
        available_slack: 0.0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_problem(constraints: ConstraintSet) -> SteeringProblem {
        let system =
            LinearSystemSpec::time_invariant(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 1).unwrap();
        let initial = MomentPair::new(dvector![0.0], dmatrix![1.0]).unwrap();
        // Σ_Y terminal block is 2.
        let terminal = MomentPair::new(dvector![0.0], dmatrix![200.0]).unwrap();
        SteeringProblem::new(ProblemData {
            system,
            initial,
            terminal,
            state_cost: vec![dmatrix![0.0]],
            input_cost: vec![dmatrix![1.0]],
            constraints,
            budget: 0.1,
            mode: RiskMode::Dr,
            causal_feedback: false,
        })
        .unwrap()
    }

    #[test]
    fn structural_counts_without_constraints() {
        let p = scalar_problem(ConstraintSet::HalfSpaces(vec![]));
        let alloc = p.uniform_allocation().unwrap();
        let prog = assemble(&p, &alloc).unwrap();
        assert_eq!(prog.soc_count(), 0);
        assert_eq!(prog.psd_count(), 1);
        assert_eq!(prog.equality_rows(), 1);
    }

    #[test]
    fn cost_free_origin_is_optimal() {
        let p = scalar_problem(ConstraintSet::HalfSpaces(vec![]));
        let alloc = p.uniform_allocation().unwrap();
        let sol = solve_lower_stage(&p, &alloc).unwrap();
        assert!(sol.cost.abs() < 1e-7, "cost {}", sol.cost);
        assert!(sol.policy.feedforward.amax() < 1e-5);
        assert!(sol.policy.gain.amax() < 1e-3);
        assert_eq!(sol.true_risks.nrows(), 0);
    }

    #[test]
    fn control_only_cost_when_state_weight_is_zero() {
        let p = scalar_problem(ConstraintSet::HalfSpaces(vec![]));
        let v = dvector![0.7];
        let k = dmatrix![0.3, -0.2];
        let (j_mu, j_sigma) = cost_components(&p, &v, &k).unwrap();
        assert!((j_mu - 0.49).abs() < 1e-12);
        let ks = &k * &p.system().sigma_y * k.transpose();
        assert!((j_sigma - ks[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_budget_and_costs() {
        let mut data = scalar_problem(ConstraintSet::HalfSpaces(vec![])).data().clone();
        data.budget = 0.6;
        assert!(matches!(SteeringProblem::new(data.clone()), Err(Error::Domain { .. })));
        data.budget = 0.1;
        data.input_cost = vec![dmatrix![0.0]];
        assert!(SteeringProblem::new(data.clone()).is_err());
        data.input_cost = vec![dmatrix![1.0], dmatrix![1.0]];
        assert!(matches!(SteeringProblem::new(data), Err(Error::Dimension(_))));
    }

    #[test]
    fn allocation_shape_is_checked() {
        let hs = HalfSpace::new(dvector![1.0], 5.0).unwrap();
        let p = scalar_problem(ConstraintSet::HalfSpaces(vec![hs]));
        let wrong = RiskAllocation::uniform(0.1, 2, 1).unwrap();
        assert!(matches!(assemble(&p, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn unreachable_bound_reports_tightest_cell() {
        // x_1 ≤ -5 with zero terminal mean cannot hold.
        let hs = HalfSpace::new(dvector![1.0], -5.0).unwrap();
        let p = scalar_problem(ConstraintSet::HalfSpaces(vec![hs]));
        let alloc = p.uniform_allocation().unwrap();
        match solve_lower_stage(&p, &alloc) {
            Err(Error::Infeasible(report)) => {
                assert_eq!((report.constraint, report.step), (0, 1));
                assert!(report.violation() > 5.0);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }
}
