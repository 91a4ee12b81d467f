//! Solver-neutral conic program container and the adapter to the Clarabel
//! interior-point solver.
//!
//! A program minimizes `xᵀHx + cᵀx + c₀` subject to affine expressions lying in
//! zero, nonnegative, second-order or PSD cones. `H` is stored as symmetric
//! upper-triangle entries.

use std::fmt;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use crate::error::{Error, Result, SolverDiagnostic};

/// `Σ coefᵢ·x[idxᵢ] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(value: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: value,
        }
    }

    pub fn var(index: usize) -> Self {
        Self {
            terms: vec![(index, 1.0)],
            constant: 0.0,
        }
    }

    pub fn push(&mut self, index: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((index, coef));
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= factor;
        }
        self.constant *= factor;
        self
    }

    pub fn plus(mut self, other: &LinExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Every row equals zero.
    Zero,
    /// Every row is nonnegative.
    NonNegative,
    /// `rows[0] ≥ ‖rows[1..]‖₂`.
    SecondOrder,
    /// Symmetric matrix of the given order, rows holding the upper triangle
    /// column by column (unscaled).
    Psd(usize),
}

#[derive(Debug, Clone)]
pub struct ConeBlock {
    pub kind: ConeKind,
    pub label: String,
    pub rows: Vec<LinExpr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    num_vars: usize,
    blocks: Vec<VarBlock>,
    quadratic: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    cones: Vec<ConeBlock>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `len` fresh variables and returns the index of the first.
    pub fn add_variables(&mut self, name: &str, len: usize) -> usize {
        let start = self.num_vars;
        self.num_vars += len;
        self.linear.resize(self.num_vars, 0.0);
        self.blocks.push(VarBlock {
            name: name.to_string(),
            start,
            len,
        });
        start
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn variable_blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Adds `value` to the symmetric quadratic form at `(i, j)` and `(j, i)`.
    /// Only call with `i <= j`; off-diagonal entries count twice in `xᵀHx`.
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i <= j && j < self.num_vars);
        if value != 0.0 {
            self.quadratic.push((i, j, value));
        }
    }

    pub fn add_linear(&mut self, i: usize, value: f64) {
        self.linear[i] += value;
    }

    pub fn add_constant(&mut self, value: f64) {
        self.constant += value;
    }

    pub fn add_cone(&mut self, kind: ConeKind, label: impl Into<String>, rows: Vec<LinExpr>) -> Result<()> {
        let label = label.into();
        match kind {
            ConeKind::SecondOrder if rows.is_empty() => {
                return Err(Error::Invalid(format!("second-order cone {label} has no rows")))
            }
            ConeKind::Psd(order) if rows.len() != order * (order + 1) / 2 => {
                return Err(Error::Invalid(format!(
                    "PSD block {label} of order {order} needs {} rows, got {}",
                    order * (order + 1) / 2,
                    rows.len()
                )))
            }
            _ => {}
        }
        for row in &rows {
            if let Some(&(i, _)) = row.terms.iter().find(|t| t.0 >= self.num_vars) {
                return Err(Error::Invalid(format!(
                    "cone {label} references variable {i} of {}",
                    self.num_vars
                )));
            }
        }
        self.cones.push(ConeBlock { kind, label, rows });
        Ok(())
    }

    pub fn cones(&self) -> &[ConeBlock] {
        &self.cones
    }

    pub fn count(&self, kind: fn(&ConeKind) -> bool) -> usize {
        self.cones.iter().filter(|c| kind(&c.kind)).count()
    }

    pub fn soc_count(&self) -> usize {
        self.count(|k| matches!(k, ConeKind::SecondOrder))
    }

    pub fn psd_count(&self) -> usize {
        self.count(|k| matches!(k, ConeKind::Psd(_)))
    }

    /// Number of scalar equality rows.
    pub fn equality_rows(&self) -> usize {
        self.cones
            .iter()
            .filter(|c| c.kind == ConeKind::Zero)
            .map(|c| c.rows.len())
            .sum()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad: f64 = self
            .quadratic
            .iter()
            .map(|&(i, j, v)| if i == j { v * x[i] * x[i] } else { 2.0 * v * x[i] * x[j] })
            .sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(c, v)| c * v).sum();
        quad + lin + self.constant
    }

    /// Smallest cone margin at `x`: the minimum row for zero cones is
    /// `-|row|`, for SOC `head - ‖tail‖`, for PSD the minimum eigenvalue.
    pub fn min_margin(&self, x: &[f64]) -> f64 {
        self.cones
            .iter()
            .map(|c| cone_margin(c, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Human-readable listing of variables, objective and every cone row.
    pub fn dump(&self) -> String {
        self.to_string()
    }

    /// Largest objective coefficient, at least 1. The solver sees the
    /// objective divided by this.
    fn cost_scale(&self) -> f64 {
        self.quadratic
            .iter()
            .map(|&(_, _, v)| 2.0 * v.abs())
            .chain(self.linear.iter().map(|v| v.abs()))
            .fold(1.0, f64::max)
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<ConicSolution> {
        let n = self.num_vars;
        let cost_scale = self.cost_scale();
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for &(i, j, v) in &self.quadratic {
            pi.push(i);
            pj.push(j);
            pv.push(2.0 * v / cost_scale);
        }
        let linear: Vec<f64> = self.linear.iter().map(|v| v / cost_scale).collect();
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0;
        for cone in &self.cones {
            let start_row = row;
            match cone.kind {
                ConeKind::Psd(order) => {
                    // Clarabel expects the upper triangle scaled by √2 off the diagonal.
                    let mut idx = 0;
                    for col in 0..order {
                        for r in 0..=col {
                            let scale = if r == col { 1.0 } else { std::f64::consts::SQRT_2 };
                            push_row(&cone.rows[idx], scale, row, &mut ai, &mut aj, &mut av, &mut b);
                            row += 1;
                            idx += 1;
                        }
                    }
                }
                _ => {
                    for expr in &cone.rows {
                        push_row(expr, 1.0, row, &mut ai, &mut aj, &mut av, &mut b);
                        row += 1;
                    }
                }
            }
            let dim = row - start_row;
            cones.push(match cone.kind {
                ConeKind::Zero => SupportedConeT::ZeroConeT(dim),
                ConeKind::NonNegative => SupportedConeT::NonnegativeConeT(dim),
                ConeKind::SecondOrder => SupportedConeT::SecondOrderConeT(dim),
                ConeKind::Psd(order) => SupportedConeT::PSDTriangleConeT(order),
            });
        }
        let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);

        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iterations)
            .tol_feas(settings.tolerance)
            .tol_gap_abs(settings.tolerance)
            .tol_gap_rel(settings.tolerance)
            .reduced_tol_feas(settings.accepted_tolerance)
            .reduced_tol_gap_abs(settings.accepted_tolerance)
            .reduced_tol_gap_rel(settings.accepted_tolerance)
            .build()
            .map_err(|e| Error::Invalid(format!("solver settings: {e}")))?;
        let mut solver = DefaultSolver::new(&p, &linear, &a, &b, &cones, clarabel_settings)
            .map_err(|e| Error::Invalid(format!("solver setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            _ => {
                return Err(Error::Solver(SolverDiagnostic {
                    status: format!("{:?}", sol.status),
                    iterations: sol.iterations,
                    primal_residual: sol.r_prim,
                    dual_residual: sol.r_dual,
                }))
            }
        };
        Ok(ConicSolution {
            status,
            objective: self.objective(&sol.x),
            x: sol.x.clone(),
            iterations: sol.iterations,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            solver_status: format!("{:?}", sol.status),
        })
    }
}

fn push_row(
    expr: &LinExpr,
    scale: f64,
    row: usize,
    ai: &mut Vec<usize>,
    aj: &mut Vec<usize>,
    av: &mut Vec<f64>,
    b: &mut Vec<f64>,
) {
    // expr ∈ K is encoded as s = b - A x with A = -coef, b = constant.
    for &(j, c) in &expr.terms {
        ai.push(row);
        aj.push(j);
        av.push(-c * scale);
    }
    b.push(expr.constant * scale);
}

fn cone_margin(cone: &ConeBlock, x: &[f64]) -> f64 {
    let vals: Vec<f64> = cone.rows.iter().map(|r| r.eval(x)).collect();
    match cone.kind {
        ConeKind::Zero => -vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        ConeKind::NonNegative => vals.iter().copied().fold(f64::INFINITY, f64::min),
        ConeKind::SecondOrder => vals[0] - vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt(),
        ConeKind::Psd(order) => {
            let mut m = nalgebra::DMatrix::zeros(order, order);
            let mut idx = 0;
            for col in 0..order {
                for r in 0..=col {
                    m[(r, col)] = vals[idx];
                    m[(col, r)] = vals[idx];
                    idx += 1;
                }
            }
            m.symmetric_eigenvalues().min()
        }
    }
}

impl fmt::Display for ConicProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variables: {}", self.num_vars)?;
        for b in &self.blocks {
            writeln!(f, "  {} [{}..{})", b.name, b.start, b.start + b.len)?;
        }
        writeln!(
            f,
            "objective: {} quadratic entries, {} linear entries, constant {:e}",
            self.quadratic.len(),
            self.linear.iter().filter(|v| **v != 0.0).count(),
            self.constant
        )?;
        for cone in &self.cones {
            let kind = match cone.kind {
                ConeKind::Zero => "zero".to_string(),
                ConeKind::NonNegative => "nonneg".to_string(),
                ConeKind::SecondOrder => "soc".to_string(),
                ConeKind::Psd(order) => format!("psd({order})"),
            };
            writeln!(f, "cone {kind} {} ({} rows)", cone.label, cone.rows.len())?;
            for (r, expr) in cone.rows.iter().enumerate() {
                write!(f, "  [{r}] {:e}", expr.constant)?;
                for &(i, c) in &expr.terms {
                    write!(f, " {c:+e}*x{i}")?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub accepted_tolerance: f64,
    pub max_iterations: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            accepted_tolerance: 1e-6,
            max_iterations: 200,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Converged to the accepted (reduced) tolerance only.
    NearOptimal,
    Infeasible,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::NearOptimal => "near_optimal",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub solver_status: String,
}
