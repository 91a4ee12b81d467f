//! Distributionally robust second-order-cone state constraints
//! `‖A x + b‖₂ ≤ cᵀx + d`, split per row into a pair of one-sided tightened
//! SOC rows coupled through auxiliary bounds `f_{i,k}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ConcatenatedSystem;
use crate::error::{Error, Result};
use crate::program::{ConeKind, ConicProgram, LinExpr};
use crate::risk::{self, RISK_FLOOR};
use crate::steering::ProgramContext;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderConeSet {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    d: f64,
}

impl SecondOrderConeSet {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64) -> Result<Self> {
        let (p, n) = a.shape();
        if p == 0 {
            return Err(Error::Invalid("cone needs at least one row".into()));
        }
        if b.len() != p || c.len() != n {
            return Err(Error::Dimension(format!(
                "cone A is {p}x{n} but b has length {} and c has length {}",
                b.len(),
                c.len()
            )));
        }
        if let Some(i) = (0..p).find(|&i| a.row(i).amax() == 0.0) {
            return Err(Error::Invalid(format!("cone row {i} of A is zero")));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    fn row(&self, i: usize) -> DVector<f64> {
        self.a.row(i).transpose()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (&self.a * x + &self.b).norm() <= self.c.dot(x) + self.d
    }
}

/// Row weights `β_i` and the per-side risks `ε¹_{i,k}`, `ε²_{i,k}`
/// (rows are cone rows, columns are steps `1..=N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConeDecompositionParams {
    pub weights: Vec<f64>,
    pub upper: DMatrix<f64>,
    pub lower: DMatrix<f64>,
}

impl ConeDecompositionParams {
    fn coefficient(eps: f64) -> f64 {
        (eps / (1.0 - eps)).sqrt()
    }

    pub fn upper_coefficient(&self, i: usize, k: usize) -> f64 {
        Self::coefficient(self.upper[(i, k - 1)])
    }

    pub fn lower_coefficient(&self, i: usize, k: usize) -> f64 {
        Self::coefficient(self.lower[(i, k - 1)])
    }
}

fn side_risk(weight: f64, delta: f64) -> f64 {
    1.0 - weight * delta / 2.0
}

/// Uniform weights with both sides at `1 − β_i δ_k / 2`.
pub fn default_params(set: &SecondOrderConeSet, deltas: &[f64]) -> Result<ConeDecompositionParams> {
    for &delta in deltas {
        if !(RISK_FLOOR * (1.0 - 1e-9)..=0.5).contains(&delta) {
            return Err(Error::Domain {
                value: delta,
                domain: "[1e-6, 0.5]",
            });
        }
    }
    let p = set.rows();
    let weights = vec![1.0 / p as f64; p];
    let eps = DMatrix::from_fn(p, deltas.len(), |i, k| side_risk(weights[i], deltas[k]));
    Ok(ConeDecompositionParams {
        weights,
        upper: eps.clone(),
        lower: eps,
    })
}

/// Adds the bound variables `f`, the two one-sided rows per cone row and
/// step, the per-step norm coupling and `f ≥ 0`. Returns the number of SOC
/// rows added.
pub fn emit_cone_rows(
    set: &SecondOrderConeSet,
    params: &ConeDecompositionParams,
    ctx: &ProgramContext<'_>,
    program: &mut ConicProgram,
) -> Result<usize> {
    let horizon = ctx.problem().horizon();
    let p = set.rows();
    if set.state_dim() != ctx.problem().system().state_dim() {
        return Err(Error::Dimension(format!(
            "cone acts on dimension {}, state has {}",
            set.state_dim(),
            ctx.problem().system().state_dim()
        )));
    }
    if params.upper.shape() != (p, horizon) || params.lower.shape() != (p, horizon) {
        return Err(Error::Dimension(format!(
            "side risks are {:?}, expected {:?}",
            params.upper.shape(),
            (p, horizon)
        )));
    }
    let f_start = program.add_variables("f", p * horizon);
    let f = |i: usize, k: usize| f_start + (k - 1) * p + i;
    let before = program.soc_count();
    for k in 1..=horizon {
        for i in 0..p {
            let row = set.row(i);
            let psi = ctx.mean_along(&row, k).plus(&LinExpr::constant(set.b[i]));
            let spread = ctx.spread_exprs(&row, k);

            let mut head = LinExpr::var(f(i, k)).plus(&psi.clone().scaled(-1.0));
            let mut rows = vec![head];
            let coef = params.upper_coefficient(i, k);
            rows.extend(spread.iter().map(|e| e.clone().scaled(coef)));
            program.add_cone(ConeKind::SecondOrder, format!("cone row {i} step {k} upper"), rows)?;

            head = LinExpr::var(f(i, k)).plus(&psi);
            rows = vec![head];
            let coef = params.lower_coefficient(i, k);
            rows.extend(spread.into_iter().map(|e| e.scaled(coef)));
            program.add_cone(ConeKind::SecondOrder, format!("cone row {i} step {k} lower"), rows)?;
        }
        let mut rows = vec![ctx.mean_along(&set.c, k).plus(&LinExpr::constant(set.d))];
        rows.extend((0..p).map(|i| LinExpr::var(f(i, k))));
        program.add_cone(ConeKind::SecondOrder, format!("cone coupling step {k}"), rows)?;
    }
    program.add_cone(
        ConeKind::NonNegative,
        "cone bounds",
        (0..p * horizon).map(|j| LinExpr::var(f_start + j)).collect(),
    )?;
    Ok(program.soc_count() - before)
}

/// `(‖f_k‖, κ_k)` at the smallest `f` satisfying both one-sided rows of
/// every cone row at step `k` with risk `delta`.
pub fn step_requirement(
    set: &SecondOrderConeSet,
    cs: &ConcatenatedSystem,
    mean: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
    delta: f64,
) -> Result<(f64, f64)> {
    let stats = StepStats::new(set, cs, mean, gain, k)?;
    Ok((stats.required(delta), stats.kappa))
}

/// `κ_k − ‖f_k‖` at the smallest feasible `f`.
pub fn step_margin(
    set: &SecondOrderConeSet,
    cs: &ConcatenatedSystem,
    mean: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
    delta: f64,
) -> Result<f64> {
    let (required, available) = step_requirement(set, cs, mean, gain, k, delta)?;
    Ok(available - required)
}

struct StepStats {
    abs_psi: Vec<f64>,
    sigma: Vec<f64>,
    kappa: f64,
}

impl StepStats {
    fn new(
        set: &SecondOrderConeSet,
        cs: &ConcatenatedSystem,
        mean: &DVector<f64>,
        gain: &DMatrix<f64>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k > cs.horizon() {
            return Err(Error::Invalid(format!(
                "constraints apply on steps 1..={}, got {k}",
                cs.horizon()
            )));
        }
        let x = cs.state_block(mean, k);
        let psi = set.a() * &x + set.b();
        let sigma = (0..set.rows())
            .map(|i| risk::spread(&set.row(i), cs, gain, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            abs_psi: psi.iter().map(|v| v.abs()).collect(),
            sigma,
            kappa: set.c().dot(&x) + set.d(),
        })
    }

    fn required(&self, delta: f64) -> f64 {
        let weight = 1.0 / self.sigma.len() as f64;
        let coef = ConeDecompositionParams::coefficient(side_risk(weight, delta));
        self.abs_psi
            .iter()
            .zip(&self.sigma)
            .map(|(p, s)| (p + coef * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-step true-risk proxy: the smallest `δ_k` for which the emitted rows
/// stay feasible at the fixed policy, found by bisection.
pub fn true_step_risks(
    set: &SecondOrderConeSet,
    cs: &ConcatenatedSystem,
    mean: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    (1..=cs.horizon())
        .map(|k| {
            let stats = StepStats::new(set, cs, mean, gain, k)?;
            let nominal = stats.abs_psi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nominal > stats.kappa + 1e-7 * (1.0 + stats.kappa.abs()) {
                return Err(Error::InfeasibleMean {
                    constraint: 0,
                    step: k,
                    slack: stats.kappa - nominal,
                });
            }
            let feasible = |delta: f64| stats.required(delta) <= stats.kappa;
            if feasible(RISK_FLOOR) {
                return Ok(RISK_FLOOR);
            }
            let (mut lo, mut hi) = (RISK_FLOOR, 1.0 - 1e-12);
            if !feasible(hi) {
                return Ok(1.0);
            }
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if feasible(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        })
        .collect()
}
