//! Risk algebra: the Cantelli (distributionally robust) and Gaussian
//! quantiles, deterministic constraint tightening, joint-budget allocation
//! grids and the inversion from achieved slack back to a true risk.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ConcatenatedSystem;
use crate::error::{Error, Result};

/// Smallest risk ever allocated to a single constraint cell. Quantiles blow
/// up as the risk goes to zero.
pub const RISK_FLOOR: f64 = 1e-6;

const DOMAIN_SLACK: f64 = 1e-12;

/// Which quantile tightens the individual chance constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    /// Moment-based ambiguity set, tightened with `√((1-δ)/δ)`.
    Dr,
    /// Gaussian baseline, tightened with `Φ⁻¹(1-δ)`.
    Gaussian,
}

impl std::fmt::Display for RiskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RiskMode::Dr => f.write_str("dr"),
            RiskMode::Gaussian => f.write_str("gaussian"),
        }
    }
}

/// `{x : aᵀx ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    normal: DVector<f64>,
    offset: f64,
}

impl HalfSpace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Result<Self> {
        if normal.norm().is_nan() || normal.norm() <= 0.0 || !offset.is_finite() {
            return Err(Error::Invalid("half-space normal must be nonzero and finite".into()));
        }
        Ok(Self { normal, offset })
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `b - aᵀx`; nonnegative inside.
    pub fn slack(&self, x: &DVector<f64>) -> f64 {
        self.offset - self.normal.dot(x)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.slack(x) >= 0.0
    }
}

/// Cantelli quantile `𝒬(p) = √(p / (1 - p))` evaluated at `p = 1 - δ`.
pub fn dr_quantile(one_minus_delta: f64) -> Result<f64> {
    let p = one_minus_delta;
    if !(0.5 - DOMAIN_SLACK..=1.0 - RISK_FLOOR + DOMAIN_SLACK).contains(&p) {
        return Err(Error::Domain {
            value: p,
            domain: "[0.5, 1 - 1e-6]",
        });
    }
    let delta = 1.0 - p;
    Ok(((1.0 - delta) / delta).sqrt())
}

/// Standard normal cdf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal cdf: Acklam's rational approximation followed by
/// one Newton step on the erfc-based cdf.
pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(RISK_FLOOR - DOMAIN_SLACK..=1.0 - RISK_FLOOR + DOMAIN_SLACK).contains(&p) {
        return Err(Error::Domain {
            value: p,
            domain: "[1e-6, 1 - 1e-6]",
        });
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    // Evaluate the residual on the smaller tail to keep relative accuracy.
    let residual = if x > 0.0 {
        (1.0 - p) - 0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
    } else {
        normal_cdf(x) - p
    };
    Ok(x - residual / normal_pdf(x))
}

/// Tightening constant for risk `δ` under the given mode.
pub fn quantile(mode: RiskMode, delta: f64) -> Result<f64> {
    match mode {
        RiskMode::Dr => dr_quantile(1.0 - delta),
        RiskMode::Gaussian => gaussian_quantile(1.0 - delta),
    }
}

fn check_risk(delta: f64) -> Result<()> {
    if !(RISK_FLOOR - DOMAIN_SLACK..=0.5 + DOMAIN_SLACK).contains(&delta) {
        return Err(Error::Domain {
            value: delta,
            domain: "[1e-6, 0.5]",
        });
    }
    Ok(())
}

/// `‖Σ_Y^{1/2} (I + ℬK)ᵀ E_kᵀ a‖₂`, the standard deviation of `aᵀx_k`.
pub fn spread(normal: &DVector<f64>, cs: &ConcatenatedSystem, gain: &DMatrix<f64>, k: usize) -> Result<f64> {
    cs.check_gain(gain)?;
    let n = cs.state_dim();
    if normal.len() != n {
        return Err(Error::Dimension(format!(
            "normal has length {}, state has {n}",
            normal.len()
        )));
    }
    if k > cs.horizon() {
        return Err(Error::Invalid(format!("step {k} beyond horizon {}", cs.horizon())));
    }
    let mut lifted = DVector::zeros(cs.stacked_states());
    lifted.rows_mut(k * n, n).copy_from(normal);
    let through_inputs = cs.b_cat.tr_mul(&lifted);
    let closed = &lifted + gain.tr_mul(&through_inputs);
    Ok((&cs.sigma_y_sqrt * closed).norm())
}

/// Deterministic back-off `q(δ)·σ` applied to half-space `hs` at step `k`.
pub fn tightening_offset(
    hs: &HalfSpace,
    cs: &ConcatenatedSystem,
    gain: &DMatrix<f64>,
    k: usize,
    delta: f64,
    mode: RiskMode,
) -> Result<f64> {
    if k == 0 || k > cs.horizon() {
        return Err(Error::Invalid(format!(
            "constraints apply on steps 1..={}, got {k}",
            cs.horizon()
        )));
    }
    check_risk(delta)?;
    let q = quantile(mode, delta)?;
    Ok(q * spread(hs.normal(), cs, gain, k)?)
}

/// Inverts the tightening: the risk whose offset exactly consumes `slack`.
/// Results below the floor are returned unclamped; callers decide.
pub fn risk_from_margin(slack: f64, spread: f64, mode: RiskMode) -> Result<f64> {
    if spread <= 0.0 {
        return Ok(RISK_FLOOR);
    }
    if slack < 0.0 {
        return Err(Error::Invalid(format!("negative slack {slack:e}")));
    }
    let ratio = slack / spread;
    Ok(match mode {
        RiskMode::Dr => 1.0 / (1.0 + ratio * ratio),
        RiskMode::Gaussian => 0.5 * libm::erfc(ratio / std::f64::consts::SQRT_2),
    })
}

/// True risk of half-space `hs` (row `index`) at step `k` under the mean
/// trajectory `mean_traj` and gain `K`.
pub fn true_risk(
    hs: &HalfSpace,
    index: usize,
    cs: &ConcatenatedSystem,
    mean_traj: &DVector<f64>,
    gain: &DMatrix<f64>,
    k: usize,
    mode: RiskMode,
) -> Result<f64> {
    if mean_traj.len() != cs.stacked_states() {
        return Err(Error::Dimension(format!(
            "mean trajectory has length {}, expected {}",
            mean_traj.len(),
            cs.stacked_states()
        )));
    }
    let sigma = spread(hs.normal(), cs, gain, k)?;
    if sigma <= 0.0 {
        return Ok(RISK_FLOOR);
    }
    let slack = hs.slack(&cs.state_block(mean_traj, k));
    if slack < 0.0 {
        return Err(Error::InfeasibleMean {
            constraint: index,
            step: k,
            slack,
        });
    }
    risk_from_margin(slack, sigma, mode)
}

/// Per-constraint, per-step risk grid `δ_{i,k}`: row `i` is a constraint,
/// column `k - 1` is step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAllocation {
    grid: DMatrix<f64>,
    budget: f64,
}

impl RiskAllocation {
    pub fn uniform(budget: f64, rows: usize, steps: usize) -> Result<Self> {
        check_budget(budget)?;
        if steps == 0 {
            return Err(Error::Invalid("allocation needs at least one step".into()));
        }
        if rows == 0 {
            return Ok(Self {
                grid: DMatrix::zeros(0, steps),
                budget,
            });
        }
        let cell = budget / (rows * steps) as f64;
        Self::from_grid(DMatrix::from_element(rows, steps, cell), budget)
    }

    pub fn from_grid(grid: DMatrix<f64>, budget: f64) -> Result<Self> {
        check_budget(budget)?;
        for &v in grid.iter() {
            if !(RISK_FLOOR - DOMAIN_SLACK..=0.5 + DOMAIN_SLACK).contains(&v) {
                return Err(Error::Domain {
                    value: v,
                    domain: "[1e-6, 0.5]",
                });
            }
        }
        let total = grid.sum();
        if total > budget + 1e-12 {
            return Err(Error::Invalid(format!(
                "allocation sums to {total} which exceeds the budget {budget}"
            )));
        }
        Ok(Self { grid, budget })
    }

    pub fn grid(&self) -> &DMatrix<f64> {
        &self.grid
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn rows(&self) -> usize {
        self.grid.nrows()
    }

    pub fn steps(&self) -> usize {
        self.grid.ncols()
    }

    /// Risk of row `i` at step `k` (1-based step).
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.grid[(i, k - 1)]
    }

    pub fn total(&self) -> f64 {
        self.grid.sum()
    }

    /// Column of per-step risks for single-row (cone) allocations.
    pub fn step_risks(&self) -> Vec<f64> {
        (0..self.steps()).map(|c| self.grid[(0, c)]).collect()
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget > 0.0 && budget <= 0.5) {
        return Err(Error::Domain {
            value: budget,
            domain: "(0, 0.5]",
        });
    }
    Ok(())
}
