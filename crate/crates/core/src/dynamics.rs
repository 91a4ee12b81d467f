//! Time-varying linear stochastic dynamics and their concatenated (lifted) form.
//!
//! The system is `x_{k+1} = A_k x_k + B_k u_k + D_k w_k` for `k = 0..N-1`, with
//! zero-mean i.i.d. disturbances of covariance `Σ_w`. Stacking the whole horizon
//! gives `X = 𝒜 x_0 + ℬ U + 𝒟 W`, where `X` has `N + 1` state blocks.
//!
//! All block matrices are dense. Horizons and state dimensions in this toolkit
//! are desk-scale, so `(N + 1) n` stays in the low hundreds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOLERANCE` are accepted and clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Mean and covariance of a random vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentPair {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "covariance is {}x{} but mean has length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        check_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-step system matrices and the disturbance covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystemSpec {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
    noise_cov: DMatrix<f64>,
}

impl LinearSystemSpec {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        if b.len() != horizon || d.len() != horizon {
            return Err(Error::Dimension(format!(
                "expected {horizon} matrices per list, got A: {}, B: {}, D: {}",
                a.len(),
                b.len(),
                d.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        let r = d[0].ncols();
        for k in 0..horizon {
            if a[k].shape() != (n, n) {
                return Err(Error::StepDimension {
                    step: k,
                    detail: format!("A is {:?}, expected ({n}, {n})", a[k].shape()),
                });
            }
            if b[k].shape() != (n, m) {
                return Err(Error::StepDimension {
                    step: k,
                    detail: format!("B is {:?}, expected ({n}, {m})", b[k].shape()),
                });
            }
            if d[k].shape() != (n, r) {
                return Err(Error::StepDimension {
                    step: k,
                    detail: format!("D is {:?}, expected ({n}, {r})", d[k].shape()),
                });
            }
        }
        if noise_cov.shape() != (r, r) {
            return Err(Error::Dimension(format!(
                "noise covariance is {:?}, expected ({r}, {r})",
                noise_cov.shape()
            )));
        }
        check_psd(&noise_cov)?;
        Ok(Self { a, b, d, noise_cov })
    }

    /// Replicates one `(A, B, D)` triple over the horizon.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        noise_cov: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon], vec![d; horizon], noise_cov)
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.d[0].ncols()
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }

    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }

    pub fn d(&self, k: usize) -> &DMatrix<f64> {
        &self.d[k]
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Step-wise simulation of the recursion, returning `x_0, ..., x_N`.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        noise: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let horizon = self.horizon();
        if inputs.len() != horizon || noise.len() != horizon {
            return Err(Error::Dimension(format!(
                "simulation needs {horizon} inputs and disturbances, got {} and {}",
                inputs.len(),
                noise.len()
            )));
        }
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x0.clone());
        for k in 0..horizon {
            let next = &self.a[k] * &states[k] + &self.b[k] * &inputs[k] + &self.d[k] * &noise[k];
            states.push(next);
        }
        Ok(states)
    }
}

/// Lifted block matrices of the whole horizon plus the open-loop deviation
/// covariance `Σ_Y` and its symmetric square root.
#[derive(Debug, Clone)]
pub struct ConcatenatedSystem {
    horizon: usize,
    n: usize,
    m: usize,
    r: usize,
    pub a_cat: DMatrix<f64>,
    pub b_cat: DMatrix<f64>,
    pub d_cat: DMatrix<f64>,
    pub noise_cov_cat: DMatrix<f64>,
    pub sigma_y: DMatrix<f64>,
    pub sigma_y_sqrt: DMatrix<f64>,
}

pub fn build_concatenation(spec: &LinearSystemSpec, init: &MomentPair) -> Result<ConcatenatedSystem> {
    let horizon = spec.horizon();
    let n = spec.state_dim();
    let m = spec.input_dim();
    let r = spec.noise_dim();
    if init.dim() != n {
        return Err(Error::Dimension(format!(
            "initial moments have dimension {}, system state has {n}",
            init.dim()
        )));
    }
    let rows = (horizon + 1) * n;
    let mut a_cat = DMatrix::zeros(rows, n);
    let mut b_cat = DMatrix::zeros(rows, horizon * m);
    let mut d_cat = DMatrix::zeros(rows, horizon * r);
    a_cat.view_mut((0, 0), (n, n)).fill_with_identity();
    for k in 0..horizon {
        let ak = spec.a(k);
        let prev_a = a_cat.rows(k * n, n).into_owned();
        a_cat.rows_mut((k + 1) * n, n).copy_from(&(ak * prev_a));
        // Inputs and disturbances up to step k-1 propagate through A_k.
        if k > 0 {
            let prev_b = b_cat.view((k * n, 0), (n, k * m)).into_owned();
            b_cat.view_mut(((k + 1) * n, 0), (n, k * m)).copy_from(&(ak * prev_b));
            let prev_d = d_cat.view((k * n, 0), (n, k * r)).into_owned();
            d_cat.view_mut(((k + 1) * n, 0), (n, k * r)).copy_from(&(ak * prev_d));
        }
        b_cat.view_mut(((k + 1) * n, k * m), (n, m)).copy_from(spec.b(k));
        d_cat.view_mut(((k + 1) * n, k * r), (n, r)).copy_from(spec.d(k));
    }

    let mut noise_cov_cat = DMatrix::zeros(horizon * r, horizon * r);
    for k in 0..horizon {
        noise_cov_cat
            .view_mut((k * r, k * r), (r, r))
            .copy_from(spec.noise_cov());
    }

    let sigma_y = symmetrize(&(&a_cat * &init.cov * a_cat.transpose() + &d_cat * &noise_cov_cat * d_cat.transpose()));
    let sigma_y_sqrt = psd_sqrt(&sigma_y)?;
    Ok(ConcatenatedSystem {
        horizon,
        n,
        m,
        r,
        a_cat,
        b_cat,
        d_cat,
        noise_cov_cat,
        sigma_y,
        sigma_y_sqrt,
    })
}

impl ConcatenatedSystem {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn noise_dim(&self) -> usize {
        self.r
    }

    /// Length of the stacked state `X`.
    pub fn stacked_states(&self) -> usize {
        (self.horizon + 1) * self.n
    }

    /// Length of the stacked input `U`.
    pub fn stacked_inputs(&self) -> usize {
        self.horizon * self.m
    }

    /// Selector `E_k` picking block `k` out of the stacked state.
    pub fn selector(&self, k: usize) -> DMatrix<f64> {
        assert!(k <= self.horizon, "step {k} beyond horizon {}", self.horizon);
        let mut e = DMatrix::zeros(self.n, self.stacked_states());
        e.view_mut((0, k * self.n), (self.n, self.n)).fill_with_identity();
        e
    }

    /// Block `k` of a stacked state vector.
    pub fn state_block(&self, stacked: &DVector<f64>, k: usize) -> DVector<f64> {
        stacked.rows(k * self.n, self.n).into_owned()
    }

    /// `E_k X` for a stacked matrix, i.e. rows of block `k`.
    pub fn block_rows(&self, stacked: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        stacked.rows(k * self.n, self.n).into_owned()
    }

    pub fn propagate_mean(&self, mu0: &DVector<f64>, feedforward: &DVector<f64>) -> Result<DVector<f64>> {
        if mu0.len() != self.n {
            return Err(Error::Dimension(format!(
                "initial mean has length {}, expected {}",
                mu0.len(),
                self.n
            )));
        }
        if feedforward.len() != self.stacked_inputs() {
            return Err(Error::Dimension(format!(
                "feedforward has length {}, expected {}",
                feedforward.len(),
                self.stacked_inputs()
            )));
        }
        Ok(&self.a_cat * mu0 + &self.b_cat * feedforward)
    }

    /// `I + ℬK`, the closed-loop map from open-loop deviations `Y` to `X - X̄`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_gain(gain)?;
        let mut m = &self.b_cat * gain;
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0;
        }
        Ok(m)
    }

    pub fn propagate_covariance(&self, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cl = self.closed_loop(gain)?;
        Ok(symmetrize(&(&cl * &self.sigma_y * cl.transpose())))
    }

    pub fn check_gain(&self, gain: &DMatrix<f64>) -> Result<()> {
        let expected = (self.stacked_inputs(), self.stacked_states());
        if gain.shape() != expected {
            return Err(Error::Dimension(format!(
                "feedback gain is {:?}, expected {:?}",
                gain.shape(),
                expected
            )));
        }
        Ok(())
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("matrix is {:?}, expected square", m.shape())));
    }
    let scale = m.amax().max(1.0);
    let asymmetry = (m - m.transpose()).amax();
    if asymmetry > PSD_TOLERANCE * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Rejects matrices that are asymmetric or carry an eigenvalue below `-1e-10`.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok(());
    }
    let min = symmetrize(m).symmetric_eigenvalues().min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m)?;
    let mut eig = symmetrize(m).symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Symmetric PSD square root via eigendecomposition. Works for rank-deficient
/// input, where a Cholesky factor would not exist.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = clamped_eigen(m)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let u = &eig.eigenvectors;
    Ok(symmetrize(&(u * DMatrix::from_diagonal(&roots) * u.transpose())))
}

/// Thin factor `L` with `L Lᵀ = M` and full column rank, plus its
/// pseudo-inverse. Eigenvalues below `rel_tol * λ_max` are dropped.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    pub factor: DMatrix<f64>,
    pub pseudo_inverse: DMatrix<f64>,
}

impl PsdFactor {
    pub fn new(m: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let dim = m.nrows();
        if dim == 0 {
            return Ok(Self {
                factor: DMatrix::zeros(0, 0),
                pseudo_inverse: DMatrix::zeros(0, 0),
            });
        }
        let eig = clamped_eigen(m)?;
        let max = eig.eigenvalues.max();
        let keep: Vec<usize> = (0..dim)
            .filter(|&i| max > 0.0 && eig.eigenvalues[i] > rel_tol * max)
            .collect();
        let mut factor = DMatrix::zeros(dim, keep.len());
        let mut pseudo_inverse = DMatrix::zeros(keep.len(), dim);
        for (col, &i) in keep.iter().enumerate() {
            let root = eig.eigenvalues[i].sqrt();
            let v = eig.eigenvectors.column(i);
            factor.column_mut(col).copy_from(&(v * root));
            pseudo_inverse.row_mut(col).copy_from(&(v.transpose() / root));
        }
        Ok(Self { factor, pseudo_inverse })
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }
}
