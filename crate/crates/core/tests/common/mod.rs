#![allow(dead_code)]

use covsteer::dynamics::{LinearSystemSpec, MomentPair};
use covsteer::risk::{HalfSpace, RiskMode};
use covsteer::steering::{ConstraintSet, ProblemData, SteeringProblem};
use nalgebra::{DMatrix, DVector};

pub fn double_integrator_data(mode: RiskMode) -> ProblemData {
    let dt = 0.2;
    let horizon = 15;
    let i2 = DMatrix::<f64>::identity(2, 2);
    let mut a = DMatrix::identity(4, 4);
    a.view_mut((0, 2), (2, 2)).copy_from(&(&i2 * dt));
    let mut b = DMatrix::zeros(4, 2);
    b.view_mut((0, 0), (2, 2)).copy_from(&(&i2 * (dt * dt)));
    b.view_mut((2, 0), (2, 2)).copy_from(&(&i2 * dt));
    let d = DMatrix::identity(4, 4) * 1e-3;
    let system = LinearSystemSpec::time_invariant(a, b, d, DMatrix::identity(4, 4), horizon).unwrap();
    let s0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1, 0.01, 0.01]));
    let initial = MomentPair::new(DVector::from_vec(vec![-10.0, 1.0, 0.0, 0.0]), s0.clone()).unwrap();
    let terminal = MomentPair::new(DVector::zeros(4), s0 * 0.25).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0, 1.0, 1.0]));
    let r = DMatrix::identity(2, 2) * 1e3;
    let halfspaces = vec![
        HalfSpace::new(DVector::from_vec(vec![0.2, -1.0, 0.0, 0.0]), 0.2).unwrap(),
        HalfSpace::new(DVector::from_vec(vec![0.2, 1.0, 0.0, 0.0]), 0.2).unwrap(),
    ];
    ProblemData {
        system,
        initial,
        terminal,
        state_cost: vec![q; horizon],
        input_cost: vec![r; horizon],
        constraints: ConstraintSet::HalfSpaces(halfspaces),
        budget: 0.10,
        mode,
        causal_feedback: false,
    }
}

pub fn double_integrator(mode: RiskMode) -> SteeringProblem {
    SteeringProblem::new(double_integrator_data(mode)).unwrap()
}

pub fn uniform_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn uniform_vector(rng: &mut impl rand::Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..scale))
}

/// Random symmetric positive definite matrix with eigenvalues of order one.
pub fn random_spd(rng: &mut impl rand::Rng, dim: usize) -> DMatrix<f64> {
    let g = uniform_matrix(rng, dim, dim, 1.0);
    &g * g.transpose() + DMatrix::identity(dim, dim) * 0.1
}

/// Time-varying random system with `A_k` close to the identity.
pub fn random_system(rng: &mut impl rand::Rng, n: usize, m: usize, r: usize, horizon: usize) -> LinearSystemSpec {
    let a = (0..horizon)
        .map(|_| DMatrix::identity(n, n) + uniform_matrix(rng, n, n, 0.3))
        .collect();
    let b = (0..horizon).map(|_| uniform_matrix(rng, n, m, 1.0)).collect();
    let d = (0..horizon).map(|_| uniform_matrix(rng, n, r, 0.5)).collect();
    let noise_cov = random_spd(rng, r);
    LinearSystemSpec::new(a, b, d, noise_cov).unwrap()
}

/// Gain that only feeds back deviations up to the current step.
pub fn random_causal_gain(rng: &mut impl rand::Rng, n: usize, m: usize, horizon: usize, scale: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(horizon * m, (horizon + 1) * n);
    for row in 0..horizon * m {
        let step = row / m;
        for col in 0..(step + 1) * n {
            k[(row, col)] = rng.random_range(-scale..scale);
        }
    }
    k
}

/// Plain recursion `x_{k+1} = A_k x_k + B_k u_k + D_k w_k` on stacked
/// inputs and disturbances.
pub fn step_rollout(spec: &LinearSystemSpec, x0: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let n = spec.state_dim();
    let m = spec.input_dim();
    let r = spec.noise_dim();
    let horizon = spec.horizon();
    let mut out = DVector::zeros((horizon + 1) * n);
    out.rows_mut(0, n).copy_from(x0);
    let mut x = x0.clone();
    for k in 0..horizon {
        x = spec.a(k) * &x + spec.b(k) * u.rows(k * m, m) + spec.d(k) * w.rows(k * r, r);
        out.rows_mut((k + 1) * n, n).copy_from(&x);
    }
    out
}

/// Closed-loop rollout of `U = V + K Y`, with `Y` taken from an open-loop
/// recursion of the deviations from the free mean.
pub fn policy_rollout(
    spec: &LinearSystemSpec,
    mu0: &DVector<f64>,
    x0: &DVector<f64>,
    w: &DVector<f64>,
    feedforward: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> DVector<f64> {
    let zero_u = DVector::zeros(feedforward.len());
    let zero_w = DVector::zeros(w.len());
    let y = step_rollout(spec, x0, &zero_u, w) - step_rollout(spec, mu0, &zero_u, &zero_w);
    let u = feedforward + gain * y;
    step_rollout(spec, x0, &u, w)
}

pub fn sample_cov(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

/// Largest elementwise deviation in units of the Gaussian standard error of
/// the sample mean and sample covariance.
pub fn moment_z_scores(samples: &[DVector<f64>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
    let n = samples.len() as f64;
    let (m_hat, c_hat) = sample_cov(samples);
    let dim = mean.len();
    let mut z_mean: f64 = 0.0;
    let mut z_cov: f64 = 0.0;
    for i in 0..dim {
        let se = (cov[(i, i)] / n).sqrt();
        if se > 1e-14 {
            z_mean = z_mean.max((m_hat[i] - mean[i]).abs() / se);
        }
        for j in 0..dim {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            if se > 1e-14 {
                z_cov = z_cov.max((c_hat[(i, j)] - cov[(i, j)]).abs() / se);
            }
        }
    }
    (z_mean, z_cov)
}
