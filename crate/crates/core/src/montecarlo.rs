//! Closed-loop Monte Carlo rollouts under moment-matched Gaussian or
//! Laplacian noise, with streaming violation and cost statistics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{check_psd, psd_sqrt, ConcatenatedSystem};
use crate::error::{Error, Result};
use crate::steering::{ConstraintSet, FeedbackPolicy, SteeringProblem};

const WILSON_Z: f64 = 1.959963984540054;
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    /// Gaussian scale mixture with unit-mean exponential mixing.
    Laplacian,
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplacian => "laplacian",
        })
    }
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    family: NoiseFamily,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    root: DMatrix<f64>,
    seed: u64,
}

impl NoiseModel {
    pub fn new(family: NoiseFamily, mean: DVector<f64>, cov: DMatrix<f64>, seed: u64) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Dimension(format!(
                "covariance is {:?} for a mean of length {}",
                cov.shape(),
                mean.len()
            )));
        }
        check_psd(&cov)?;
        let root = psd_sqrt(&cov)?;
        Ok(Self {
            family,
            mean,
            cov,
            root,
            seed,
        })
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = match self.family {
            NoiseFamily::Gaussian => 1.0,
            NoiseFamily::Laplacian => rng.sample::<f64, _>(Exp1).sqrt(),
        };
        &self.mean + &self.root * z * scale
    }

    /// `count` draws, identical for identical seeds.
    pub fn sample(&self, count: usize) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(Error::Invalid("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..count).map(|_| self.draw(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub cost: f64,
    /// Rows are constraints (one row for a cone), columns are steps `1..=N`.
    pub violations: DMatrix<bool>,
    pub joint_violation: bool,
}

/// Applies a fixed policy to sampled initial states and disturbances.
pub struct Simulator<'a> {
    problem: &'a SteeringProblem,
    policy: &'a FeedbackPolicy,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a SteeringProblem, policy: &'a FeedbackPolicy) -> Result<Self> {
        let cs = problem.system();
        cs.check_gain(&policy.gain)?;
        if policy.feedforward.len() != cs.stacked_inputs() {
            return Err(Error::Dimension(format!(
                "feedforward has length {}, expected {}",
                policy.feedforward.len(),
                cs.stacked_inputs()
            )));
        }
        Ok(Self { problem, policy })
    }

    /// One closed-loop trajectory from `x0` under the stacked disturbance `w`.
    pub fn rollout(&self, x0: &DVector<f64>, w: &DVector<f64>) -> Result<TrialResult> {
        let cs: &ConcatenatedSystem = self.problem.system();
        let (n, m) = (cs.state_dim(), cs.input_dim());
        if x0.len() != n || w.len() != cs.horizon() * cs.noise_dim() {
            return Err(Error::Dimension(format!(
                "rollout needs x0 of length {n} and W of length {}, got {} and {}",
                cs.horizon() * cs.noise_dim(),
                x0.len(),
                w.len()
            )));
        }
        let noise = &cs.d_cat * w;
        let y = &cs.a_cat * (x0 - &self.problem.initial().mean) + &noise;
        let u = &self.policy.feedforward + &self.policy.gain * y;
        let x = &cs.a_cat * x0 + &cs.b_cat * &u + noise;
        let cost = x.dot(&(self.problem.q_bar() * &x)) + u.dot(&(self.problem.r_bar() * &u));

        let horizon = cs.horizon();
        let states: Vec<DVector<f64>> = (0..=horizon).map(|k| cs.state_block(&x, k)).collect();
        let inputs = (0..horizon).map(|k| u.rows(k * m, m).into_owned()).collect();
        let violations = match self.problem.constraints() {
            ConstraintSet::HalfSpaces(hs) => {
                DMatrix::from_fn(hs.len(), horizon, |i, c| !hs[i].contains(&states[c + 1]))
            }
            ConstraintSet::Cone(set) => DMatrix::from_fn(1, horizon, |_, c| !set.contains(&states[c + 1])),
        };
        let joint_violation = violations.iter().any(|&v| v);
        Ok(TrialResult {
            states,
            inputs,
            cost,
            violations,
            joint_violation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub trials: usize,
    pub joint_violations: usize,
    pub joint_rate: f64,
    /// Wilson 95% interval for the joint rate.
    pub joint_interval: (f64, f64),
    pub cell_rates: DMatrix<f64>,
    pub mean_cost: f64,
    pub cost_std_error: f64,
}

/// Single-pass accumulator behind [`estimate`].
#[derive(Debug, Clone)]
pub struct Accumulator {
    trials: usize,
    joint: usize,
    cells: DMatrix<usize>,
    cost_mean: f64,
    cost_m2: f64,
}

impl Accumulator {
    pub fn new(rows: usize, steps: usize) -> Self {
        Self {
            trials: 0,
            joint: 0,
            cells: DMatrix::zeros(rows, steps),
            cost_mean: 0.0,
            cost_m2: 0.0,
        }
    }

    pub fn push(&mut self, trial: &TrialResult) -> Result<()> {
        if trial.violations.shape() != self.cells.shape() {
            return Err(Error::Dimension(format!(
                "violation grid is {:?}, expected {:?}",
                trial.violations.shape(),
                self.cells.shape()
            )));
        }
        self.trials += 1;
        self.joint += usize::from(trial.joint_violation);
        for (count, &flag) in self.cells.iter_mut().zip(trial.violations.iter()) {
            *count += usize::from(flag);
        }
        let delta = trial.cost - self.cost_mean;
        self.cost_mean += delta / self.trials as f64;
        self.cost_m2 += delta * (trial.cost - self.cost_mean);
        Ok(())
    }

    pub fn finish(&self) -> Result<ViolationSummary> {
        if self.trials == 0 {
            return Err(Error::Invalid("no trials to summarize".into()));
        }
        let n = self.trials as f64;
        let joint_rate = self.joint as f64 / n;
        let variance = if self.trials > 1 { self.cost_m2 / (n - 1.0) } else { 0.0 };
        Ok(ViolationSummary {
            trials: self.trials,
            joint_violations: self.joint,
            joint_rate,
            joint_interval: wilson_interval(self.joint, self.trials),
            cell_rates: self.cells.map(|c| c as f64 / n),
            mean_cost: self.cost_mean,
            cost_std_error: (variance / n).sqrt(),
        })
    }
}

pub fn estimate(results: &[TrialResult]) -> Result<ViolationSummary> {
    let first = results
        .first()
        .ok_or_else(|| Error::Invalid("no trials to summarize".into()))?;
    let mut acc = Accumulator::new(first.violations.nrows(), first.violations.ncols());
    for r in results {
        acc.push(r)?;
    }
    acc.finish()
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub family: NoiseFamily,
    pub trials: usize,
    pub seed: u64,
    pub keep_trajectories: bool,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub summary: ViolationSummary,
    pub trajectories: Option<Vec<TrialResult>>,
}

/// Draws `(x0, W)` for trial `index`. Each trial owns its own generator
/// stream, so results do not depend on how trials are scheduled.
pub fn trial_inputs(
    problem: &SteeringProblem,
    family: NoiseFamily,
    seed: u64,
    index: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let init = NoiseModel::new(
        family,
        problem.initial().mean.clone(),
        problem.initial().cov.clone(),
        seed,
    )?;
    let spec = &problem.data().system;
    let noise = NoiseModel::new(family, DVector::zeros(spec.noise_dim()), spec.noise_cov().clone(), seed)?;
    Ok(draw_trial(&init, &noise, spec.horizon(), seed, index))
}

fn draw_trial(
    init: &NoiseModel,
    noise: &NoiseModel,
    horizon: usize,
    seed: u64,
    index: u64,
) -> (DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let x0 = init.draw(&mut rng);
    let r = noise.mean().len();
    let mut w = DVector::zeros(horizon * r);
    for k in 0..horizon {
        w.rows_mut(k * r, r).copy_from(&noise.draw(&mut rng));
    }
    (x0, w)
}

pub fn run_monte_carlo(problem: &SteeringProblem, policy: &FeedbackPolicy, config: &McConfig) -> Result<McReport> {
    if config.trials == 0 {
        return Err(Error::Invalid("trial count must be at least 1".into()));
    }
    let sim = Simulator::new(problem, policy)?;
    let init = NoiseModel::new(
        config.family,
        problem.initial().mean.clone(),
        problem.initial().cov.clone(),
        config.seed,
    )?;
    let spec = &problem.data().system;
    let noise = NoiseModel::new(
        config.family,
        DVector::zeros(spec.noise_dim()),
        spec.noise_cov().clone(),
        config.seed,
    )?;
    let horizon = spec.horizon();
    let mut acc = Accumulator::new(problem.constraints().allocation_rows(), horizon);
    let mut kept = config.keep_trajectories.then(Vec::new);
    let mut start = 0;
    while start < config.trials {
        let end = (start + CHUNK).min(config.trials);
        let chunk: Vec<TrialResult> = (start..end)
            .into_par_iter()
            .map(|i| {
                let (x0, w) = draw_trial(&init, &noise, horizon, config.seed, i as u64);
                sim.rollout(&x0, &w)
            })
            .collect::<Result<_>>()?;
        for trial in &chunk {
            acc.push(trial)?;
        }
        if let Some(kept) = kept.as_mut() {
            kept.extend(chunk);
        }
        start = end;
    }
    Ok(McReport {
        summary: acc.finish()?,
        trajectories: kept,
    })
}
