//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stderr, bypassing the test harness capture, and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command as Process;
use std::time::{Duration, Instant};

use covsteer::dynamics::{build_concatenation, LinearSystemSpec, MomentPair};
use covsteer::montecarlo::{run_monte_carlo, McConfig, NoiseFamily};
use covsteer::risk::{gaussian_quantile, quantile, tightening_offset, HalfSpace, RiskMode};
use covsteer::steering::{
    assemble, constraint_margins, solve_lower_stage, ConstraintSet, ProblemData, SteeringProblem,
};
use covsteer_cli::{preset, run, Command, PresetName, RunOptions};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const QUANTILE_GRID: usize = 200;
const PROPAGATION_SYSTEMS: usize = 100;
const PROPAGATION_TRIALS: usize = 100_000;
const STEPWISE_TOL: f64 = 1e-10;
const Z_LIMIT: f64 = 5.0;
const RISK_TOL: f64 = 1e-6;
const TERMINAL_MEAN_TOL: f64 = 1e-6;
const TERMINAL_LMI_TOL: f64 = -1e-7;
const COST_TRACE_TOL: f64 = 1e-6;
const BUDGET_TOL: f64 = 1e-12;
const MAX_IRA_ITERATIONS: usize = 30;
const FEASIBILITY_TOL: f64 = -1e-7;

fn verdict(id: u32, pass: bool, detail: &str) -> bool {
    let line = format!(
        "acceptance criterion {id}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    pass
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

#[test]
fn criterion_1_quantile_ordering() {
    let start = Instant::now();
    let mut ordered = true;
    for i in 0..QUANTILE_GRID {
        let delta = 1e-4 + (0.5 - 1e-4) * i as f64 / (QUANTILE_GRID - 1) as f64;
        let dr = quantile(RiskMode::Dr, delta).unwrap();
        let g = gaussian_quantile(1.0 - delta).unwrap();
        if i + 1 < QUANTILE_GRID {
            ordered &= dr > g;
        }
    }
    let at_half = quantile(RiskMode::Dr, 0.5).unwrap();
    let elapsed = start.elapsed();
    let pass = ordered && at_half == 1.0 && within(elapsed, 1);
    assert!(verdict(
        1,
        pass,
        &format!("ordered on {QUANTILE_GRID} points: {ordered}, dr quantile at 0.5 = {at_half}, {elapsed:.2?}")
    ));
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let g = uniform(rng, dim, dim, 1.0);
    &g * g.transpose() + DMatrix::identity(dim, dim) * 0.1
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Returns the worst step-wise mismatch and the worst mean and covariance
/// z-scores of one random closed-loop system.
fn propagation_case(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let r = rng.random_range(1..=2);
    let horizon = rng.random_range(1..=5);
    let a: Vec<_> = (0..horizon)
        .map(|_| DMatrix::identity(n, n) + uniform(rng, n, n, 0.3))
        .collect();
    let b: Vec<_> = (0..horizon).map(|_| uniform(rng, n, m, 1.0)).collect();
    let d: Vec<_> = (0..horizon).map(|_| uniform(rng, n, r, 0.5)).collect();
    let noise_cov = spd(rng, r);
    let spec = LinearSystemSpec::new(a.clone(), b.clone(), d.clone(), noise_cov.clone()).unwrap();
    let mu0 = uniform(rng, n, 1, 2.0).column(0).into_owned();
    let s0 = spd(rng, n);
    let cs = build_concatenation(&spec, &MomentPair::new(mu0.clone(), s0.clone()).unwrap()).unwrap();
    let v = uniform(rng, horizon * m, 1, 1.0).column(0).into_owned();
    let mut gain = DMatrix::zeros(horizon * m, (horizon + 1) * n);
    for row in 0..horizon * m {
        for col in 0..(row / m + 1) * n {
            gain[(row, col)] = rng.random_range(-0.5..0.5);
        }
    }
    let mean = cs.propagate_mean(&mu0, &v).unwrap();
    let cov = cs.propagate_covariance(&gain).unwrap();

    // Deterministic comparison against the plain recursion.
    let x0 = uniform(rng, n, 1, 3.0).column(0).into_owned();
    let u = uniform(rng, horizon * m, 1, 2.0).column(0).into_owned();
    let w = uniform(rng, horizon * r, 1, 1.0).column(0).into_owned();
    let lifted = &cs.a_cat * &x0 + &cs.b_cat * &u + &cs.d_cat * &w;
    let mut mismatch: f64 = 0.0;
    let (mut x, mut xm) = (x0.clone(), mu0.clone());
    for k in 0..=horizon {
        mismatch = mismatch.max((lifted.rows(k * n, n) - &x).amax());
        mismatch = mismatch.max((mean.rows(k * n, n) - &xm).amax());
        if k < horizon {
            x = &a[k] * &x + &b[k] * u.rows(k * m, m) + &d[k] * w.rows(k * r, r);
            xm = &a[k] * &xm + &b[k] * v.rows(k * m, m);
        }
    }

    // Closed-loop sampling with the policy applied step by step.
    let chol0 = s0.cholesky().unwrap().l();
    let chol_w = noise_cov.cholesky().unwrap().l();
    let dim = (horizon + 1) * n;
    let mut sum = DVector::<f64>::zeros(dim);
    let mut outer = DMatrix::<f64>::zeros(dim, dim);
    let mut traj = DVector::<f64>::zeros(dim);
    let mut dev = DVector::<f64>::zeros(dim);
    for _ in 0..PROPAGATION_TRIALS {
        let y0 = &chol0 * normal_vector(rng, n);
        let mut x = &mu0 + &y0;
        let mut y = y0;
        traj.rows_mut(0, n).copy_from(&x);
        dev.rows_mut(0, n).copy_from(&y);
        for k in 0..horizon {
            let wk = &chol_w * normal_vector(rng, r);
            let seen = (k + 1) * n;
            let uk = v.rows(k * m, m) + gain.view((k * m, 0), (m, seen)) * dev.rows(0, seen);
            x = &a[k] * &x + &b[k] * uk + &d[k] * &wk;
            y = &a[k] * &y + &d[k] * &wk;
            traj.rows_mut((k + 1) * n, n).copy_from(&x);
            dev.rows_mut((k + 1) * n, n).copy_from(&y);
        }
        let c = &traj - &mean;
        sum += &c;
        outer.ger(1.0, &c, &c, 1.0);
    }
    let count = PROPAGATION_TRIALS as f64;
    let mean_err = &sum / count;
    let cov_hat = (&outer - &mean_err * mean_err.transpose() * count) / (count - 1.0);
    let (mut z_mean, mut z_cov): (f64, f64) = (0.0, 0.0);
    for i in 0..dim {
        z_mean = z_mean.max(mean_err[i].abs() / (cov[(i, i)] / count).sqrt());
        for j in 0..dim {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / count).sqrt();
            z_cov = z_cov.max((cov_hat[(i, j)] - cov[(i, j)]).abs() / se);
        }
    }
    (mismatch, z_mean, z_cov)
}

#[test]
fn criterion_2_propagation_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatch, mut z_mean, mut z_cov): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..PROPAGATION_SYSTEMS {
        let (a, b, c) = propagation_case(&mut rng);
        mismatch = mismatch.max(a);
        z_mean = z_mean.max(b);
        z_cov = z_cov.max(c);
    }
    let elapsed = start.elapsed();
    let pass = mismatch <= STEPWISE_TOL && z_mean < Z_LIMIT && z_cov < Z_LIMIT && within(elapsed, 120);
    assert!(verdict(
        2,
        pass,
        &format!(
            "{PROPAGATION_SYSTEMS} systems x {PROPAGATION_TRIALS} trials: step-wise mismatch {mismatch:.1e}, \
             worst z mean {z_mean:.2}, worst z covariance {z_cov:.2}, {elapsed:.1?}"
        )
    ));
}

fn problem_of(name: PresetName) -> SteeringProblem {
    preset(name).build().unwrap()
}

#[test]
fn criterion_3_lower_stage_safety() {
    let start = Instant::now();
    let problem = problem_of(PresetName::DoubleIntegrator);
    let alloc = problem.uniform_allocation().unwrap();
    let sol = solve_lower_stage(&problem, &alloc).unwrap();
    let cs = problem.system();
    let excess = (&sol.true_risks - alloc.grid()).max();
    let end = cs.selector(cs.horizon());
    let mean_err = (&end * &sol.mean_trajectory - &problem.terminal().mean).amax();
    let gap = &problem.terminal().cov - &end * &sol.state_covariance * end.transpose();
    let lmi = (0.5 * (&gap + gap.transpose())).symmetric_eigenvalues().min();
    let elapsed = start.elapsed();
    let pass = excess <= RISK_TOL && mean_err <= TERMINAL_MEAN_TOL && lmi >= TERMINAL_LMI_TOL && within(elapsed, 30);
    assert!(verdict(
        3,
        pass,
        &format!(
            "cost {:.4}, max true minus allocated risk {excess:.1e}, terminal mean error {mean_err:.1e}, \
             terminal LMI min eigenvalue {lmi:.1e}, {elapsed:.2?}",
            sol.cost
        )
    ));
}

fn check_ira(name: PresetName) -> (bool, String) {
    let problem = problem_of(name);
    let config = preset(name).ira_config();
    let outcome = covsteer::ira::ira_solve(&problem, &config).unwrap();
    let costs = outcome.trace.costs();
    let monotone = costs.windows(2).all(|p| p[1] <= p[0] + COST_TRACE_TOL);
    let conserved = outcome
        .trace
        .records
        .iter()
        .all(|r| (r.allocation.sum() - problem.budget()).abs() <= BUDGET_TOL);
    let improved = outcome.solution.cost <= costs[0];
    let pass = monotone && conserved && improved && costs.len() <= MAX_IRA_ITERATIONS;
    (
        pass,
        format!(
            "{}: {} iterations, cost {:.3} -> {:.3}",
            name.as_str(),
            costs.len(),
            costs[0],
            outcome.solution.cost
        ),
    )
}

#[test]
fn criterion_4_ira_trace() {
    let start = Instant::now();
    let (a, da) = check_ira(PresetName::DoubleIntegrator);
    let (b, db) = check_ira(PresetName::SpacecraftPolytope);
    let elapsed = start.elapsed();
    let pass = a && b && within(elapsed, 300);
    assert!(verdict(4, pass, &format!("{da}; {db}; {elapsed:.1?}")));
}

#[test]
fn criterion_5_empirical_risk_containment() {
    let start = Instant::now();
    let config = preset(PresetName::DoubleIntegrator);
    let dir = tempfile::tempdir().unwrap();
    let allocated = run(&config, Command::MonteCarlo, dir.path(), &RunOptions::default()).unwrap();
    let uniform = run(
        &config,
        Command::MonteCarlo,
        dir.path(),
        &RunOptions {
            uniform: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let a = allocated.montecarlo.unwrap();
    let u = uniform.montecarlo.unwrap();
    let elapsed = start.elapsed();
    let pass = a.family == NoiseFamily::Laplacian
        && a.trials == 500
        && a.joint_rate <= config.risk.budget
        && u.joint_rate <= config.risk.budget
        && within(elapsed, 60);
    assert!(verdict(
        5,
        pass,
        &format!(
            "{} laplacian trials, seed {}: joint violation {} (allocated), {} (uniform), budget {}, {elapsed:.2?}",
            a.trials, a.seed, a.joint_rate, u.joint_rate, config.risk.budget
        )
    ));
}

#[test]
fn criterion_6_gaussian_versus_dr() {
    let dr = problem_of(PresetName::DoubleIntegrator);
    let gaussian = dr.with_mode(RiskMode::Gaussian);
    let alloc = dr.uniform_allocation().unwrap();
    let dr_sol = solve_lower_stage(&dr, &alloc).unwrap();
    let ConstraintSet::HalfSpaces(halfspaces) = dr.constraints() else {
        unreachable!()
    };
    let mut strictly_smaller = true;
    for k in 1..=dr.horizon() {
        for (i, hs) in halfspaces.iter().enumerate() {
            let offset = |mode| tightening_offset(hs, dr.system(), &dr_sol.policy.gain, k, alloc.get(i, k), mode);
            strictly_smaller &= offset(RiskMode::Gaussian).unwrap() < offset(RiskMode::Dr).unwrap();
        }
    }
    let margin = constraint_margins(&gaussian, &alloc, &dr_sol.policy).unwrap().min();
    let g_sol = solve_lower_stage(&gaussian, &alloc).unwrap();
    let mc = McConfig {
        family: NoiseFamily::Laplacian,
        trials: 500,
        seed: 7,
        keep_trajectories: false,
    };
    let dr_rate = run_monte_carlo(&dr, &dr_sol.policy, &mc).unwrap().summary.joint_rate;
    let g_rate = run_monte_carlo(&gaussian, &g_sol.policy, &mc)
        .unwrap()
        .summary
        .joint_rate;
    let pass = strictly_smaller && margin >= FEASIBILITY_TOL;
    assert!(verdict(
        6,
        pass,
        &format!(
            "gaussian offsets strictly smaller: {strictly_smaller}, dr optimum gaussian margin {margin:.2e}; \
             reported only: laplacian joint violation {dr_rate} (dr, cost {:.1}) vs {g_rate} (gaussian, cost {:.1})",
            dr_sol.cost, g_sol.cost
        )
    ));
}

#[test]
fn criterion_7_cone_suite() {
    let start = Instant::now();
    let config = preset(PresetName::SpacecraftCone);
    let problem = config.build().unwrap();
    let ConstraintSet::Cone(set) = problem.constraints() else {
        unreachable!()
    };
    let expected_rows = problem.horizon() * (2 * set.rows() + 1);
    let rows = assemble(&problem, &problem.uniform_allocation().unwrap())
        .unwrap()
        .soc_count();
    let dir = tempfile::tempdir().unwrap();
    let report = run(&config, Command::MonteCarlo, dir.path(), &RunOptions::default()).unwrap();
    let mc = report.montecarlo.as_ref().unwrap();
    let within_budget = (0..problem.horizon()).all(|k| mc.cell_rates[0][k] <= report.allocation[0][k]);
    let worst_rate = mc.cell_rates[0].iter().copied().fold(0.0, f64::max);
    let costs: Vec<f64> = report.cost_trace.iter().map(|r| r.cost).collect();
    let monotone = costs.windows(2).all(|p| p[1] <= p[0] + COST_TRACE_TOL);
    let elapsed = start.elapsed();
    let pass = rows == expected_rows && mc.trials == 500 && within_budget && monotone && within(elapsed, 300);
    assert!(verdict(
        7,
        pass,
        &format!(
            "{rows} cone rows (expected {expected_rows}), worst per-step violation {worst_rate} over {} trials, \
             cost trace {costs:.3?}, {elapsed:.1?}",
            mc.trials
        )
    ));
}

/// `{−s, 0, s}` with weights `{p, 1 − 2p, p}` and variance `var`.
fn three_point(var: f64, p: f64) -> [(f64, f64); 3] {
    let s = (var / (2.0 * p)).sqrt();
    [(-s, p), (0.0, 1.0 - 2.0 * p), (s, p)]
}

#[test]
fn criterion_8_brute_force_bound() {
    let start = Instant::now();
    let (mu0, var0, var_w, delta) = (0.0, 0.3, 0.02, 0.2);
    let problem = SteeringProblem::new(ProblemData {
        system: LinearSystemSpec::time_invariant(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![var_w], 1)
            .unwrap(),
        initial: MomentPair::new(dvector![mu0], dmatrix![var0]).unwrap(),
        terminal: MomentPair::new(dvector![0.6], dmatrix![1.0]).unwrap(),
        state_cost: vec![dmatrix![1.0]],
        input_cost: vec![dmatrix![1.0]],
        constraints: ConstraintSet::HalfSpaces(vec![HalfSpace::new(dvector![1.0], 1.0).unwrap()]),
        budget: delta,
        mode: RiskMode::Dr,
        causal_feedback: true,
    })
    .unwrap();
    let sol = solve_lower_stage(&problem, &problem.uniform_allocation().unwrap()).unwrap();
    let (v, k0) = (sol.policy.feedforward[0], sol.policy.gain[(0, 0)]);
    let mut worst: f64 = 0.0;
    for i in 1..1000 {
        let p = 0.5 * i as f64 / 1000.0;
        let mut violation = 0.0;
        for (y0, p0) in three_point(var0, p) {
            for (w, pw) in three_point(var_w, p) {
                let x1 = mu0 + y0 + v + k0 * y0 + w;
                if x1 > 1.0 {
                    violation += p0 * pw;
                }
            }
        }
        worst = worst.max(violation);
    }
    let true_risk = sol.true_risks[(0, 0)];
    let elapsed = start.elapsed();
    let pass = worst <= delta && sol.policy.gain[(0, 1)] == 0.0 && within(elapsed, 1);
    assert!(verdict(
        8,
        pass,
        &format!(
            "worst three-point violation {worst:.4} <= allocated {delta} (true risk {true_risk:.4}), {elapsed:.2?}"
        )
    ));
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .filter(|p| p.file_name().is_some_and(|n| n != "timings.csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_9_reproducible_outputs() {
    let binary = env!("CARGO_BIN_EXE_covsteer");
    let root = tempfile::tempdir().unwrap();
    let runs = [
        ["montecarlo", "double_integrator"],
        ["montecarlo", "spacecraft_cone"],
        ["ira", "spacecraft_polytope"],
    ];
    let mut identical = true;
    let mut compared = 0;
    for [command, name] in runs {
        let outputs: Vec<_> = (0..2)
            .map(|rep| {
                let out = root.path().join(format!("{name}-{command}-{rep}"));
                let status = Process::new(binary)
                    .args([command, "--preset", name, "--seed", "11", "--out"])
                    .arg(&out)
                    .output()
                    .unwrap();
                assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
                csv_files(&out)
            })
            .collect();
        let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
        identical &=
            outputs[0] == outputs[1] && names == ["cost_per_iteration.csv", "risk_allocation.csv", "trajectories.csv"];
        compared += outputs[0].len();
    }
    assert!(verdict(
        9,
        identical,
        &format!(
            "{compared} csv files byte-identical across repeated runs of {} commands",
            runs.len()
        )
    ));
}
