//! Run report and the files written to a run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use covsteer::montecarlo::{NoiseFamily, TrialResult};
use covsteer::risk::RiskMode;
use serde::{Deserialize, Serialize};

use crate::config::Matrix;
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const ALLOCATION_FILE: &str = "risk_allocation.csv";
pub const COST_FILE: &str = "cost_per_iteration.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub cost: f64,
    pub active: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPolicy {
    pub feedforward: Vec<f64>,
    pub gain: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub family: NoiseFamily,
    pub trials: usize,
    pub seed: u64,
    pub joint_violations: usize,
    pub joint_rate: f64,
    pub joint_interval: [f64; 2],
    pub mean_cost: f64,
    pub cost_std_error: f64,
    /// Same layout as `allocation`.
    pub cell_rates: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub command: String,
    pub config_sha256: String,
    pub notes: Vec<String>,
    pub mode: RiskMode,
    pub budget: f64,
    pub risk_floor: f64,
    pub status: String,
    pub cost: f64,
    pub cost_trace: Vec<IterationRow>,
    /// Rows are constraints, columns are steps `1..=N`.
    pub allocation: Matrix,
    pub true_risks: Matrix,
    pub policy: StoredPolicy,
    /// One row per step `0..=N`.
    pub mean_trajectory: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<MonteCarloSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub timings: Vec<Timing>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::Parse(format!("{}: {}: {}", path.display(), e.path(), e.inner())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes to JSON")
    }
}

fn create(dir: &Path, name: &str, digest: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config_sha256: {digest}").map_err(|e| CliError::io(&path, e))?;
    Ok(w)
}

fn write_table(
    dir: &Path,
    name: &str,
    digest: &str,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_writer(create(dir, name, digest)?);
    let wrap = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the summary and the four tables. `trials` adds sampled
/// trajectories after the mean trajectory.
pub fn write_outputs(dir: &Path, report: &RunReport, trials: Option<&[TrialResult]>) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let digest = &report.config_sha256;

    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&summary_path, report.to_json() + "\n").map_err(|e| CliError::io(&summary_path, e))?;

    let n = report.mean_trajectory.first().map_or(0, Vec::len);
    let mut header = vec!["trial".to_string(), "step".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    let mean_rows = report.mean_trajectory.iter().enumerate().map(|(k, x)| {
        let mut row = vec!["mean".to_string(), k.to_string()];
        row.extend(x.iter().copied().map(num));
        row
    });
    let trial_rows = trials.unwrap_or_default().iter().enumerate().flat_map(|(t, trial)| {
        trial.states.iter().enumerate().map(move |(k, x)| {
            let mut row = vec![t.to_string(), k.to_string()];
            row.extend(x.iter().copied().map(num));
            row
        })
    });
    write_table(dir, TRAJECTORIES_FILE, digest, &header, mean_rows.chain(trial_rows))?;

    let header: Vec<String> = ["constraint", "step", "allocated", "true_risk", "empirical"]
        .map(String::from)
        .into();
    let empirical = report.montecarlo.as_ref().map(|m| &m.cell_rates);
    let mut rows = Vec::new();
    for (i, alloc_row) in report.allocation.iter().enumerate() {
        for (c, &alloc) in alloc_row.iter().enumerate() {
            rows.push(vec![
                (i + 1).to_string(),
                (c + 1).to_string(),
                num(alloc),
                num(report.true_risks[i][c]),
                empirical.map_or(String::new(), |e| num(e[i][c])),
            ]);
        }
    }
    write_table(dir, ALLOCATION_FILE, digest, &header, rows)?;

    let header: Vec<String> = ["iteration", "cost", "active", "residual"].map(String::from).into();
    let rows = report.cost_trace.iter().map(|r| {
        vec![
            r.iteration.to_string(),
            num(r.cost),
            r.active.to_string(),
            num(r.residual),
        ]
    });
    write_table(dir, COST_FILE, digest, &header, rows)?;

    let header: Vec<String> = ["phase", "seconds"].map(String::from).into();
    let rows = report
        .timings
        .iter()
        .map(|t| vec![t.phase.clone(), format!("{:.6}", t.seconds)]);
    write_table(dir, TIMINGS_FILE, digest, &header, rows)
}
