//! TOML problem configuration.
//!
//! Matrices are nested arrays, one inner array per row. The file carries a
//! `schema_version`; only version 1 is understood.

use covsteer::cone::SecondOrderConeSet;
use covsteer::dynamics::{LinearSystemSpec, MomentPair};
use covsteer::ira::IraConfig;
use covsteer::montecarlo::{McConfig, NoiseFamily};
use covsteer::risk::{HalfSpace, RiskMode};
use covsteer::steering::{ConstraintSet, ProblemData, SteeringProblem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub system: SystemConfig,
    pub initial: MomentsConfig,
    pub terminal: MomentsConfig,
    pub cost: CostConfig,
    pub constraints: ConstraintsConfig,
    pub risk: RiskConfig,
    #[serde(default)]
    pub ira: IraSection,
    #[serde(default)]
    pub montecarlo: MonteCarloSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub horizon: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub d: Matrix,
    pub noise_cov: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// Time-invariant weights `Q` and `R`, applied at every step `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Matrix,
    pub r: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Polytope,
    Cone,
}

impl std::str::FromStr for ConstraintKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "polytope" => Ok(Self::Polytope),
            "cone" => Ok(Self::Cone),
            other => Err(format!("unknown constraint kind {other:?} (expected polytope or cone)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(rename = "use")]
    pub active: ConstraintKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polytope: Option<PolytopeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone: Option<ConeConfig>,
}

/// Half-spaces `normals[i] · x ≤ offsets[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeConfig {
    pub normals: Matrix,
    pub offsets: Vec<f64>,
}

/// `‖a x + b‖ ≤ c · x + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeConfig {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub budget: f64,
    pub mode: RiskMode,
    #[serde(default)]
    pub causal_feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IraSection {
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_tolerance: Option<f64>,
    pub tol_active: f64,
    pub max_iterations: usize,
}

impl Default for IraSection {
    fn default() -> Self {
        let d = IraConfig::default();
        Self {
            rho: d.rho,
            cost_tolerance: d.cost_tolerance,
            tol_active: d.tol_active,
            max_iterations: d.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub family: NoiseFamily,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_keep")]
    pub keep_trajectories: bool,
}

fn default_keep() -> bool {
    true
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            family: NoiseFamily::Laplacian,
            trials: 500,
            seed: 7,
            keep_trajectories: true,
        }
    }
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<RiskMode>,
    pub constraint: Option<ConstraintKind>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub rho: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Parse(e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Parse(format!("{}: {}", e.path(), e.inner())))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::Parse(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(mode) = o.mode {
            self.risk.mode = mode;
        }
        if let Some(kind) = o.constraint {
            self.constraints.active = kind;
        }
        if let Some(trials) = o.trials {
            self.montecarlo.trials = trials;
        }
        if let Some(seed) = o.seed {
            self.montecarlo.seed = seed;
        }
        if let Some(rho) = o.rho {
            self.ira.rho = rho;
        }
        if let Some(iters) = o.max_iterations {
            self.ira.max_iterations = iters;
        }
    }

    pub fn ira_config(&self) -> IraConfig {
        IraConfig {
            rho: self.ira.rho,
            cost_tolerance: self.ira.cost_tolerance,
            tol_active: self.ira.tol_active,
            max_iterations: self.ira.max_iterations,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            family: self.montecarlo.family,
            trials: self.montecarlo.trials,
            seed: self.montecarlo.seed,
            keep_trajectories: self.montecarlo.keep_trajectories,
        }
    }

    pub fn build(&self) -> Result<SteeringProblem, CliError> {
        let s = &self.system;
        let system = LinearSystemSpec::time_invariant(
            matrix("system.a", &s.a)?,
            matrix("system.b", &s.b)?,
            matrix("system.d", &s.d)?,
            matrix("system.noise_cov", &s.noise_cov)?,
            s.horizon,
        )
        .map_err(|e| field("system", e))?;
        let initial = moments("initial", &self.initial)?;
        let terminal = moments("terminal", &self.terminal)?;
        let q = matrix("cost.q", &self.cost.q)?;
        let r = matrix("cost.r", &self.cost.r)?;
        let constraints = self.constraint_set()?;
        if !(self.ira.rho > 0.0 && self.ira.rho < 1.0) {
            return Err(CliError::Parse(format!("ira.rho: {} is outside (0, 1)", self.ira.rho)));
        }
        if self.ira.max_iterations == 0 {
            return Err(CliError::Parse("ira.max_iterations: must be at least 1".into()));
        }
        if self.montecarlo.trials == 0 {
            return Err(CliError::Parse("montecarlo.trials: must be at least 1".into()));
        }
        SteeringProblem::new(ProblemData {
            system,
            initial,
            terminal,
            state_cost: vec![q; s.horizon],
            input_cost: vec![r; s.horizon],
            constraints,
            budget: self.risk.budget,
            mode: self.risk.mode,
            causal_feedback: self.risk.causal_feedback,
        })
        .map_err(|e| field("problem", e))
    }

    fn constraint_set(&self) -> Result<ConstraintSet, CliError> {
        match self.constraints.active {
            ConstraintKind::Polytope => {
                let p = self.constraints.polytope.as_ref().ok_or_else(|| {
                    CliError::Parse("constraints.polytope: section missing for use = \"polytope\"".into())
                })?;
                if p.normals.len() != p.offsets.len() {
                    return Err(CliError::Parse(format!(
                        "constraints.polytope.offsets: {} offsets for {} normals",
                        p.offsets.len(),
                        p.normals.len()
                    )));
                }
                let halfspaces = p
                    .normals
                    .iter()
                    .zip(&p.offsets)
                    .enumerate()
                    .map(|(i, (normal, &offset))| {
                        HalfSpace::new(DVector::from_vec(normal.clone()), offset)
                            .map_err(|e| field(&format!("constraints.polytope.normals[{i}]"), e))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ConstraintSet::HalfSpaces(halfspaces))
            }
            ConstraintKind::Cone => {
                let c =
                    self.constraints.cone.as_ref().ok_or_else(|| {
                        CliError::Parse("constraints.cone: section missing for use = \"cone\"".into())
                    })?;
                let set = SecondOrderConeSet::new(
                    matrix("constraints.cone.a", &c.a)?,
                    DVector::from_vec(c.b.clone()),
                    DVector::from_vec(c.c.clone()),
                    c.d,
                )
                .map_err(|e| field("constraints.cone", e))?;
                Ok(ConstraintSet::Cone(set))
            }
        }
    }
}

fn field(path: &str, e: covsteer::Error) -> CliError {
    CliError::Parse(format!("{path}: {e}"))
}

fn matrix(path: &str, rows: &Matrix) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(CliError::Parse(format!(
            "{path}[{i}]: row has {} entries, expected {ncols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn moments(path: &str, m: &MomentsConfig) -> Result<MomentPair, CliError> {
    MomentPair::new(
        DVector::from_vec(m.mean.clone()),
        matrix(&format!("{path}.cov"), &m.cov)?,
    )
    .map_err(|e| field(path, e))
}

pub fn to_rows(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
