//! Built-in experiment configurations.

use covsteer::risk::RiskMode;
use nalgebra::{DMatrix, DVector};

use crate::config::{
    to_rows, ConeConfig, ConstraintKind, ConstraintsConfig, CostConfig, IraSection, MomentsConfig, MonteCarloSection,
    PolytopeConfig, ProblemConfig, RiskConfig, SystemConfig, SCHEMA_VERSION,
};

/// Orbital rate of the Clohessy-Wiltshire model, rad/s.
pub const ORBITAL_RATE: f64 = 0.001;
/// Spacecraft discretization step, s.
pub const SPACECRAFT_STEP: f64 = 1.0;
pub const SPACECRAFT_HORIZON: usize = 20;
/// Half-angle of the approach corridor, as its tangent (tan 30°).
pub const CORRIDOR_SLOPE: f64 = 0.577_350_269_189_625_7;
/// Apex of the corridor along the y axis.
pub const CORRIDOR_APEX: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    DoubleIntegrator,
    SpacecraftPolytope,
    SpacecraftCone,
}

impl PresetName {
    pub const ALL: [PresetName; 3] = [
        PresetName::DoubleIntegrator,
        PresetName::SpacecraftPolytope,
        PresetName::SpacecraftCone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::DoubleIntegrator => "double_integrator",
            PresetName::SpacecraftPolytope => "spacecraft_polytope",
            PresetName::SpacecraftCone => "spacecraft_cone",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            format!("unknown preset {s:?} (expected double_integrator, spacecraft_polytope or spacecraft_cone)")
        })
    }
}

pub fn preset(name: PresetName) -> ProblemConfig {
    match name {
        PresetName::DoubleIntegrator => double_integrator(),
        PresetName::SpacecraftPolytope => spacecraft(ConstraintKind::Polytope),
        PresetName::SpacecraftCone => spacecraft(ConstraintKind::Cone),
    }
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

fn double_integrator() -> ProblemConfig {
    let dt = 0.2;
    let horizon = 15;
    let i2 = DMatrix::<f64>::identity(2, 2);
    let mut a = DMatrix::identity(4, 4);
    a.view_mut((0, 2), (2, 2)).copy_from(&(&i2 * dt));
    let mut b = DMatrix::zeros(4, 2);
    b.view_mut((0, 0), (2, 2)).copy_from(&(&i2 * (dt * dt)));
    b.view_mut((2, 0), (2, 2)).copy_from(&(&i2 * dt));
    let s0 = diag(&[0.1, 0.1, 0.01, 0.01]);
    ProblemConfig {
        schema_version: SCHEMA_VERSION,
        name: "double_integrator".into(),
        notes: vec![],
        system: SystemConfig {
            horizon,
            a: to_rows(&a),
            b: to_rows(&b),
            d: to_rows(&(DMatrix::identity(4, 4) * 1e-3)),
            noise_cov: to_rows(&DMatrix::identity(4, 4)),
        },
        initial: MomentsConfig {
            mean: vec![-10.0, 1.0, 0.0, 0.0],
            cov: to_rows(&s0),
        },
        terminal: MomentsConfig {
            mean: vec![0.0; 4],
            cov: to_rows(&(s0 * 0.25)),
        },
        cost: CostConfig {
            q: to_rows(&diag(&[10.0, 10.0, 1.0, 1.0])),
            r: to_rows(&(DMatrix::identity(2, 2) * 1e3)),
        },
        // 0.2 (x - 1) ≤ y ≤ -0.2 (x - 1)
        constraints: ConstraintsConfig {
            active: ConstraintKind::Polytope,
            polytope: Some(PolytopeConfig {
                normals: vec![vec![0.2, -1.0, 0.0, 0.0], vec![0.2, 1.0, 0.0, 0.0]],
                offsets: vec![0.2, 0.2],
            }),
            cone: None,
        },
        risk: RiskConfig {
            budget: 0.10,
            mode: RiskMode::Dr,
            causal_feedback: false,
        },
        ira: IraSection::default(),
        montecarlo: MonteCarloSection::default(),
    }
}

/// Zero-order-hold discretization of the Clohessy-Wiltshire equations.
pub fn clohessy_wiltshire(rate: f64, step: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let w2 = rate * rate;
    let mut ac = DMatrix::zeros(6, 6);
    ac.view_mut((0, 3), (3, 3)).fill_with_identity();
    ac[(3, 0)] = 3.0 * w2;
    ac[(3, 4)] = 2.0 * rate;
    ac[(4, 3)] = -2.0 * rate;
    ac[(5, 2)] = -w2;
    let mut aug = DMatrix::zeros(9, 9);
    aug.view_mut((0, 0), (6, 6)).copy_from(&(ac * step));
    for i in 0..3 {
        aug[(3 + i, 6 + i)] = step;
    }
    let e = aug.exp();
    (e.view((0, 0), (6, 6)).into_owned(), e.view((0, 6), (6, 3)).into_owned())
}

fn spacecraft(kind: ConstraintKind) -> ProblemConfig {
    let (a, b) = clohessy_wiltshire(ORBITAL_RATE, SPACECRAFT_STEP);
    let s0 = diag(&[1.0, 1.0, 1.0, 0.1, 0.1, 0.1]) * 0.4;
    let mut mean = vec![100.0, -120.0, 90.0, 0.0, 0.0, 0.0];
    if kind == ConstraintKind::Cone {
        mean[0] = 10.0;
    }
    let t = CORRIDOR_SLOPE;
    let apex = t * CORRIDOR_APEX;
    let e = |i: usize, v: f64| {
        let mut row = vec![0.0; 6];
        row[i] = v;
        row
    };
    // |x| ≤ t (apex - y) as two half-spaces, or ‖(x, z)‖ ≤ t (apex - y).
    let mut left = e(0, 1.0);
    left[1] = t;
    let mut right = e(0, -1.0);
    right[1] = t;
    let polytope = PolytopeConfig {
        normals: vec![left, right],
        offsets: vec![apex, apex],
    };
    let cone = ConeConfig {
        a: vec![e(0, 1.0), e(2, 1.0)],
        b: vec![0.0, 0.0],
        c: e(1, -t),
        d: apex,
    };
    let name = match kind {
        ConstraintKind::Polytope => "spacecraft_polytope",
        ConstraintKind::Cone => "spacecraft_cone",
    };
    ProblemConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        notes: vec![format!(
            "approximate reproduction: Clohessy-Wiltshire dynamics with orbital rate {ORBITAL_RATE} rad/s, \
             step {SPACECRAFT_STEP} s and horizon {SPACECRAFT_HORIZON}, and a 30 degree approach corridor \
             with apex at y = {CORRIDOR_APEX}, are chosen defaults"
        )],
        system: SystemConfig {
            horizon: SPACECRAFT_HORIZON,
            a: to_rows(&a),
            b: to_rows(&b),
            d: to_rows(&(DMatrix::identity(6, 6) * 1e-3)),
            noise_cov: to_rows(&DMatrix::identity(6, 6)),
        },
        initial: MomentsConfig {
            mean,
            cov: to_rows(&s0),
        },
        terminal: MomentsConfig {
            mean: vec![0.0; 6],
            cov: to_rows(&(s0 * 0.5)),
        },
        cost: CostConfig {
            q: to_rows(&diag(&[10.0, 10.0, 10.0, 1.0, 1.0, 1.0])),
            r: to_rows(&(DMatrix::identity(3, 3) * 1e3)),
        },
        constraints: ConstraintsConfig {
            active: kind,
            polytope: Some(polytope),
            cone: Some(cone),
        },
        risk: RiskConfig {
            budget: 0.15,
            mode: RiskMode::Dr,
            causal_feedback: false,
        },
        ira: IraSection::default(),
        montecarlo: MonteCarloSection::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_values() {
        let cfg = preset(PresetName::DoubleIntegrator);
        assert_eq!(cfg.risk.budget, 0.10);
        assert_eq!(cfg.system.horizon, 15);
        assert_eq!(cfg.system.b[0], vec![0.04000000000000001, 0.0]);
        assert_eq!(cfg.montecarlo.trials, 500);
    }

    #[test]
    fn spacecraft_values() {
        let poly = preset(PresetName::SpacecraftPolytope);
        assert_eq!(poly.risk.budget, 0.15);
        assert_eq!(poly.cost.r, to_rows(&(DMatrix::identity(3, 3) * 1e3)));
        let cone = preset(PresetName::SpacecraftCone);
        assert_eq!(cone.initial.mean[0], 10.0);
        assert_eq!(cone.initial.mean[1..], poly.initial.mean[1..]);
        assert_eq!(cone.constraints.active, ConstraintKind::Cone);
    }

    #[test]
    fn clohessy_wiltshire_limits() {
        // Zero rate is a pure double integrator per axis.
        let (a, b) = clohessy_wiltshire(0.0, 2.0);
        assert!((a[(0, 3)] - 2.0).abs() < 1e-14);
        assert!((b[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((b[(3, 0)] - 2.0).abs() < 1e-14);
        // Out-of-plane motion is a harmonic oscillator.
        let (a, _) = clohessy_wiltshire(0.1, 1.0);
        assert!((a[(2, 2)] - 0.1f64.cos()).abs() < 1e-12);
        assert!((a[(2, 5)] - 0.1f64.sin() / 0.1).abs() < 1e-12);
    }

    #[test]
    fn names_parse() {
        for p in PresetName::ALL {
            assert_eq!(p.as_str().parse::<PresetName>().unwrap(), p);
        }
        assert!("nope".parse::<PresetName>().is_err());
    }
}
