//! Problem configs (TOML). Unknown keys are rejected everywhere.

use serde::Deserialize;
use thiserror::Error;

use crate::compose::{ComposedPairingTest, OperatorKernel, Slot};
use crate::oracle::QuadratureSpec;
use crate::phase::Patch;
use crate::symbol::FiberBox;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing [{0}] section")]
    Missing(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub phase: Option<PhaseSection>,
    pub amplitude: Option<AmplitudeSection>,
    pub psi: Option<PsiSection>,
    pub stationary: Option<StationarySection>,
    pub compose: Option<ComposeSection>,
    pub oracle: Option<OracleSection>,
    pub validate: Option<ValidateSection>,
}

/// `φ(x, θ)` in the standard layout `x1..xn, theta1..thetaN`. With
/// `big_n = 0` the expression is a stationary-phase `F(x)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub expr: String,
    pub n: usize,
    #[serde(default = "one")]
    pub big_n: usize,
    /// Seed for the real critical point, `(x, θ)`.
    pub point: Option<Vec<f64>>,
    pub patch: Option<PatchSection>,
    /// Box for the excess frequencies `θ″`.
    pub fiber: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
    #[serde(default = "default_cone")]
    pub cone_angle: f64,
    #[serde(default = "default_radial")]
    pub radial: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplitudeSection {
    pub expr: String,
    #[serde(default)]
    pub degree: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiSection {
    #[serde(default = "one_f")]
    pub lambda: f64,
    #[serde(default)]
    pub kappa: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarySection {
    #[serde(default = "crate::oracle::default_t_grid")]
    pub t_grid: Vec<f64>,
    /// Box half-width for `F(x)`; support radius of `u` for pairings.
    #[serde(default = "one_f")]
    pub cutoff: f64,
    /// Plateau radius of the scaled-frequency cutoff in pairings.
    #[serde(default = "default_eta")]
    pub eta_cutoff: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub phase: String,
    #[serde(default = "default_amp")]
    pub amplitude: String,
    #[serde(default)]
    pub degree: f64,
    /// Sizes in the slot's group order: `[n_X, n_Y, N₁]` on the left,
    /// `[n_Y, n_Z, N₂]` on the right.
    pub dims: [usize; 3],
}

impl KernelSection {
    pub fn build(&self, slot: Slot) -> Result<OperatorKernel, crate::compose::ComposeError> {
        OperatorKernel::new(slot, &self.phase, &self.amplitude, self.degree, self.dims)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeSection {
    pub left: KernelSection,
    pub right: KernelSection,
    /// Seed for γ in `(x, z, y, θ, σ)`; default `θ₁ = σ₁ = 1`, rest 0.
    pub seed: Option<Vec<f64>>,
    #[serde(default = "default_excess_samples")]
    pub samples: usize,
    /// Box for the excess directions, in `(y″, θ″, σ″)` order.
    pub fiber: Option<Vec<[f64; 2]>>,
    pub pairing: Option<PairingSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingSection {
    pub t_grid: Vec<f64>,
    #[serde(default = "default_radius")]
    pub u_radius: f64,
    #[serde(default = "default_radius")]
    pub eta_radius: f64,
    #[serde(default = "default_radius")]
    pub y_radius: f64,
    #[serde(default = "default_pair_lambda")]
    pub lambda: f64,
    #[serde(default = "one_f")]
    pub kappa: f64,
}

impl PairingSection {
    pub fn test(&self) -> ComposedPairingTest {
        ComposedPairingTest { u_radius: self.u_radius, eta_radius: self.eta_radius, y_radius: self.y_radius }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub c: Option<f64>,
    pub min_nodes: Option<usize>,
    pub panel_nodes: Option<usize>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub max_points: Option<f64>,
}

impl OracleSection {
    /// Overrides on top of `base`.
    pub fn spec(&self, base: QuadratureSpec) -> QuadratureSpec {
        QuadratureSpec {
            c: self.c.unwrap_or(base.c),
            min_nodes: self.min_nodes.unwrap_or(base.min_nodes),
            panel_nodes: self.panel_nodes.unwrap_or(base.panel_nodes),
            rel_tol: self.rel_tol.unwrap_or(base.rel_tol),
            abs_tol: self.abs_tol.unwrap_or(base.abs_tol),
            max_points: self.max_points.unwrap_or(base.max_points),
            ..base
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    /// Criterion ids to run; all when absent.
    pub criteria: Option<Vec<u32>>,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_samples() -> usize {
    32
}
fn default_excess_samples() -> usize {
    10
}
fn default_cone() -> f64 {
    0.3
}
fn default_radial() -> [f64; 2] {
    [0.5, 2.0]
}
fn default_eta() -> f64 {
    0.4
}
fn default_amp() -> String {
    "1".into()
}
fn default_radius() -> f64 {
    1.3
}
fn default_pair_lambda() -> f64 {
    0.2
}

pub fn fiber_box(v: &Option<Vec<[f64; 2]>>) -> Option<FiberBox> {
    v.as_ref().map(|b| FiberBox { intervals: b.iter().map(|&[lo, hi]| (lo, hi)).collect() })
}

impl PatchSection {
    pub fn patch(&self) -> Patch {
        Patch { center: self.center.clone(), radius: self.radius.clone(), cone_angle: self.cone_angle, radial: (self.radial[0], self.radial[1]) }
    }
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ProblemConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if let Some(s) = &self.stationary {
            positive("stationary.cutoff", s.cutoff)?;
            positive("stationary.eta_cutoff", s.eta_cutoff)?;
            for &t in &s.t_grid {
                positive("stationary.t_grid entry", t)?;
            }
        }
        if let Some(p) = &self.psi {
            positive("psi.lambda", p.lambda)?;
            if !(p.kappa >= 0.0) {
                return Err(ConfigError::Invalid(format!("psi.kappa must be >= 0, got {}", p.kappa)));
            }
        }
        if let Some(c) = &self.compose {
            if let Some(p) = &c.pairing {
                for (name, v) in [("u_radius", p.u_radius), ("eta_radius", p.eta_radius), ("y_radius", p.y_radius), ("lambda", p.lambda)] {
                    positive(&format!("compose.pairing.{name}"), v)?;
                }
                for &t in &p.t_grid {
                    positive("compose.pairing.t_grid entry", t)?;
                }
            }
        }
        if let Some(o) = &self.oracle {
            for (name, v) in [("c", o.c), ("rel_tol", o.rel_tol), ("max_points", o.max_points)] {
                if let Some(v) = v {
                    positive(&format!("oracle.{name}"), v)?;
                }
            }
        }
        if let Some(v) = &self.validate {
            if let Some(ids) = &v.criteria {
                if let Some(bad) = ids.iter().find(|&&k| !(1..=10).contains(&k)) {
                    return Err(ConfigError::Invalid(format!("unknown criterion {bad}")));
                }
            }
        }
        Ok(())
    }
}
