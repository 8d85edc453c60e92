//! TOML scenario files driving the pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hopf::{ErrorShape, HopfOptions, DEFAULT_NODES};
use crate::lifting::{LiftMap, LiftSpec};
use crate::models::{analytic_slow_manifold_model, fit_dmd, fit_edmd, sample_trajectories, taylor_model, LiftedLinearModel};
use crate::rollout::{DisturbancePolicy, RolloutOptions};
use crate::systems::{make_demo_system, AffineSystem};
use crate::targets::{AugMode, TargetSpec};
use crate::tube::{AxisBox, Paving, DEFAULT_DIAMETER_CAP, DEFAULT_INFLATION};
use crate::GameSense;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedSection {
    pub eta: f64,
    /// Level of the augmented target; defaults to the base target level.
    #[serde(default)]
    pub level: Option<f64>,
    /// Raise an invalid outer level to the smallest sampled-valid one.
    #[serde(default)]
    pub auto_level: bool,
    #[serde(default = "default_audit_samples")]
    pub audit_samples: usize,
}

fn default_audit_samples() -> usize {
    crate::targets::DEFAULT_AUDIT_SAMPLES
}

/// How the linear model of one lift is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitSpec {
    /// Closed-form model of the slow-manifold system on its exact lift.
    Analytic,
    /// First-order expansion; about the target center when `center` is absent.
    Taylor {
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    Edmd(SampleSpec),
    /// Least squares on the identity lift.
    Dmd(SampleSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_snippet")]
    pub snippet: usize,
    #[serde(default = "default_sample_step")]
    pub step: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Sampling box; the union box of the tube when absent.
    #[serde(default)]
    pub lo: Option<Vec<f64>>,
    #[serde(default)]
    pub hi: Option<Vec<f64>>,
}

fn default_samples() -> usize {
    2000
}
fn default_snippet() -> usize {
    10
}
fn default_sample_step() -> f64 {
    0.01
}
fn default_ridge() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub lift: LiftSpec,
    pub fit: FitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub t_final: f64,
    /// Horizon lengths `T - t`.
    pub lengths: Vec<f64>,
}

/// Tensor grid on `[lo, hi]` with `n[i]` nodes per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridSection {
    pub fn axes(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.lo.len()).map(|i| crate::dp::uniform_axis(self.lo[i], self.hi[i], self.n[i])).collect()
    }

    /// Nodes in row-major order (last axis fastest), matching `ValueGrid`.
    pub fn points(&self) -> Result<Vec<DVector<f64>>> {
        let axes = self.axes()?;
        let mut out = Vec::new();
        for a in &axes[0] {
            for b in &axes[1] {
                out.push(DVector::from_row_slice(&[*a, *b]));
            }
        }
        Ok(out)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo.len() != 2 || self.hi.len() != 2 || self.n.len() != 2 {
            return Err(Error::Validation(format!("{what}: grids are two-dimensional")));
        }
        for i in 0..2 {
            if !(self.lo[i] < self.hi[i]) || self.n[i] < 3 {
                return Err(Error::Validation(format!("{what}: need lo < hi and n >= 3 on axis {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

impl DpSection {
    pub fn grid(&self) -> GridSection {
        GridSection {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            n: self.n.clone(),
        }
    }
}

fn default_cfl() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TubeMethod {
    /// A single box per time step.
    #[default]
    Box,
    /// A paving of grid cells per time step.
    Paved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSection {
    #[serde(default = "default_tube_step")]
    pub step: f64,
    #[serde(default)]
    pub method: TubeMethod,
    #[serde(default)]
    pub paving: Paving,
    #[serde(default = "default_cap")]
    pub cap: f64,
}

fn default_tube_step() -> f64 {
    0.01
}
fn default_cap() -> f64 {
    DEFAULT_DIAMETER_CAP
}

impl Default for TubeSection {
    fn default() -> Self {
        TubeSection {
            step: default_tube_step(),
            method: TubeMethod::Box,
            paving: Paving::default(),
            cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrBoundSection {
    /// Points per axis of the grid laid over each tube box.
    #[serde(default = "default_err_grid")]
    pub grid: usize,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    #[serde(default)]
    pub error_set: ErrorShape,
    /// Piecewise-constant pieces over the horizon; 1 gives a constant bound.
    #[serde(default = "default_pieces")]
    pub pieces: usize,
}

fn default_err_grid() -> usize {
    21
}
fn default_inflation() -> f64 {
    DEFAULT_INFLATION
}
fn default_pieces() -> usize {
    1
}

impl Default for ErrBoundSection {
    fn default() -> Self {
        ErrBoundSection {
            grid: default_err_grid(),
            inflation: default_inflation(),
            error_set: ErrorShape::Ball,
            pieces: default_pieces(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub restarts: usize,
    pub max_iters: usize,
    pub step: f64,
    pub tol: f64,
    /// Quadrature intervals on `[t, T]`.
    pub nodes: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let h = HopfOptions::default();
        SolverSection {
            restarts: h.restarts,
            max_iters: h.max_iters,
            step: h.step,
            tol: h.tol,
            nodes: DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Value tolerance; one DP cell times a field Lipschitz estimate when absent.
    #[serde(default)]
    pub tol: Option<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { tol: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub enabled: bool,
    /// Number of certified grid points to simulate.
    pub points: usize,
    pub policies: Vec<DisturbancePolicy>,
    /// Model used for control; the first model when absent.
    pub model: Option<String>,
    /// Horizon length; the longest one when absent.
    pub horizon: Option<f64>,
    pub replan_every: usize,
    pub step: f64,
    pub margin: f64,
    pub keep_trajectories: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let o = RolloutOptions::default();
        RolloutSection {
            enabled: false,
            points: 50,
            policies: vec![DisturbancePolicy::Random { seed: 0 }, DisturbancePolicy::ExtremalCostate],
            model: None,
            horizon: None,
            replan_every: o.replan_every,
            step: o.step,
            margin: o.margin,
            keep_trajectories: false,
        }
    }
}

impl RolloutSection {
    pub fn options(&self) -> RolloutOptions {
        RolloutOptions {
            replan_every: self.replan_every,
            step: self.step,
            margin: self.margin,
            keep_trajectory: self.keep_trajectories,
            ..RolloutOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub sense: GameSense,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub target: TargetSpec,
    pub augmented: AugmentedSection,
    pub models: Vec<ModelSection>,
    pub horizons: HorizonSection,
    pub grid: GridSection,
    pub dp: DpSection,
    #[serde(default)]
    pub tube: TubeSection,
    #[serde(default)]
    pub errbound: ErrBoundSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    /// Also run identity-lift Taylor and DMD models.
    #[serde(default)]
    pub baselines: bool,
    /// Drop the error player; such runs are never certified.
    #[serde(default)]
    pub ablation_zero_delta: bool,
}

pub const BUNDLED: [&str; 2] = ["slow_manifold_reach", "vanderpol_avoid_poly3"];

const SLOW_MANIFOLD_REACH: &str = include_str!("../scenarios/slow_manifold_reach.toml");
const VANDERPOL_AVOID_POLY3: &str = include_str!("../scenarios/vanderpol_avoid_poly3.toml");

fn positive(what: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Validation(format!("{what} must be positive and finite, got {v}")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Validation(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Scenario::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "slow_manifold_reach" => Scenario::from_toml(SLOW_MANIFOLD_REACH),
            "vanderpol_avoid_poly3" => Scenario::from_toml(VANDERPOL_AVOID_POLY3),
            _ => Err(Error::NotFound { kind: "scenario", name: name.to_string(), valid: BUNDLED.join(", ") }),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.build_system()?;
        let n = sys.state_dim();
        if n != 2 {
            return Err(Error::Validation(format!("pipeline needs a 2D system, '{}' has {n} states", self.system.name)));
        }
        let base = self.target.build().map_err(|e| Error::Validation(e.to_string()))?;
        if base.dim() != n {
            return Err(Error::Validation(format!("target has dimension {}, system {n}", base.dim())));
        }
        positive("augmented.eta", self.augmented.eta)?;
        if let Some(l) = self.augmented.level {
            positive("augmented.level", l)?;
        }
        if self.augmented.audit_samples == 0 {
            return Err(Error::Validation("augmented.audit_samples must be positive".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Validation("at least one model is required".into()));
        }
        let sections = self.model_sections();
        let mut names: Vec<&str> = sections.iter().map(|m| m.name.as_str()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        if names.len() != before {
            return Err(Error::Validation("model names must be unique".into()));
        }
        for m in &self.models {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Validation(format!("model name '{}' must be [A-Za-z0-9_-]+", m.name)));
            }
            LiftMap::from_spec(&m.lift, n).map_err(|e| Error::Validation(format!("model '{}': {e}", m.name)))?;
            match &m.fit {
                FitSpec::Analytic => {
                    if self.system.name != "slow_manifold" || m.lift != LiftSpec::SlowManifold {
                        return Err(Error::Validation(format!(
                            "model '{}': the analytic fit exists only for the slow_manifold system on its own lift",
                            m.name
                        )));
                    }
                }
                FitSpec::Taylor { center } => {
                    if let Some(c) = center {
                        if c.len() != n {
                            return Err(Error::Validation(format!("model '{}': Taylor center needs {n} entries", m.name)));
                        }
                    }
                }
                FitSpec::Edmd(s) | FitSpec::Dmd(s) => {
                    if s.samples == 0 || s.snippet == 0 {
                        return Err(Error::Validation(format!("model '{}': sample sizes must be positive", m.name)));
                    }
                    positive("sample step", s.step)?;
                    if !(s.ridge >= 0.0) {
                        return Err(Error::Validation(format!("model '{}': ridge must be nonnegative", m.name)));
                    }
                    match (&s.lo, &s.hi) {
                        (None, None) => {}
                        (Some(lo), Some(hi)) if lo.len() == n && hi.len() == n && lo.iter().zip(hi).all(|(a, b)| a < b) => {}
                        _ => {
                            return Err(Error::Validation(format!(
                                "model '{}': sample box needs both lo and hi with lo < hi",
                                m.name
                            )))
                        }
                    }
                    if matches!(m.fit, FitSpec::Dmd(_)) && m.lift != LiftSpec::Identity {
                        return Err(Error::Validation(format!("model '{}': DMD uses the identity lift", m.name)));
                    }
                }
            }
        }
        if !self.horizons.t_final.is_finite() {
            return Err(Error::Validation("horizons.t_final must be finite".into()));
        }
        if self.horizons.lengths.is_empty() {
            return Err(Error::Validation("horizons.lengths must not be empty".into()));
        }
        for h in &self.horizons.lengths {
            positive("horizon length", *h)?;
        }
        if self.horizons.lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("horizons.lengths must increase strictly".into()));
        }
        self.grid.validate("grid")?;
        self.dp.grid().validate("dp")?;
        for i in 0..2 {
            if self.grid.lo[i] < self.dp.lo[i] || self.grid.hi[i] > self.dp.hi[i] {
                return Err(Error::Validation("the query grid must lie inside the DP grid".into()));
            }
        }
        if !(self.dp.cfl > 0.0 && self.dp.cfl <= 1.0) {
            return Err(Error::Validation(format!("dp.cfl must be in (0, 1], got {}", self.dp.cfl)));
        }
        positive("tube.step", self.tube.step)?;
        positive("tube.cap", self.tube.cap)?;
        positive("tube.paving.cell", self.tube.paving.cell)?;
        if self.tube.paving.substeps == 0 {
            return Err(Error::Validation("tube.paving.substeps must be positive".into()));
        }
        if self.errbound.grid < 2 || self.errbound.pieces == 0 {
            return Err(Error::Validation("errbound.grid >= 2 and errbound.pieces >= 1 required".into()));
        }
        if !(self.errbound.inflation >= 0.0) {
            return Err(Error::Validation("errbound.inflation must be nonnegative".into()));
        }
        if self.solver.nodes < 2 || self.solver.restarts == 0 || self.solver.max_iters == 0 {
            return Err(Error::Validation("solver needs nodes >= 2, restarts >= 1, max_iters >= 1".into()));
        }
        positive("solver.step", self.solver.step)?;
        positive("solver.tol", self.solver.tol)?;
        if let Some(t) = self.compare.tol {
            if !(t >= 0.0) {
                return Err(Error::Validation("compare.tol must be nonnegative".into()));
            }
        }
        let r = &self.rollout;
        if r.enabled {
            if r.points == 0 || r.policies.is_empty() {
                return Err(Error::Validation("rollout needs points and policies".into()));
            }
            positive("rollout.step", r.step)?;
            if !(r.margin >= 0.0) {
                return Err(Error::Validation("rollout.margin must be nonnegative".into()));
            }
            if let Some(name) = &r.model {
                if !self.model_sections().iter().any(|m| &m.name == name) {
                    return Err(Error::Validation(format!("rollout model '{name}' is not defined")));
                }
            }
            if let Some(h) = r.horizon {
                if !self.horizons.lengths.iter().any(|l| (l - h).abs() < 1e-12) {
                    return Err(Error::Validation(format!("rollout horizon {h} is not in horizons.lengths")));
                }
            }
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<AffineSystem> {
        make_demo_system(&self.system.name, &self.system.params).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Declared models plus the identity-lift baselines when requested.
    pub fn model_sections(&self) -> Vec<ModelSection> {
        let mut out = self.models.clone();
        if self.baselines {
            out.push(ModelSection {
                name: "baseline_taylor".into(),
                lift: LiftSpec::Identity,
                fit: FitSpec::Taylor { center: None },
            });
            out.push(ModelSection {
                name: "baseline_dmd".into(),
                lift: LiftSpec::Identity,
                fit: FitSpec::Dmd(SampleSpec {
                    samples: default_samples(),
                    snippet: default_snippet(),
                    step: default_sample_step(),
                    ridge: default_ridge(),
                    lo: None,
                    hi: None,
                }),
            });
        }
        out
    }

    pub fn aug_mode(&self) -> AugMode {
        match self.sense {
            GameSense::Reach => AugMode::ReachInner,
            GameSense::Avoid => AugMode::AvoidOuter,
        }
    }

    /// Game start times `T - h`, longest horizon last.
    pub fn start_times(&self) -> Vec<f64> {
        self.horizons.lengths.iter().map(|h| self.horizons.t_final - h).collect()
    }

    pub fn hopf_options(&self) -> HopfOptions {
        HopfOptions {
            restarts: self.solver.restarts,
            max_iters: self.solver.max_iters,
            step: self.solver.step,
            tol: self.solver.tol,
            seed: self.seed,
        }
    }
}

/// Fits the model of one section; `sample_box` is used when the section
/// gives none.
pub fn build_model(
    scn: &Scenario,
    sys: &AffineSystem,
    section: &ModelSection,
    sample_box: &AxisBox,
    seed: u64,
) -> Result<LiftedLinearModel> {
    let lift = LiftMap::from_spec(&section.lift, sys.state_dim())?;
    let sample = |s: &SampleSpec| {
        let lo = s.lo.clone().unwrap_or_else(|| sample_box.lo.clone());
        let hi = s.hi.clone().unwrap_or_else(|| sample_box.hi.clone());
        sample_trajectories(sys, &lo, &hi, s.samples, s.snippet, s.step, seed)
    };
    match &section.fit {
        FitSpec::Analytic => {
            let p = |k: &str, d: f64| scn.system.params.get(k).copied().unwrap_or(d);
            analytic_slow_manifold_model(&DVector::from_row_slice(&scn.target.center), p("mu", -0.05), p("lambda", -1.0))
        }
        FitSpec::Taylor { center } => {
            let c = center.clone().unwrap_or_else(|| scn.target.center.clone());
            taylor_model(sys, &lift, &DVector::from_row_slice(&c))
        }
        FitSpec::Edmd(s) => fit_edmd(&lift, &sample(s)?, s.ridge),
        FitSpec::Dmd(s) => fit_dmd(sys, &sample(s)?, s.ridge),
    }
}
