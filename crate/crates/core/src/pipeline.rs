//! Scenario-driven chain of stages communicating through files in one output
//! directory: tube, fit, error bound, Hopf grids, DP oracle, containment
//! comparison, rollouts and contour export.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contours::{level_curves, write_curves};
use crate::dp::{solve_dp_snapshots, ValueGrid};
use crate::error::{Error, Result};
use crate::hopf::{solve_grid, solve_value, ErrorProfile, ErrorShape, FlowCache, HopfProblem};
use crate::io::{fmt_float, read_json, write_json, Table};
use crate::lifting::LiftMap;
use crate::models::LiftedLinearModel;
use crate::rollout::{batch_rollouts, RolloutReport};
use crate::scenario::{build_model, ModelSection, Scenario, TubeMethod};
use crate::systems::AffineSystem;
use crate::targets::{make_aug_targets, AuditOptions, AugTargetPair, QuadTarget};
use crate::tube::{backward_tube, backward_tube_paved, error_bound_delta, error_profile, AxisBox, BoxTube, ErrorBound};
use crate::GameSense;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Tube,
    Fit,
    Errbound,
    Solve,
    Dp,
    Compare,
    Rollout,
    Contours,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Tube,
        Stage::Fit,
        Stage::Errbound,
        Stage::Solve,
        Stage::Dp,
        Stage::Compare,
        Stage::Rollout,
        Stage::Contours,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Tube => "tube",
            Stage::Fit => "fit",
            Stage::Errbound => "errbound",
            Stage::Solve => "solve",
            Stage::Dp => "dp",
            Stage::Compare => "compare",
            Stage::Rollout => "rollout",
            Stage::Contours => "contours",
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_VIOLATION: i32 = 4;

/// Process exit code for an error: 2 for bad input, 3 for numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. }
        | Error::Evaluation(_)
        | Error::SingularFit(_)
        | Error::TubeBlowUp { .. }
        | Error::Numerical(_)
        | Error::OutOfDomain(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// A failure tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl StageError {
    pub fn code(&self) -> i32 {
        exit_code(&self.error)
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

fn at(stage: Stage) -> impl Fn(Error) -> StageError {
    move |error| StageError { stage, error }
}

/// Output directory plus the overwrite policy.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Workspace { root, force })
    }

    /// Path of an artifact that is about to be written.
    fn output(&self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if p.exists() && !self.force {
            return Err(Error::Validation(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Path of an artifact produced by an earlier stage.
    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if !p.exists() {
            return Err(Error::Validation(format!(
                "missing artifact {}; run the stage that produces it first",
                p.display()
            )));
        }
        Ok(p)
    }

    fn is_empty(&self) -> Result<bool> {
        Ok(std::fs::read_dir(&self.root)?.next().is_none())
    }
}

fn hz(h: f64) -> String {
    format!("h{}", fmt_float(h))
}

pub fn model_file(model: &str) -> String {
    format!("model_{model}.json")
}
pub fn delta_file(model: &str, h: f64) -> String {
    format!("delta_{model}_{}.json", hz(h))
}
pub fn hopf_file(model: &str, h: f64) -> String {
    format!("hopf_{model}_{}.vgrid", hz(h))
}
pub fn dp_file(h: f64) -> String {
    format!("dp_{}.vgrid", hz(h))
}
pub const TUBE_FILE: &str = "tube.json";
pub const CONTAINMENT_FILE: &str = "containment.json";
pub const ROLLOUT_FILE: &str = "rollout.json";

/// The error set handed to the lifted game for one model and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub model: String,
    pub horizon: f64,
    pub t: f64,
    pub t_final: f64,
    /// Ball radius used when `profile` is absent.
    pub delta: f64,
    pub profile: Option<ErrorProfile>,
    pub bound: ErrorBound,
    /// Level of the augmented target the game is played on.
    pub game_level: f64,
    pub requested_level: f64,
    pub ablation: bool,
}

fn base_target(scn: &Scenario) -> Result<QuadTarget> {
    scn.target.build()
}

fn tube_for(scn: &Scenario, sys: &AffineSystem, base: &QuadTarget) -> Result<BoxTube> {
    let (lo, hi) = base.bounding_box();
    let tb = AxisBox::new(lo, hi)?;
    let t_final = scn.horizons.t_final;
    let t = scn.start_times().into_iter().fold(f64::INFINITY, f64::min);
    match scn.tube.method {
        TubeMethod::Box => backward_tube(sys, &tb, t, t_final, scn.tube.step, scn.tube.cap),
        TubeMethod::Paved => backward_tube_paved(sys, &tb, t, t_final, scn.tube.step, scn.tube.paving, scn.tube.cap),
    }
}

/// Backward feasible tube over the longest horizon.
pub fn stage_tube(scn: &Scenario, ws: &Workspace) -> Result<BoxTube> {
    scn.validate()?;
    let (p_json, p_csv) = (ws.output(TUBE_FILE)?, ws.output("tube.csv")?);
    let sys = scn.build_system()?;
    let tube = tube_for(scn, &sys, &base_target(scn)?)?;
    tube.save_json(&p_json)?;
    tube.to_table().write(&p_csv)?;
    Ok(tube)
}

/// Fits every model; data-driven fits sample the DP box unless their
/// section gives a box.
pub fn stage_fit(scn: &Scenario, ws: &Workspace) -> Result<Vec<(String, LiftedLinearModel)>> {
    scn.validate()?;
    let sys = scn.build_system()?;
    let sample_box = AxisBox::new(scn.dp.lo.clone(), scn.dp.hi.clone())?;
    let mut out = Vec::new();
    for sec in scn.model_sections() {
        let p = ws.output(&model_file(&sec.name))?;
        let model = build_model(scn, &sys, &sec, &sample_box, scn.seed)?;
        model.save(&p)?;
        out.push((sec.name.clone(), model));
    }
    Ok(out)
}

fn lift_of(sec: &ModelSection, sys: &AffineSystem) -> Result<LiftMap> {
    LiftMap::from_spec(&sec.lift, sys.state_dim())
}

/// Augmented targets of the game played on `lift`.
pub fn game_targets(scn: &Scenario, lift: &LiftMap) -> Result<AugTargetPair> {
    let base = base_target(scn)?;
    let level = scn.augmented.level.unwrap_or(base.level());
    let audit = AuditOptions {
        samples: scn.augmented.audit_samples,
        seed: scn.seed,
        auto_level: scn.augmented.auto_level,
        ..AuditOptions::default()
    };
    make_aug_targets(&base, lift, scn.augmented.eta, scn.aug_mode(), level, &audit)
}

/// Error bounds per model and horizon over the stored tube.
pub fn stage_errbound(scn: &Scenario, ws: &Workspace) -> Result<Vec<DeltaReport>> {
    scn.validate()?;
    let sys = scn.build_system()?;
    let tube = BoxTube::load_json(&ws.input(TUBE_FILE)?)?;
    let t_final = scn.horizons.t_final;
    let mut out = Vec::new();
    for sec in scn.model_sections() {
        let model = LiftedLinearModel::load(&ws.input(&model_file(&sec.name))?)?;
        let lift = lift_of(&sec, &sys)?;
        let pair = game_targets(scn, &lift)?;
        for &h in &scn.horizons.lengths {
            let p = ws.output(&delta_file(&sec.name, h))?;
            let t = t_final - h;
            let part = tube.truncated(t);
            let eb = &scn.errbound;
            let bound = error_bound_delta(&model, &lift, &sys, &part, eb.grid, eb.inflation)?;
            let profile = if scn.ablation_zero_delta || (eb.pieces == 1 && eb.error_set == ErrorShape::Ball) {
                None
            } else {
                Some(error_profile(&model, &lift, &sys, &part, eb.grid, eb.inflation, eb.error_set, eb.pieces)?)
            };
            let report = DeltaReport {
                model: sec.name.clone(),
                horizon: h,
                t,
                t_final,
                delta: if scn.ablation_zero_delta { 0.0 } else { bound.delta_star },
                profile,
                bound: bound.summary(),
                game_level: pair.game_target().level(),
                requested_level: pair.requested_level,
                ablation: scn.ablation_zero_delta,
            };
            write_json(&p, &report)?;
            out.push(report);
        }
    }
    Ok(out)
}

/// The lifted game of one model and horizon, rebuilt from artifacts.
pub fn load_problem(scn: &Scenario, ws: &Workspace, sec: &ModelSection, h: f64) -> Result<(HopfProblem, LiftMap)> {
    let sys = scn.build_system()?;
    let model = LiftedLinearModel::load(&ws.input(&model_file(&sec.name))?)?;
    let lift = lift_of(sec, &sys)?;
    let report: DeltaReport = read_json(&ws.input(&delta_file(&sec.name, h))?)?;
    let pair = game_targets(scn, &lift)?;
    let prob = HopfProblem::new(
        model,
        pair.game_target().clone(),
        report.t,
        report.t_final,
        report.delta,
        scn.sense,
        sys.u_ball().clone(),
        sys.d_ball().clone(),
    )?
    .with_nodes(scn.solver.nodes)?;
    let prob = match report.profile {
        Some(p) => prob.with_error_profile(p)?,
        None => prob,
    };
    Ok((prob, lift))
}

/// Lifted-game values on the query grid, one grid per model and horizon.
pub fn stage_solve(scn: &Scenario, ws: &Workspace) -> Result<Vec<(String, f64, ValueGrid)>> {
    scn.validate()?;
    let points = scn.grid.points()?;
    let axes = scn.grid.axes()?;
    let mut out = Vec::new();
    for sec in scn.model_sections() {
        for &h in &scn.horizons.lengths {
            let p = ws.output(&hopf_file(&sec.name, h))?;
            let p_csv = ws.output(&format!("hopf_{}_{}.csv", sec.name, hz(h)))?;
            let (prob, lift) = load_problem(scn, ws, &sec, h)?;
            let lifted: Vec<DVector<f64>> = points.iter().map(|x| lift.lift(x)).collect::<Result<_>>()?;
            let vals = solve_grid(&prob, &lifted, &scn.hopf_options())?;
            let grid = ValueGrid::new(axes.clone(), vals.values.clone(), prob.t, scn.sense)?;
            grid.save(&p)?;
            let nk = lift.lifted_dim();
            let mut header = vec!["x1".to_string(), "x2".to_string()];
            header.extend((1..=nk).map(|i| format!("g{i}")));
            header.extend(["value".to_string(), "converged".to_string()]);
            let mut t = Table::new(header);
            for (k, x) in points.iter().enumerate() {
                let mut row: Vec<String> = x.iter().chain(lifted[k].iter()).map(|v| fmt_float(*v)).collect();
                row.push(fmt_float(vals.values[k]));
                row.push(vals.converged[k].to_string());
                t.push(row);
            }
            t.write(&p_csv)?;
            out.push((sec.name.clone(), h, grid));
        }
    }
    Ok(out)
}

/// DP ground truth at every horizon start time.
pub fn stage_dp(scn: &Scenario, ws: &Workspace) -> Result<Vec<(f64, ValueGrid)>> {
    scn.validate()?;
    let paths: Vec<PathBuf> = scn.horizons.lengths.iter().map(|h| ws.output(&dp_file(*h))).collect::<Result<_>>()?;
    let sys = scn.build_system()?;
    let base = base_target(scn)?;
    let axes = scn.dp.grid().axes()?;
    let times = scn.start_times();
    let grids = solve_dp_snapshots(&sys, &base, scn.sense, &axes, &times, scn.horizons.t_final, scn.dp.cfl)?;
    let mut out = Vec::new();
    for (k, &h) in scn.horizons.lengths.iter().enumerate() {
        let t = times[k];
        let g = grids
            .iter()
            .find(|g| (g.time - t).abs() < 1e-12)
            .cloned()
            .ok_or_else(|| Error::Numerical(format!("missing DP snapshot at t = {t}")))?;
        g.save(&paths[k])?;
        out.push((h, g));
    }
    Ok(out)
}

/// Counts of one comparison between certified claims and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub points: usize,
    /// Points the lifted game certifies: inside the reach set, or outside
    /// the avoid set.
    pub certified: usize,
    /// Certified points the oracle agrees with exactly.
    pub oracle_confirmed: usize,
    /// Certified points the oracle rejects by more than `tol`.
    pub violations: usize,
    pub tol: f64,
    /// Area of the lifted-game set `{V <= 0}` on the query grid.
    pub lifted_set_area: f64,
    /// Area of the oracle set `{V <= 0}` on the query grid.
    pub oracle_set_area: f64,
}

fn claims(sense: GameSense, v: f64) -> bool {
    match sense {
        GameSense::Reach => v <= 0.0,
        GameSense::Avoid => v > 0.0,
    }
}

/// Compares the certified claims of several lifted-game grids against the
/// oracle. A point counts as certified when any grid certifies it, which is
/// the union of reach sets and the intersection of avoid sets.
pub fn compare_many(hopf: &[&ValueGrid], dp: &ValueGrid, sense: GameSense, tol: f64) -> Result<Containment> {
    let first = hopf
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be nonnegative, got {tol}")));
    }
    for g in hopf {
        if g.axes != first.axes {
            return Err(Error::InvalidArgument("lifted-game grids use different points".into()));
        }
        if g.sense != sense || dp.sense != sense {
            return Err(Error::InvalidArgument("grids disagree on the game sense".into()));
        }
    }
    let nodes = first.nodes();
    let oracle: Vec<f64> = nodes
        .iter()
        .map(|x| {
            dp.value_at(x.as_slice()).map_err(|_| {
                Error::InvalidArgument(format!("point {:?} lies outside the oracle grid", x.as_slice()))
            })
        })
        .collect::<Result<_>>()?;
    let (d1, d2) = first.spacing();
    let mut c = Containment {
        points: nodes.len(),
        certified: 0,
        oracle_confirmed: 0,
        violations: 0,
        tol,
        lifted_set_area: 0.0,
        oracle_set_area: 0.0,
    };
    let mut set_cells = 0usize;
    for (k, o) in oracle.iter().enumerate() {
        let vals = hopf.iter().map(|g| g.values[k]);
        let certified = vals.clone().any(|v| claims(sense, v));
        let in_set = match sense {
            GameSense::Reach => certified,
            GameSense::Avoid => !certified,
        };
        if in_set {
            set_cells += 1;
        }
        if certified {
            c.certified += 1;
            if claims(sense, *o) {
                c.oracle_confirmed += 1;
            }
            let bad = match sense {
                GameSense::Reach => *o > tol,
                GameSense::Avoid => *o <= -tol,
            };
            if bad {
                c.violations += 1;
            }
        }
    }
    c.lifted_set_area = set_cells as f64 * d1 * d2;
    c.oracle_set_area = oracle.iter().filter(|o| **o <= 0.0).count() as f64 * d1 * d2;
    Ok(c)
}

pub fn compare_sets(hopf: &ValueGrid, dp: &ValueGrid, sense: GameSense, tol: f64) -> Result<Containment> {
    compare_many(&[hopf], dp, sense, tol)
}

/// One oracle cell times the largest value slope between neighbouring nodes.
pub fn default_tolerance(dp: &ValueGrid) -> f64 {
    let (n1, n2) = dp.shape();
    let (d1, d2) = dp.spacing();
    let mut slope: f64 = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            if i + 1 < n1 {
                slope = slope.max((dp.at(i + 1, j) - dp.at(i, j)).abs() / d1);
            }
            if j + 1 < n2 {
                slope = slope.max((dp.at(i, j + 1) - dp.at(i, j)).abs() / d2);
            }
        }
    }
    slope * d1.max(d2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonContainment {
    pub horizon: f64,
    pub t: f64,
    #[serde(flatten)]
    pub counts: Containment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainment {
    pub model: String,
    pub horizons: Vec<HorizonContainment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub scenario: String,
    pub sense: GameSense,
    /// The error player was removed; nothing in this report is certified.
    pub ablation: bool,
    pub models: Vec<ModelContainment>,
    /// All models combined (union of reach sets, intersection of avoid sets).
    pub combined: Vec<HorizonContainment>,
    pub total_violations: usize,
    /// No violations and no ablation.
    pub certified: bool,
}

pub fn stage_compare(scn: &Scenario, ws: &Workspace) -> Result<ContainmentReport> {
    scn.validate()?;
    let p = ws.output(CONTAINMENT_FILE)?;
    let sections = scn.model_sections();
    let mut per_model: Vec<ModelContainment> = sections
        .iter()
        .map(|s| ModelContainment {
            model: s.name.clone(),
            horizons: Vec::new(),
        })
        .collect();
    let mut combined = Vec::new();
    for &h in &scn.horizons.lengths {
        let dp = ValueGrid::load(&ws.input(&dp_file(h))?)?;
        let tol = scn.compare.tol.unwrap_or_else(|| default_tolerance(&dp));
        let grids: Vec<ValueGrid> = sections
            .iter()
            .map(|s| ValueGrid::load(&ws.input(&hopf_file(&s.name, h))?))
            .collect::<Result<_>>()?;
        for (m, g) in per_model.iter_mut().zip(&grids) {
            m.horizons.push(HorizonContainment {
                horizon: h,
                t: g.time,
                counts: compare_sets(g, &dp, scn.sense, tol)?,
            });
        }
        let refs: Vec<&ValueGrid> = grids.iter().collect();
        combined.push(HorizonContainment {
            horizon: h,
            t: dp.time,
            counts: compare_many(&refs, &dp, scn.sense, tol)?,
        });
    }
    let total_violations = per_model
        .iter()
        .flat_map(|m| &m.horizons)
        .chain(&combined)
        .map(|h| h.counts.violations)
        .sum();
    let report = ContainmentReport {
        scenario: scn.name.clone(),
        sense: scn.sense,
        ablation: scn.ablation_zero_delta,
        models: per_model,
        combined,
        total_violations,
        certified: total_violations == 0 && !scn.ablation_zero_delta,
    };
    write_json(&p, &report)?;
    Ok(report)
}

/// Every `stride`-th of `n` items so that at most `k` remain.
fn spread(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

/// Rollouts from certified grid points; `None` when nothing is certified.
pub fn stage_rollout(scn: &Scenario, ws: &Workspace) -> Result<Option<RolloutReport>> {
    scn.validate()?;
    let r = &scn.rollout;
    let p = ws.output(ROLLOUT_FILE)?;
    let sections = scn.model_sections();
    let sec = match &r.model {
        Some(name) => sections.iter().find(|s| &s.name == name).cloned(),
        None => sections.first().cloned(),
    }
    .ok_or_else(|| Error::Validation("no model for rollouts".into()))?;
    let h = r.horizon.unwrap_or(*scn.horizons.lengths.last().expect("validated nonempty"));
    let (prob, lift) = load_problem(scn, ws, &sec, h)?;
    let grid = ValueGrid::load(&ws.input(&hopf_file(&sec.name, h))?)?;
    let opts = r.options();
    let hopf = scn.hopf_options();
    let margin_ok = |v: f64| match scn.sense {
        GameSense::Reach => v <= -opts.margin,
        GameSense::Avoid => v > opts.margin,
    };
    let nodes = grid.nodes();
    let candidates: Vec<&DVector<f64>> = nodes
        .iter()
        .zip(&grid.values)
        .filter(|(_, v)| margin_ok(**v))
        .map(|(x, _)| x)
        .collect();
    // Re-check with the unseeded solve the rollout itself performs.
    let cache = FlowCache::build(&prob)?;
    let confirmed: Vec<DVector<f64>> = candidates
        .par_iter()
        .map(|x| -> Result<Option<DVector<f64>>> {
            let v = solve_value(&prob, &cache, &lift.lift(x)?, &hopf)?.value;
            Ok(margin_ok(v).then(|| (*x).clone()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if confirmed.is_empty() {
        return Ok(None);
    }
    let x0s: Vec<DVector<f64>> = spread(confirmed.len(), r.points).into_iter().map(|i| confirmed[i].clone()).collect();
    let dp: Vec<ValueGrid> = scn
        .horizons
        .lengths
        .iter()
        .map(|l| ValueGrid::load(&ws.input(&dp_file(*l))?))
        .collect::<Result<_>>()?;
    let sys = scn.build_system()?;
    let base = base_target(scn)?;
    let report = batch_rollouts(&sys, &lift, &prob, &base, &x0s, &r.policies, &opts, &hopf, Some(&dp))?;
    report.save(&p)?;
    if opts.keep_trajectory {
        report.trajectory_table().write(&ws.output("rollout_trajectories.csv")?)?;
    }
    Ok(Some(report))
}

/// Zero-level polylines of every DP and lifted-game grid.
pub fn stage_contours(scn: &Scenario, ws: &Workspace) -> Result<Vec<PathBuf>> {
    scn.validate()?;
    let mut jobs: Vec<(String, String)> = Vec::new();
    for &h in &scn.horizons.lengths {
        jobs.push((dp_file(h), format!("contours_dp_{}.csv", hz(h))));
        for s in scn.model_sections() {
            jobs.push((hopf_file(&s.name, h), format!("contours_hopf_{}_{}.csv", s.name, hz(h))));
        }
    }
    let mut out = Vec::new();
    for (src, dst) in jobs {
        let p = ws.output(&dst)?;
        let g = ValueGrid::load(&ws.input(&src)?)?;
        write_curves(&p, &level_curves(&g.axes, &g.values, 0.0)?)?;
        out.push(p);
    }
    Ok(out)
}

/// Runs one named stage.
pub fn run_stage(stage: Stage, scn: &Scenario, ws: &Workspace) -> std::result::Result<(), StageError> {
    let r = match stage {
        Stage::Setup => Ok(()),
        Stage::Tube => stage_tube(scn, ws).map(|_| ()),
        Stage::Fit => stage_fit(scn, ws).map(|_| ()),
        Stage::Errbound => stage_errbound(scn, ws).map(|_| ()),
        Stage::Solve => stage_solve(scn, ws).map(|_| ()),
        Stage::Dp => stage_dp(scn, ws).map(|_| ()),
        Stage::Compare => stage_compare(scn, ws).map(|_| ()),
        Stage::Rollout => stage_rollout(scn, ws).map(|_| ()),
        Stage::Contours => stage_contours(scn, ws).map(|_| ()),
    };
    r.map_err(at(stage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub containment: ContainmentReport,
    pub rollout: Option<RolloutReport>,
    pub exit_code: i32,
}

/// Runs every stage into `out`. With `strict`, uncertified results (any
/// violation, a failed rollout, or an ablation run) give exit code 4.
pub fn run_pipeline(
    scn: &Scenario,
    out: &Path,
    force: bool,
    strict: bool,
) -> std::result::Result<PipelineSummary, StageError> {
    let setup = at(Stage::Setup);
    scn.validate().map_err(&setup)?;
    let ws = Workspace::new(out, force).map_err(&setup)?;
    if !force && !ws.is_empty().map_err(&setup)? {
        return Err(setup(Error::Validation(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        ))));
    }
    let text = scn.to_toml().map_err(&setup)?;
    std::fs::write(ws.root.join("scenario.toml"), text).map_err(|e| setup(e.into()))?;
    let mut containment = None;
    let mut rollout = None;
    for stage in Stage::ALL {
        match stage {
            Stage::Compare => containment = Some(stage_compare(scn, &ws).map_err(at(stage))?),
            Stage::Rollout if scn.rollout.enabled => rollout = stage_rollout(scn, &ws).map_err(at(stage))?,
            Stage::Rollout => {}
            s => run_stage(s, scn, &ws)?,
        }
    }
    let containment = containment.expect("compare stage ran");
    let rollout_ok = rollout.as_ref().is_none_or(|r| r.success_rate == 1.0);
    let exit_code = if strict && !(containment.certified && rollout_ok) {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    };
    let summary = PipelineSummary {
        containment,
        rollout,
        exit_code,
    };
    write_json(&ws.root.join("summary.json"), &summary).map_err(at(Stage::Contours))?;
    Ok(summary)
}
