//! Closed-loop simulation of the true system under the costate controller.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::ValueGrid;
use crate::error::{check_dim, Error, Result};
use crate::hopf::{extract_control, extract_disturbance, solve_value, FlowCache, HopfOptions, HopfProblem};
use crate::io::{fmt_float, Table};
use crate::lifting::LiftMap;
use crate::systems::{rk4_step, step_times, AffineSystem};
use crate::targets::QuadTarget;
use crate::GameSense;

/// How the disturbance is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DisturbancePolicy {
    Zero,
    /// Uniform samples from the disturbance ball, one per step.
    Random { seed: u64 },
    /// The disturbance that is worst for the lifted game at the current costate.
    ExtremalCostate,
    /// The disturbance that is worst along the DP value gradient.
    ExtremalDp,
}

impl DisturbancePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            DisturbancePolicy::Zero => "zero",
            DisturbancePolicy::Random { .. } => "random",
            DisturbancePolicy::ExtremalCostate => "extremal_costate",
            DisturbancePolicy::ExtremalDp => "extremal_dp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutOptions {
    /// Re-solve the lifted game every this many steps; 0 keeps the first costate.
    pub replan_every: usize,
    pub step: f64,
    /// Certified points must clear the zero level by this much.
    pub margin: f64,
    /// Skip the certification check (for deliberately uncertified points).
    pub audit: bool,
    /// States beyond this norm count as numerical failure.
    pub divergence_norm: f64,
    pub keep_trajectory: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            replan_every: 10,
            step: 0.01,
            margin: 0.05,
            audit: false,
            divergence_norm: 1e6,
            keep_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    FailedNumerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub x0: Vec<f64>,
    pub policy: DisturbancePolicy,
    /// Lifted-game value at the start.
    pub initial_value: f64,
    pub terminal: Vec<f64>,
    /// Base target function at the terminal state.
    pub terminal_j: f64,
    pub outcome: Outcome,
    pub replans: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub sense: GameSense,
    pub t: f64,
    pub t_final: f64,
    pub options: RolloutOptions,
    pub trials: Vec<TrialRecord>,
    pub successes: usize,
    pub failures: usize,
    pub numerical_failures: usize,
    /// Successes over all trials.
    pub success_rate: f64,
}

impl RolloutReport {
    fn from_trials(prob: &HopfProblem, options: RolloutOptions, trials: Vec<TrialRecord>) -> Self {
        let count = |o: Outcome| trials.iter().filter(|r| r.outcome == o).count();
        let (successes, failures, numerical_failures) =
            (count(Outcome::Success), count(Outcome::Failure), count(Outcome::FailedNumerical));
        RolloutReport {
            sense: prob.sense,
            t: prob.t,
            t_final: prob.t_final,
            options,
            success_rate: successes as f64 / trials.len().max(1) as f64,
            successes,
            failures,
            numerical_failures,
            trials,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// Stored trajectories as `trial, time, x_1, ...`.
    pub fn trajectory_table(&self) -> Table {
        let n = self.trials.first().map_or(0, |r| r.x0.len());
        let mut header = vec!["trial".to_string(), "time".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        let mut t = Table::new(header);
        for (k, r) in self.trials.iter().enumerate() {
            for (s, x) in &r.trajectory {
                let mut row = vec![k.to_string(), fmt_float(*s)];
                row.extend(x.iter().map(|v| fmt_float(*v)));
                t.push(row);
            }
        }
        t
    }
}

fn succeeded(sense: GameSense, j: f64) -> bool {
    match sense {
        GameSense::Reach => j <= 0.0,
        GameSense::Avoid => j > 0.0,
    }
}

fn certified(sense: GameSense, value: f64, margin: f64) -> bool {
    match sense {
        GameSense::Reach => value <= -margin,
        GameSense::Avoid => value > margin,
    }
}

/// Nearest stored DP snapshot at or after `tau`.
fn snapshot_at(dp: &[ValueGrid], tau: f64) -> &ValueGrid {
    dp.iter()
        .min_by(|a, b| (a.time - tau).abs().partial_cmp(&(b.time - tau).abs()).unwrap())
        .expect("nonempty snapshots")
}

fn disturbance(
    sys: &AffineSystem,
    prob: &HopfProblem,
    policy: DisturbancePolicy,
    p_star: &DVector<f64>,
    x: &DVector<f64>,
    tau: f64,
    rng: &mut ChaCha8Rng,
    dp: Option<&[ValueGrid]>,
) -> Result<DVector<f64>> {
    let ball = sys.d_ball();
    let d = match policy {
        DisturbancePolicy::Zero => DVector::zeros(ball.dim),
        DisturbancePolicy::Random { .. } => ball.sample(rng),
        DisturbancePolicy::ExtremalCostate => {
            let d = extract_disturbance(prob, p_star, tau)?;
            check_dim("lifted disturbance", ball.dim, d.len())?;
            d
        }
        DisturbancePolicy::ExtremalDp => {
            let grids = dp.filter(|g| !g.is_empty()).ok_or_else(|| {
                Error::InvalidArgument("extremal_dp policy needs DP snapshots".into())
            })?;
            let grid = snapshot_at(grids, tau);
            let grad = match grid.gradient_at(x.as_slice()) {
                Ok(g) => g,
                Err(Error::OutOfDomain(_)) => return Ok(DVector::zeros(ball.dim)),
                Err(e) => return Err(e),
            };
            let q = sys.disturbance_matrix(x).transpose() * grad;
            let e = ball.extremizer(q.as_slice());
            match prob.sense {
                GameSense::Reach => e,
                GameSense::Avoid => -e,
            }
        }
    };
    Ok(ball.project(&d))
}

fn run_trial(
    sys: &AffineSystem,
    m: &LiftMap,
    prob: &HopfProblem,
    base: &QuadTarget,
    x0: &DVector<f64>,
    policy: DisturbancePolicy,
    opts: &RolloutOptions,
    hopf: &HopfOptions,
    dp: Option<&[ValueGrid]>,
    stream: u64,
) -> Result<TrialRecord> {
    check_dim("initial state", sys.state_dim(), x0.len())?;
    check_dim("rollout target", sys.state_dim(), base.dim())?;
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!("rollout step must be positive, got {}", opts.step)));
    }
    check_dim("lifted game controls", sys.control_dim(), prob.u_ball.dim)?;
    let cache = FlowCache::build(prob)?;
    let first = solve_value(prob, &cache, &m.lift(x0)?, hopf)?;
    if !opts.audit && !certified(prob.sense, first.value, opts.margin) {
        return Err(Error::Validation(format!(
            "initial state {:?} is not certified (value {}, margin {})",
            x0.as_slice(),
            first.value,
            opts.margin
        )));
    }
    let seed = match policy {
        DisturbancePolicy::Random { seed } => seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let times = step_times(prob.t, prob.t_final, opts.step);
    let mut plan = prob.clone();
    let mut p_star = first.p_star.clone();
    let mut x = x0.clone();
    let mut replans = 0;
    let mut trajectory = Vec::new();
    if opts.keep_trajectory {
        trajectory.push((times[0], x.as_slice().to_vec()));
    }
    let mut numerical = false;
    for (k, w) in times.windows(2).enumerate() {
        let (tau, dt) = (w[0], w[1] - w[0]);
        if opts.replan_every > 0 && k > 0 && k % opts.replan_every == 0 {
            let next = prob.restarted_at(tau)?;
            let c = FlowCache::build(&next)?;
            match m.lift(&x).and_then(|g| solve_value(&next, &c, &g, hopf)) {
                Ok(r) => {
                    plan = next;
                    p_star = r.p_star;
                    replans += 1;
                }
                Err(Error::Numerical(_)) | Err(Error::Evaluation(_)) => {
                    numerical = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let u = sys.u_ball().project(&extract_control(&plan, &p_star, tau)?);
        let d = disturbance(sys, &plan, policy, &p_star, &x, tau, &mut rng, dp)?;
        x = rk4_step(sys, &x, &u, &d, dt);
        if x.iter().any(|v| !v.is_finite()) || x.norm() > opts.divergence_norm {
            numerical = true;
            break;
        }
        if opts.keep_trajectory {
            trajectory.push((w[1], x.as_slice().to_vec()));
        }
    }
    let terminal_j = base.eval_j(&x);
    let outcome = if numerical || !terminal_j.is_finite() {
        Outcome::FailedNumerical
    } else if succeeded(prob.sense, terminal_j) {
        Outcome::Success
    } else {
        Outcome::Failure
    };
    Ok(TrialRecord {
        x0: x0.as_slice().to_vec(),
        policy,
        initial_value: first.value,
        terminal: x.as_slice().to_vec(),
        terminal_j,
        outcome,
        replans,
        trajectory,
    })
}

/// Simulates one trial of the true dynamics from `x0` under the controller
/// extracted from the lifted game, scoring the terminal state against `base`.
#[allow(clippy::too_many_arguments)]
pub fn run_rollout(
    sys: &AffineSystem,
    m: &LiftMap,
    prob: &HopfProblem,
    base: &QuadTarget,
    x0: &DVector<f64>,
    policy: DisturbancePolicy,
    opts: &RolloutOptions,
    hopf: &HopfOptions,
    dp: Option<&[ValueGrid]>,
) -> Result<TrialRecord> {
    run_trial(sys, m, prob, base, x0, policy, opts, hopf, dp, 0)
}

/// Every `(x0, policy)` pair; trial `i` draws random stream `i`.
#[allow(clippy::too_many_arguments)]
pub fn batch_rollouts(
    sys: &AffineSystem,
    m: &LiftMap,
    prob: &HopfProblem,
    base: &QuadTarget,
    x0s: &[DVector<f64>],
    policies: &[DisturbancePolicy],
    opts: &RolloutOptions,
    hopf: &HopfOptions,
    dp: Option<&[ValueGrid]>,
) -> Result<RolloutReport> {
    if x0s.is_empty() || policies.is_empty() {
        return Err(Error::InvalidArgument("rollouts need initial states and policies".into()));
    }
    let jobs: Vec<(usize, &DVector<f64>, DisturbancePolicy)> = x0s
        .iter()
        .flat_map(|x| policies.iter().map(move |p| (x, *p)))
        .enumerate()
        .map(|(i, (x, p))| (i, x, p))
        .collect();
    let trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|(i, x, p)| {
            if *i == 0 {
                run_rollout(sys, m, prob, base, x, *p, opts, hopf, dp)
            } else {
                run_trial(sys, m, prob, base, x, *p, opts, hopf, dp, *i as u64)
            }
        })
        .collect::<Result<_>>()?;
    Ok(RolloutReport::from_trials(prob, *opts, trials))
}
