//! Pointwise values of the error-augmented linear game by the generalized
//! Hopf formula.
//!
//! With the fundamental matrix `M0(s) = exp(K (T - s))` the linear game
//! reduces to a Hamiltonian depending on the costate only, and
//!
//! ```text
//! V(g, t) = -min_p  J*(p) - p . exp(K (T - t)) g - int_t^T H(p, s) ds
//! ```
//!
//! where, for the reach game,
//! `H(p, s) = -sigma_U(M1^T p) + sigma_D(M2^T p) + delta ||M0^T p||`
//! with `M1 = M0 L1`, `M2 = M0 L2`. The avoid game flips all three signs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::models::LiftedLinearModel;
use crate::systems::{BallNorm, InputBall};
use crate::targets::QuadTarget;
use crate::GameSense;

pub const DEFAULT_NODES: usize = 50;

#[derive(Debug, Clone)]
pub struct HopfProblem {
    pub model: LiftedLinearModel,
    pub target: QuadTarget,
    pub t: f64,
    pub t_final: f64,
    pub delta: f64,
    pub sense: GameSense,
    pub u_ball: InputBall,
    pub d_ball: InputBall,
    /// Number of quadrature intervals on `[t, T]`.
    pub nodes: usize,
    /// Time-varying error set; replaces the ball of radius `delta` when
    /// present.
    pub error: Option<ErrorProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorShape {
    /// Euclidean ball; one radius per piece.
    #[default]
    Ball,
    /// Axis-aligned box; one half-width per lifted coordinate per piece.
    Box,
}

/// Piecewise-constant error bounds: `bounds[i]` holds on
/// `[breaks[i], breaks[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorProfile {
    pub shape: ErrorShape,
    pub breaks: Vec<f64>,
    pub bounds: Vec<Vec<f64>>,
}

impl ErrorProfile {
    pub fn constant(shape: ErrorShape, t: f64, t_final: f64, bounds: Vec<f64>) -> Self {
        ErrorProfile {
            shape,
            breaks: vec![t, t_final],
            bounds: vec![bounds],
        }
    }

    pub fn validate(&self, lifted_dim: usize) -> Result<()> {
        if self.bounds.is_empty() || self.breaks.len() != self.bounds.len() + 1 {
            return Err(Error::InvalidArgument("error profile needs one more break than pieces".into()));
        }
        if self.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("error profile breaks must increase".into()));
        }
        let want = match self.shape {
            ErrorShape::Ball => 1,
            ErrorShape::Box => lifted_dim,
        };
        for b in &self.bounds {
            check_dim("error profile piece", want, b.len())?;
            if b.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("error bounds must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Elementwise max over the pieces whose closed interval contains `s`.
    pub fn at(&self, s: f64) -> Vec<f64> {
        let tol = 1e-12 * (1.0 + s.abs());
        let mut out = vec![0.0; self.bounds[0].len()];
        for (i, b) in self.bounds.iter().enumerate() {
            if self.breaks[i] - tol <= s && s <= self.breaks[i + 1] + tol {
                for (o, v) in out.iter_mut().zip(b) {
                    *o = f64::max(*o, *v);
                }
            }
        }
        out
    }

    /// Largest Euclidean size of any piece.
    pub fn max_size(&self) -> f64 {
        self.bounds
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

impl HopfProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: LiftedLinearModel,
        target: QuadTarget,
        t: f64,
        t_final: f64,
        delta: f64,
        sense: GameSense,
        u_ball: InputBall,
        d_ball: InputBall,
    ) -> Result<Self> {
        if !(t < t_final) || !t.is_finite() || !t_final.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need t < T, got t = {t}, T = {t_final}"
            )));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be nonnegative, got {delta}")));
        }
        check_dim("target vs lifted model", model.lifted_dim(), target.dim())?;
        check_dim("control ball", model.control_dim(), u_ball.dim)?;
        check_dim("disturbance ball", model.disturbance_dim(), d_ball.dim)?;
        Ok(HopfProblem {
            model,
            target,
            t,
            t_final,
            delta,
            sense,
            u_ball,
            d_ball,
            nodes: DEFAULT_NODES,
            error: None,
        })
    }

    pub fn with_nodes(mut self, nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one interval".into()));
        }
        self.nodes = nodes;
        Ok(self)
    }

    /// Same game started at a later time.
    pub fn restarted_at(&self, t: f64) -> Result<Self> {
        let mut p = HopfProblem::new(
            self.model.clone(),
            self.target.clone(),
            t,
            self.t_final,
            self.delta,
            self.sense,
            self.u_ball.clone(),
            self.d_ball.clone(),
        )?;
        p.nodes = self.nodes;
        p.error = self.error.clone();
        Ok(p)
    }

    /// Replaces the constant error ball; the profile must cover `[t, T]`.
    pub fn with_error_profile(mut self, profile: ErrorProfile) -> Result<Self> {
        profile.validate(self.lifted_dim())?;
        let (a, b) = (profile.breaks[0], profile.breaks[profile.breaks.len() - 1]);
        if a > self.t + 1e-12 || b < self.t_final - 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "error profile covers [{a}, {b}] but the game runs on [{}, {}]",
                self.t, self.t_final
            )));
        }
        self.error = Some(profile);
        Ok(self)
    }

    pub fn lifted_dim(&self) -> usize {
        self.model.lifted_dim()
    }

    /// `exp(K (T - s))`.
    pub fn fundamental(&self, s: f64) -> Result<DMatrix<f64>> {
        let m = (&self.model.k * (self.t_final - s)).exp();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("matrix exponential overflow at s = {s}")));
        }
        Ok(m)
    }
}

/// Transposed flow matrices at the quadrature nodes, stored flat.
#[derive(Debug, Clone)]
pub struct FlowCache {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    n: usize,
    m1: usize,
    m2: usize,
    /// Per node, row-major `M0^T` (`n x n`).
    m0t: Vec<f64>,
    /// Per node, row-major `M1^T` (`m1 x n`).
    m1t: Vec<f64>,
    /// Per node, row-major `M2^T` (`m2 x n`).
    m2t: Vec<f64>,
    err_shape: ErrorShape,
    /// Per node, the ball radius (1 entry) or box half-widths (`n` entries).
    err_w: Vec<f64>,
    end_map: DMatrix<f64>,
}

fn push_transposed(dst: &mut Vec<f64>, m: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            dst.push(m[(i, j)]);
        }
    }
}

impl FlowCache {
    pub fn build(prob: &HopfProblem) -> Result<Self> {
        let (n, m1, m2) = (
            prob.lifted_dim(),
            prob.model.control_dim(),
            prob.model.disturbance_dim(),
        );
        let nodes = prob.nodes;
        let span = prob.t_final - prob.t;
        let dt = span / nodes as f64;
        let mut times = Vec::with_capacity(nodes + 1);
        let mut weights = Vec::with_capacity(nodes + 1);
        let mut m0t = Vec::with_capacity((nodes + 1) * n * n);
        let mut m1t = Vec::with_capacity((nodes + 1) * m1 * n);
        let mut m2t = Vec::with_capacity((nodes + 1) * m2 * n);
        for k in 0..=nodes {
            let s = if k == nodes { prob.t_final } else { prob.t + k as f64 * dt };
            times.push(s);
            weights.push(if k == 0 || k == nodes { 0.5 * dt } else { dt });
            let m0 = prob.fundamental(s)?;
            push_transposed(&mut m0t, &m0);
            push_transposed(&mut m1t, &(&m0 * &prob.model.l1));
            push_transposed(&mut m2t, &(&m0 * &prob.model.l2));
        }
        let err_shape = prob.error.as_ref().map(|e| e.shape).unwrap_or_default();
        let err_w: Vec<f64> = match &prob.error {
            None => vec![prob.delta; nodes + 1],
            Some(e) => times.iter().flat_map(|s| e.at(*s)).collect(),
        };
        let end_map = prob.fundamental(prob.t)?;
        Ok(FlowCache {
            err_shape,
            err_w,
            times,
            weights,
            n,
            m1,
            m2,
            m0t,
            m1t,
            m2t,
            end_map,
        })
    }

    pub fn node_count(&self) -> usize {
        self.times.len()
    }

    pub fn has_error(&self) -> bool {
        self.err_w.iter().any(|v| *v > 0.0)
    }

    pub fn end_map(&self) -> &DMatrix<f64> {
        &self.end_map
    }

    /// `M0(s_k)`.
    pub fn flow(&self, k: usize) -> DMatrix<f64> {
        let b = &self.m0t[k * self.n * self.n..(k + 1) * self.n * self.n];
        DMatrix::from_row_slice(self.n, self.n, b).transpose()
    }
}

/// Adds `coef * grad sigma(A^T p)` to `grad` and returns `(sigma, ||A^T p||)`.
/// `at` is `A^T` row-major with `rows` rows; `sigma` is the support function
/// of a ball with `radius` and `norm`. Uses 0 as the subgradient at kinks.
#[allow(clippy::too_many_arguments)]
fn support_term(
    at: &[f64],
    rows: usize,
    n: usize,
    p: &[f64],
    radius: f64,
    norm: BallNorm,
    coef: f64,
    q: &mut [f64],
    grad: &mut [f64],
) -> (f64, f64) {
    if rows == 0 {
        return (0.0, 0.0);
    }
    for i in 0..rows {
        let row = &at[i * n..(i + 1) * n];
        q[i] = row.iter().zip(p).map(|(a, b)| a * b).sum();
    }
    let q = &q[..rows];
    let l2 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if radius == 0.0 {
        return (0.0, l2);
    }
    match norm {
        BallNorm::Euclidean => {
            if l2 > 0.0 && coef != 0.0 {
                let s = coef * radius / l2;
                for (i, qi) in q.iter().enumerate() {
                    let row = &at[i * n..(i + 1) * n];
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += s * qi * a;
                    }
                }
            }
            (radius * l2, l2)
        }
        BallNorm::Box => {
            if coef != 0.0 {
                for (i, qi) in q.iter().enumerate() {
                    if *qi != 0.0 {
                        let s = coef * radius * qi.signum();
                        let row = &at[i * n..(i + 1) * n];
                        for (g, a) in grad.iter_mut().zip(row) {
                            *g += s * a;
                        }
                    }
                }
            }
            (radius * q.iter().map(|v| v.abs()).sum::<f64>(), l2)
        }
    }
}

/// Support of the node-`k` error set at `M0^T p`; see [`support_term`].
fn error_term(cache: &FlowCache, k: usize, p: &[f64], coef: f64, q: &mut [f64], grad: &mut [f64]) -> (f64, f64) {
    let n = cache.n;
    let at = &cache.m0t[k * n * n..(k + 1) * n * n];
    match cache.err_shape {
        ErrorShape::Ball => support_term(at, n, n, p, cache.err_w[k], BallNorm::Euclidean, coef, q, grad),
        ErrorShape::Box => {
            let w = &cache.err_w[k * n..(k + 1) * n];
            let mut val = 0.0;
            let mut kink = f64::INFINITY;
            for i in 0..n {
                if w[i] == 0.0 {
                    continue;
                }
                let row = &at[i * n..(i + 1) * n];
                let qi: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                val += w[i] * qi.abs();
                kink = kink.min(qi.abs());
                if qi != 0.0 && coef != 0.0 {
                    let s = coef * w[i] * qi.signum();
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += s * a;
                    }
                }
            }
            (val, kink)
        }
    }
}

/// Integrand signs `(control, disturbance, error)` of the Hamiltonian.
fn signs(sense: GameSense) -> (f64, f64, f64) {
    match sense {
        GameSense::Reach => (-1.0, 1.0, 1.0),
        GameSense::Avoid => (1.0, -1.0, -1.0),
    }
}

/// Hamiltonian integrand at quadrature node `k`.
pub fn hamiltonian_integrand(prob: &HopfProblem, cache: &FlowCache, p: &DVector<f64>, k: usize) -> f64 {
    let n = cache.n;
    let mut q = vec![0.0; n.max(cache.m1).max(cache.m2)];
    let mut scratch = vec![0.0; n];
    let (su, sd, se) = signs(prob.sense);
    let p = p.as_slice();
    let (u, _) = support_term(
        &cache.m1t[k * cache.m1 * n..(k + 1) * cache.m1 * n],
        cache.m1,
        n,
        p,
        prob.u_ball.radius,
        prob.u_ball.norm,
        0.0,
        &mut q,
        &mut scratch,
    );
    let (d, _) = support_term(
        &cache.m2t[k * cache.m2 * n..(k + 1) * cache.m2 * n],
        cache.m2,
        n,
        p,
        prob.d_ball.radius,
        prob.d_ball.norm,
        0.0,
        &mut q,
        &mut scratch,
    );
    let (e, _) = error_term(cache, k, p, 0.0, &mut q, &mut scratch);
    su * u + sd * d + se * e
}

/// The costate objective at a fixed query point, with reusable buffers.
struct Objective<'a> {
    prob: &'a HopfProblem,
    cache: &'a FlowCache,
    flowed: Vec<f64>,
    center: Vec<f64>,
    shape_inv: Vec<f64>,
    level: f64,
    q: Vec<f64>,
    /// Smallest `||M^T p||` seen among active norm terms at the last call.
    min_arg: f64,
}

impl<'a> Objective<'a> {
    fn new(prob: &'a HopfProblem, cache: &'a FlowCache, g: &DVector<f64>) -> Self {
        let n = cache.n;
        let flowed = (&cache.end_map * g).as_slice().to_vec();
        let shape_inv = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| prob.target.shape_inv()[(i, j)])
            .collect();
        Objective {
            prob,
            cache,
            flowed,
            center: prob.target.center().as_slice().to_vec(),
            shape_inv,
            level: prob.target.level(),
            q: vec![0.0; n.max(cache.m1).max(cache.m2)],
            min_arg: f64::INFINITY,
        }
    }

    fn dim(&self) -> usize {
        self.cache.n
    }

    fn eval(&mut self, p: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.cache.n;
        let c = self.cache;
        // conjugate and linear part
        let mut val = self.level;
        for i in 0..n {
            let row = &self.shape_inv[i * n..(i + 1) * n];
            let qi: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
            val += p[i] * (self.center[i] - self.flowed[i]) + 0.25 * p[i] * qi;
            grad[i] = self.center[i] - self.flowed[i] + 0.5 * qi;
        }
        let (su, sd, se) = signs(self.prob.sense);
        let (ru, nu) = (self.prob.u_ball.radius, self.prob.u_ball.norm);
        let (rd, nd) = (self.prob.d_ball.radius, self.prob.d_ball.norm);
        let has_error = c.has_error();
        let mut min_arg = f64::INFINITY;
        for k in 0..c.times.len() {
            let w = c.weights[k];
            // objective carries -w * H
            let (u, au) = support_term(
                &c.m1t[k * c.m1 * n..(k + 1) * c.m1 * n],
                c.m1,
                n,
                p,
                ru,
                nu,
                -w * su,
                &mut self.q,
                grad,
            );
            let (d, ad) = support_term(
                &c.m2t[k * c.m2 * n..(k + 1) * c.m2 * n],
                c.m2,
                n,
                p,
                rd,
                nd,
                -w * sd,
                &mut self.q,
                grad,
            );
            let (e, ae) = error_term(c, k, p, -w * se, &mut self.q, grad);
            if ru > 0.0 && c.m1 > 0 {
                min_arg = min_arg.min(au);
            }
            if rd > 0.0 && c.m2 > 0 {
                min_arg = min_arg.min(ad);
            }
            if has_error {
                min_arg = min_arg.min(ae);
            }
            val -= w * (su * u + sd * d + se * e);
        }
        self.min_arg = min_arg;
        val
    }

    fn value(&mut self, p: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.eval(p, &mut g)
    }
}

/// `Phi(p)`; the value is `-min_p Phi`.
pub fn hopf_objective(prob: &HopfProblem, cache: &FlowCache, g: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    check_dim("augmented point", prob.lifted_dim(), g.len())?;
    check_dim("costate", prob.lifted_dim(), p.len())?;
    Ok(Objective::new(prob, cache, g).value(p.as_slice()))
}

/// `Phi(p)` and the subgradient used by the optimizer.
pub fn hopf_objective_gradient(
    prob: &HopfProblem,
    cache: &FlowCache,
    g: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_dim("augmented point", prob.lifted_dim(), g.len())?;
    check_dim("costate", prob.lifted_dim(), p.len())?;
    let mut grad = vec![0.0; p.len()];
    let v = Objective::new(prob, cache, g).eval(p.as_slice(), &mut grad);
    Ok((v, DVector::from_vec(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopfOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial length of the fallback subgradient step.
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for HopfOptions {
    fn default() -> Self {
        HopfOptions {
            restarts: 8,
            max_iters: 200,
            step: 1.0,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl HopfOptions {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument("restarts and max_iters must be positive".into()));
        }
        if !(self.step > 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("step and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopfResult {
    pub value: f64,
    pub p_star: DVector<f64>,
    pub objective_at_p: f64,
    pub restarts_used: usize,
    pub converged: bool,
    /// Estimated steepest-descent rate of the objective at `p_star`.
    pub gradient_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Steepest-descent rate at `p`: the gradient norm at smooth points, and the
/// largest one-sided descent slope over probe directions near a kink.
fn stationarity(obj: &mut Objective, p: &[f64], f: f64, grad: &[f64]) -> f64 {
    let gn = norm(grad);
    let scale = 1.0 + norm(p);
    if obj.min_arg > 1e-8 * scale {
        return gn;
    }
    let n = p.len();
    let eps = 1e-7 * scale;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 1);
    if gn > 0.0 {
        dirs.push(grad.iter().map(|g| -g / gn).collect());
    }
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut d = vec![0.0; n];
            d[i] = s;
            dirs.push(d);
        }
    }
    let mut worst: f64 = 0.0;
    let mut trial = vec![0.0; n];
    for d in &dirs {
        for i in 0..n {
            trial[i] = p[i] + eps * d[i];
        }
        let slope = (f - obj.value(&trial)) / eps;
        worst = worst.max(slope);
    }
    worst
}

struct LocalMin {
    p: Vec<f64>,
    f: f64,
    measure: f64,
}

/// BFGS with Armijo backtracking; falls back to a diminishing normalized
/// subgradient step when the line search stalls at a kink.
fn local_minimize(obj: &mut Objective, p0: Vec<f64>, opts: &HopfOptions) -> LocalMin {
    let n = p0.len();
    let mut p = p0;
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&p, &mut g);
    let mut best = (p.clone(), f);
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = scale;
        }
    };
    reset(&mut h, 1.0);
    let mut fresh = true;
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut stalls = 0usize;
    let mut fallback = 0usize;
    for _ in 0..opts.max_iters {
        if norm(&g) <= opts.tol {
            break;
        }
        for i in 0..n {
            d[i] = -dot(&h[i * n..(i + 1) * n], &g);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            reset(&mut h, 1.0);
            fresh = true;
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            slope = -dot(&g, &g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            for i in 0..n {
                trial[i] = p[i] + alpha * d[i];
            }
            let ft = obj.eval(&trial, &mut g_new);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                accepted = Some(ft);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(ft) => {
                let s: Vec<f64> = (0..n).map(|i| trial[i] - p[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if fresh {
                        reset(&mut h, sy / dot(&y, &y));
                        fresh = false;
                    }
                    // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
                    let rho = 1.0 / sy;
                    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
                    let yhy = dot(&y, &hy);
                    for i in 0..n {
                        for j in 0..n {
                            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                                + (rho * rho * yhy + rho) * s[i] * s[j];
                        }
                    }
                }
                let decrease = f - ft;
                p.copy_from_slice(&trial);
                g.copy_from_slice(&g_new);
                f = ft;
                if decrease <= 1e-14 * (1.0 + f.abs()) {
                    stalls += 1;
                    if stalls >= 5 {
                        break;
                    }
                } else {
                    stalls = 0;
                }
            }
            None => {
                fallback += 1;
                let gn = norm(&g);
                if gn == 0.0 || stationarity(obj, &p, f, &g) <= opts.tol {
                    break;
                }
                let step = opts.step / (fallback as f64).sqrt();
                for i in 0..n {
                    p[i] -= step * g[i] / gn;
                }
                f = obj.eval(&p, &mut g);
                reset(&mut h, 1.0);
                fresh = true;
                if fallback > 30 {
                    break;
                }
            }
        }
        if f < best.1 {
            best = (p.clone(), f);
        }
    }
    if f < best.1 {
        best = (p, f);
    }
    let (bp, bf) = best;
    let mut bg = vec![0.0; n];
    obj.eval(&bp, &mut bg);
    let measure = stationarity(obj, &bp, bf, &bg);
    LocalMin {
        p: bp,
        f: bf,
        measure,
    }
}

/// Multi-start minimization of the costate objective at lifted point `g`.
pub fn solve_value(prob: &HopfProblem, cache: &FlowCache, g: &DVector<f64>, opts: &HopfOptions) -> Result<HopfResult> {
    solve_value_seeded(prob, cache, g, opts, 0)
}

fn solve_value_seeded(
    prob: &HopfProblem,
    cache: &FlowCache,
    g: &DVector<f64>,
    opts: &HopfOptions,
    stream: u64,
) -> Result<HopfResult> {
    opts.validate()?;
    check_dim("augmented point", prob.lifted_dim(), g.len())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("augmented query point".into()));
    }
    let n = prob.lifted_dim();
    let mut obj = Objective::new(prob, cache, g);
    let flowed = DVector::from_column_slice(&obj.flowed);
    let grad_flowed = prob.target.gradient(&flowed);
    let scale = grad_flowed.norm().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let mut best: Option<LocalMin> = None;
    for r in 0..opts.restarts {
        let p0: Vec<f64> = match r {
            0 => vec![0.0; n],
            1 => grad_flowed.as_slice().to_vec(),
            2 => prob.target.gradient(g).as_slice().to_vec(),
            _ => (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        };
        let m = local_minimize(&mut obj, p0, opts);
        let better = match &best {
            None => true,
            Some(b) => m.f < b.f - 1e-12 * (1.0 + b.f.abs()) || (m.f <= b.f && m.measure < b.measure),
        };
        if better {
            best = Some(m);
        }
    }
    let b = best.expect("at least one restart");
    if !b.f.is_finite() {
        return Err(Error::Numerical("Hopf objective is not finite".into()));
    }
    Ok(HopfResult {
        value: -b.f,
        p_star: DVector::from_vec(b.p),
        objective_at_p: b.f,
        restarts_used: opts.restarts,
        converged: b.measure <= opts.tol.max(1e-6) * 10.0,
        gradient_norm: b.measure,
    })
}

/// Values at many lifted points; point `i` uses random stream `i`.
#[derive(Debug, Clone)]
pub struct HopfValues {
    pub values: Vec<f64>,
    pub converged: Vec<bool>,
    pub p_stars: Vec<DVector<f64>>,
}

impl HopfValues {
    /// `V <= 0` marks set membership for both senses.
    pub fn members(&self) -> Vec<bool> {
        self.values.iter().map(|v| *v <= 0.0).collect()
    }

    pub fn unconverged(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

pub fn solve_grid(prob: &HopfProblem, points: &[DVector<f64>], opts: &HopfOptions) -> Result<HopfValues> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no query points".into()));
    }
    let cache = FlowCache::build(prob)?;
    let results: Vec<HopfResult> = points
        .par_iter()
        .enumerate()
        .map(|(i, g)| solve_value_seeded(prob, &cache, g, opts, i as u64))
        .collect::<Result<_>>()?;
    Ok(HopfValues {
        values: results.iter().map(|r| r.value).collect(),
        converged: results.iter().map(|r| r.converged).collect(),
        p_stars: results.into_iter().map(|r| r.p_star).collect(),
    })
}

/// Pointwise seeded solve matching the per-point streams of [`solve_grid`].
pub fn solve_point(
    prob: &HopfProblem,
    cache: &FlowCache,
    g: &DVector<f64>,
    opts: &HopfOptions,
    index: usize,
) -> Result<HopfResult> {
    solve_value_seeded(prob, cache, g, opts, index as u64)
}

fn check_time(prob: &HopfProblem, tau: f64) -> Result<()> {
    if !(tau >= prob.t - 1e-12 && tau <= prob.t_final + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "time {tau} outside [{}, {}]",
            prob.t, prob.t_final
        )));
    }
    Ok(())
}

/// Optimal control at `tau` for the costate `p_star`.
pub fn extract_control(prob: &HopfProblem, p_star: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    check_time(prob, tau)?;
    check_dim("costate", prob.lifted_dim(), p_star.len())?;
    let q = (prob.fundamental(tau)? * &prob.model.l1).transpose() * p_star;
    let e = prob.u_ball.extremizer(q.as_slice());
    Ok(match prob.sense {
        GameSense::Reach => -e,
        GameSense::Avoid => e,
    })
}

/// The disturbance that is worst for the controller at `tau` given `p_star`.
pub fn extract_disturbance(prob: &HopfProblem, p_star: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    check_time(prob, tau)?;
    check_dim("costate", prob.lifted_dim(), p_star.len())?;
    let q = (prob.fundamental(tau)? * &prob.model.l2).transpose() * p_star;
    let e = prob.d_ball.extremizer(q.as_slice());
    Ok(match prob.sense {
        GameSense::Reach => e,
        GameSense::Avoid => -e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Provenance;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn linear(k: DMatrix<f64>, l1: DMatrix<f64>, l2: DMatrix<f64>) -> LiftedLinearModel {
        LiftedLinearModel::new(k, l1, l2, Provenance::Analytic, None).unwrap()
    }

    fn one_d(delta: f64) -> HopfProblem {
        let model = linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::zeros(1, 0));
        let target = QuadTarget::unit_ball(1);
        HopfProblem::new(
            model,
            target,
            0.0,
            1.0,
            delta,
            GameSense::Reach,
            InputBall::new(1, 1.0).unwrap(),
            InputBall::new(0, 0.0).unwrap(),
        )
        .unwrap()
    }

    fn closed_form(g: f64) -> f64 {
        (g.abs() - 1.0).max(0.0).powi(2) - 1.0
    }

    #[test]
    fn flow_cache_identity_and_scalar_exponential() {
        let p = one_d(0.0);
        let c = FlowCache::build(&p).unwrap();
        assert_eq!(c.node_count(), DEFAULT_NODES + 1);
        for k in 0..c.node_count() {
            assert!((c.flow(k)[(0, 0)] - 1.0).abs() < 1e-15);
        }
        let w: f64 = c.weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-14);

        let decay = HopfProblem::new(
            linear(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1), DMatrix::zeros(1, 0)),
            QuadTarget::unit_ball(1),
            0.0,
            1.0,
            0.0,
            GameSense::Reach,
            InputBall::new(1, 1.0).unwrap(),
            InputBall::new(0, 0.0).unwrap(),
        )
        .unwrap();
        let c = FlowCache::build(&decay).unwrap();
        assert!((c.end_map()[(0, 0)] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((c.flow(DEFAULT_NODES)[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn slow_manifold_exponential_diagonal() {
        let k = DMatrix::from_row_slice(3, 3, &[-0.05, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, -0.1]);
        let e = k.exp();
        assert!((e[(0, 0)] - (-0.05f64).exp()).abs() < 1e-12);
        assert!((e[(1, 1)] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((e[(2, 2)] - (-0.1f64).exp()).abs() < 1e-12);
        assert!(e[(1, 0)].abs() < 1e-15 && e[(2, 1)].abs() < 1e-15);
        // (1,2) entry of exp for the 2x2 block [[a, 1], [0, b]]: (e^a - e^b) / (a - b)
        let want = ((-1.0f64).exp() - (-0.1f64).exp()) / (-1.0 + 0.1);
        assert!((e[(1, 2)] - want).abs() < 1e-12);
    }

    #[test]
    fn integrand_cases() {
        let p = one_d(0.0);
        let c = FlowCache::build(&p).unwrap();
        assert_eq!(hamiltonian_integrand(&p, &c, &v(&[0.0]), 3), 0.0);

        let model = linear(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::zeros(2, 0));
        let prob = HopfProblem::new(
            model,
            QuadTarget::unit_ball(2),
            0.0,
            1.0,
            0.0,
            GameSense::Reach,
            InputBall::new(2, 1.0).unwrap(),
            InputBall::new(0, 0.0).unwrap(),
        )
        .unwrap();
        let c = FlowCache::build(&prob).unwrap();
        assert!((hamiltonian_integrand(&prob, &c, &v(&[3.0, 4.0]), 0) + 5.0).abs() < 1e-14);

        let mut avoid = prob.clone();
        avoid.sense = GameSense::Avoid;
        let mut avoid_err = avoid.clone();
        avoid_err.delta = 0.3;
        let q = v(&[0.2, -0.7]);
        let ce = FlowCache::build(&avoid_err).unwrap();
        assert!(hamiltonian_integrand(&avoid_err, &ce, &q, 5) < hamiltonian_integrand(&avoid, &c, &q, 5));
    }

    #[test]
    fn objective_hand_values() {
        let p = one_d(0.0);
        let c = FlowCache::build(&p).unwrap();
        assert!((hopf_objective(&p, &c, &v(&[2.0]), &v(&[0.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(hopf_objective(&p, &c, &v(&[2.0]), &v(&[2.0])).unwrap().abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let p = one_d(0.0);
        let c = FlowCache::build(&p).unwrap();
        for g in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, -2.5] {
            let r = solve_value(&p, &c, &v(&[g]), &HopfOptions::default()).unwrap();
            assert!((r.value - closed_form(g)).abs() < 1e-6, "g = {g}: {} vs {}", r.value, closed_form(g));
            assert!(r.converged, "g = {g}");
        }
        let r = solve_value(&p, &c, &v(&[2.0]), &HopfOptions::default()).unwrap();
        assert!((r.p_star[0] - 2.0).abs() < 1e-5);
        let u = extract_control(&p, &r.p_star, 0.3).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_costate_gives_zero_control() {
        let p = one_d(0.0);
        assert_eq!(extract_control(&p, &v(&[0.0]), 0.5).unwrap()[0], 0.0);
        assert!(extract_control(&p, &v(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn suboptimal_costates_bound_value_from_below() {
        let p = one_d(0.0);
        let c = FlowCache::build(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = rng.random_range(-3.0..3.0);
            let r = solve_value(&p, &c, &v(&[g]), &HopfOptions::default()).unwrap();
            let q = v(&[rng.random_range(-10.0..10.0)]);
            assert!(-hopf_objective(&p, &c, &v(&[g]), &q).unwrap() <= r.value + 1e-9);
        }
    }

    #[test]
    fn objective_decreases_in_delta() {
        let k = DMatrix::from_row_slice(2, 2, &[-0.05, 0.0, 0.3, -1.0]);
        let mk = |delta| {
            HopfProblem::new(
                linear(k.clone(), DMatrix::identity(2, 2), DMatrix::identity(2, 2)),
                QuadTarget::unit_ball(2),
                0.0,
                1.0,
                delta,
                GameSense::Reach,
                InputBall::new(2, 0.5).unwrap(),
                InputBall::new(2, 0.25).unwrap(),
            )
            .unwrap()
        };
        let (a, b) = (mk(0.1), mk(0.4));
        let (ca, cb) = (FlowCache::build(&a).unwrap(), FlowCache::build(&b).unwrap());
        let g = v(&[0.4, 1.1]);
        let p = v(&[0.3, -0.9]);
        assert!(hopf_objective(&b, &cb, &g, &p).unwrap() < hopf_objective(&a, &ca, &g, &p).unwrap());
        let va = solve_value(&a, &ca, &g, &HopfOptions::default()).unwrap().value;
        let vb = solve_value(&b, &cb, &g, &HopfOptions::default()).unwrap().value;
        assert!(vb >= va - 1e-9);
    }

    #[test]
    fn grid_is_permutation_equivariant_and_matches_pointwise() {
        let p = one_d(0.0);
        let pts = vec![v(&[0.3]), v(&[2.2]), v(&[-1.7])];
        let a = solve_grid(&p, &pts, &HopfOptions::default()).unwrap();
        let rev: Vec<_> = pts.iter().rev().cloned().collect();
        let b = solve_grid(&p, &rev, &HopfOptions::default()).unwrap();
        for i in 0..3 {
            assert!((a.values[i] - b.values[2 - i]).abs() < 1e-9);
        }
        let c = FlowCache::build(&p).unwrap();
        let single = solve_value(&p, &c, &pts[0], &HopfOptions::default()).unwrap();
        assert_eq!(single.value, a.values[0]);
        assert!(solve_grid(&p, &[], &HopfOptions::default()).is_err());
    }

    #[test]
    fn bad_problems_rejected() {
        let p = one_d(0.0);
        assert!(HopfProblem::new(
            p.model.clone(),
            p.target.clone(),
            1.0,
            1.0,
            0.0,
            GameSense::Reach,
            p.u_ball.clone(),
            p.d_ball.clone()
        )
        .is_err());
        assert!(HopfProblem::new(
            p.model.clone(),
            QuadTarget::unit_ball(2),
            0.0,
            1.0,
            0.0,
            GameSense::Reach,
            p.u_ball.clone(),
            p.d_ball.clone()
        )
        .is_err());
        let c = FlowCache::build(&p).unwrap();
        let bad = HopfOptions { restarts: 0, ..Default::default() };
        assert!(solve_value(&p, &c, &v(&[0.0]), &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn no_input_value_is_cost_of_flowed_point(
            a in -1.0..0.5f64, b in -1.0..1.0f64, c in -1.5..0.2f64,
            g1 in -2.0..2.0f64, g2 in -2.0..2.0f64,
        ) {
            let k = DMatrix::from_row_slice(2, 2, &[a, b, 0.0, c]);
            let target = QuadTarget::new(v(&[0.2, -0.1]), DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7]), 0.9).unwrap();
            let prob = HopfProblem::new(
                linear(k.clone(), DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)),
                target.clone(), 0.0, 0.8, 0.0, GameSense::Reach,
                InputBall::new(1, 0.0).unwrap(), InputBall::new(1, 0.0).unwrap(),
            ).unwrap();
            let cache = FlowCache::build(&prob).unwrap();
            let g = v(&[g1, g2]);
            let r = solve_value(&prob, &cache, &g, &HopfOptions::default()).unwrap();
            let want = target.eval_j(&((k * 0.8).exp() * &g));
            prop_assert!((r.value - want).abs() < 1e-4, "{} vs {}", r.value, want);
        }
    }
}
