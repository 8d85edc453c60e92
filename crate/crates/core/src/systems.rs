//! Control- and disturbance-affine dynamics, fixed-step integration and the
//! two bundled benchmark systems.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::interval::{Interval, Scalar};

pub type DriftFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type InputMapFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type EnclosureFn = Arc<dyn Fn(&[Interval]) -> FieldEnclosure + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BallNorm {
    #[default]
    Euclidean,
    Box,
}

/// Compact convex input set `{v : ||v|| <= radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBall {
    pub dim: usize,
    pub radius: f64,
    #[serde(default)]
    pub norm: BallNorm,
}

impl InputBall {
    pub fn new(dim: usize, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "input ball radius must be finite and nonnegative, got {radius}"
            )));
        }
        Ok(InputBall {
            dim,
            radius,
            norm: BallNorm::Euclidean,
        })
    }

    pub fn with_norm(mut self, norm: BallNorm) -> Self {
        self.norm = norm;
        self
    }

    fn norm_of(&self, v: &[f64]) -> f64 {
        match self.norm {
            BallNorm::Euclidean => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            BallNorm::Box => v.iter().fold(0.0, |m, a| m.max(a.abs())),
        }
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == self.dim && self.norm_of(v.as_slice()) <= self.radius
    }

    /// Support function `sup_{v in ball} q . v`.
    pub fn support(&self, q: &[f64]) -> f64 {
        match self.norm {
            BallNorm::Euclidean => self.radius * q.iter().map(|a| a * a).sum::<f64>().sqrt(),
            BallNorm::Box => self.radius * q.iter().map(|a| a.abs()).sum::<f64>(),
        }
    }

    /// A maximizer of `q . v` over the ball; zero when `q = 0`.
    pub fn extremizer(&self, q: &[f64]) -> DVector<f64> {
        match self.norm {
            BallNorm::Euclidean => {
                let n = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n == 0.0 {
                    DVector::zeros(q.len())
                } else {
                    DVector::from_iterator(q.len(), q.iter().map(|a| self.radius * a / n))
                }
            }
            BallNorm::Box => DVector::from_iterator(
                q.len(),
                q.iter().map(|a| {
                    if *a == 0.0 {
                        0.0
                    } else {
                        self.radius * a.signum()
                    }
                }),
            ),
        }
    }

    /// Nearest point of the ball (radial scaling for the Euclidean case).
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.norm {
            BallNorm::Euclidean => {
                let n = v.norm();
                if n <= self.radius {
                    v.clone()
                } else {
                    v * (self.radius / n)
                }
            }
            BallNorm::Box => v.map(|a| a.clamp(-self.radius, self.radius)),
        }
    }

    /// Per-coordinate interval hull of the ball.
    pub fn interval_hull(&self) -> Vec<Interval> {
        vec![Interval::symmetric(self.radius); self.dim]
    }

    /// Uniform sample from the ball.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        if self.dim == 0 {
            return DVector::zeros(0);
        }
        match self.norm {
            BallNorm::Euclidean => {
                let g: DVector<f64> =
                    DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut *rng));
                let n = g.norm().max(f64::MIN_POSITIVE);
                let r = self.radius * rng.random::<f64>().powf(1.0 / self.dim as f64);
                g * (r / n)
            }
            BallNorm::Box => {
                DVector::from_fn(self.dim, |_, _| self.radius * (2.0 * rng.random::<f64>() - 1.0))
            }
        }
    }
}

/// Interval enclosure of `f_x`, `h1` and `h2` over a state box.
#[derive(Debug, Clone)]
pub struct FieldEnclosure {
    pub drift: Vec<Interval>,
    /// `n_x` rows of `n_u` entries.
    pub control: Vec<Vec<Interval>>,
    /// `n_x` rows of `n_d` entries.
    pub disturbance: Vec<Vec<Interval>>,
}

/// Nonlinear system `f(x,u,d) = f_x(x) + h1(x) u + h2(x) d`.
#[derive(Clone)]
pub struct AffineSystem {
    name: String,
    state_dim: usize,
    control_dim: usize,
    disturbance_dim: usize,
    drift: DriftFn,
    control: InputMapFn,
    disturbance: InputMapFn,
    u_ball: InputBall,
    d_ball: InputBall,
    lipschitz: Option<f64>,
    enclosure: Option<EnclosureFn>,
}

impl fmt::Debug for AffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("disturbance_dim", &self.disturbance_dim)
            .field("u_ball", &self.u_ball)
            .field("d_ball", &self.d_ball)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl AffineSystem {
    /// Builds a system with zero-radius input balls; set them with
    /// [`AffineSystem::with_balls`].
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        disturbance_dim: usize,
        drift: DriftFn,
        control: InputMapFn,
        disturbance: InputMapFn,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        Ok(AffineSystem {
            name: name.into(),
            state_dim,
            control_dim,
            disturbance_dim,
            drift,
            control,
            disturbance,
            u_ball: InputBall::new(control_dim, 0.0)?,
            d_ball: InputBall::new(disturbance_dim, 0.0)?,
            lipschitz: None,
            enclosure: None,
        })
    }

    pub fn with_balls(mut self, u_ball: InputBall, d_ball: InputBall) -> Result<Self> {
        check_dim("control ball", self.control_dim, u_ball.dim)?;
        check_dim("disturbance ball", self.disturbance_dim, d_ball.dim)?;
        self.u_ball = u_ball;
        self.d_ball = d_ball;
        Ok(self)
    }

    pub fn with_lipschitz(mut self, bound: f64) -> Self {
        self.lipschitz = Some(bound);
        self
    }

    pub fn with_enclosure(mut self, enclosure: EnclosureFn) -> Self {
        self.enclosure = Some(enclosure);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }
    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_dim
    }
    pub fn u_ball(&self) -> &InputBall {
        &self.u_ball
    }
    pub fn d_ball(&self) -> &InputBall {
        &self.d_ball
    }
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
    pub fn has_enclosure(&self) -> bool {
        self.enclosure.is_some()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    pub fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.control)(x)
    }
    pub fn disturbance_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.disturbance)(x)
    }

    /// `f_x(x) + h1(x) u + h2(x) d`.
    pub fn eval_dynamics(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("control", self.control_dim, u.len())?;
        check_dim("disturbance", self.disturbance_dim, d.len())?;
        Ok(self.eval_unchecked(x, u, d))
    }

    pub(crate) fn eval_unchecked(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
    ) -> DVector<f64> {
        let mut f = (self.drift)(x);
        if self.control_dim > 0 {
            f += (self.control)(x) * u;
        }
        if self.disturbance_dim > 0 {
            f += (self.disturbance)(x) * d;
        }
        f
    }

    /// Interval hull of `f(box, U, D)`.
    ///
    /// Uses the exact interval extension when one was supplied, otherwise a
    /// Lipschitz bound around the box center (requires `lipschitz`).
    pub fn field_enclosure(&self, state_box: &[Interval]) -> Result<Vec<Interval>> {
        check_dim("state box", self.state_dim, state_box.len())?;
        let u_hull = self.u_ball.interval_hull();
        let d_hull = self.d_ball.interval_hull();
        if let Some(enc) = &self.enclosure {
            let e = enc(state_box);
            let out = (0..self.state_dim)
                .map(|i| {
                    let mut acc = e.drift[i];
                    for (j, uj) in u_hull.iter().enumerate() {
                        acc = acc + e.control[i][j] * *uj;
                    }
                    for (j, dj) in d_hull.iter().enumerate() {
                        acc = acc + e.disturbance[i][j] * *dj;
                    }
                    acc
                })
                .collect();
            return Ok(out);
        }
        let lip = self.lipschitz.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "system '{}' has neither an interval extension nor a Lipschitz bound",
                self.name
            ))
        })?;
        let center = DVector::from_iterator(self.state_dim, state_box.iter().map(|i| i.mid()));
        let radius = state_box
            .iter()
            .map(|i| 0.5 * i.width())
            .map(|r| r * r)
            .sum::<f64>()
            .sqrt();
        let fx = (self.drift)(&center);
        let h1 = (self.control)(&center);
        let h2 = (self.disturbance)(&center);
        // input contribution at the center, then a Lipschitz slab for the state spread
        Ok((0..self.state_dim)
            .map(|i| {
                let ru = self.u_ball.support(h1.row(i).transpose().as_slice());
                let rd = self.d_ball.support(h2.row(i).transpose().as_slice());
                Interval::point(fx[i]) + Interval::symmetric(ru + rd + lip * radius)
            })
            .collect())
    }
}

/// Time-indexed state samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Option<Vec<DVector<f64>>>,
    pub disturbances: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// One classical RK4 step with inputs held constant over the step.
pub fn rk4_step(
    sys: &AffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let k1 = sys.eval_unchecked(x, u, d);
    let k2 = sys.eval_unchecked(&(x + &k1 * (0.5 * h)), u, d);
    let k3 = sys.eval_unchecked(&(x + &k2 * (0.5 * h)), u, d);
    let k4 = sys.eval_unchecked(&(x + &k3 * h), u, d);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Step grid `t, t+h, ..., T` with the last step shortened to land on `T`.
pub fn step_times(t: f64, t_final: f64, h: f64) -> Vec<f64> {
    let span = t_final - t;
    let n = ((span / h) - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..n).map(|k| t + k as f64 * h).collect();
    times.push(t_final);
    times
}

/// Fixed-step RK4 from `t` to `t_final`; signals are sampled at the stage times.
pub fn integrate(
    sys: &AffineSystem,
    x0: &DVector<f64>,
    u_sig: &dyn Fn(f64) -> DVector<f64>,
    d_sig: &dyn Fn(f64) -> DVector<f64>,
    t: f64,
    t_final: f64,
    h: f64,
) -> Result<Trajectory> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    if !(t < t_final) {
        return Err(Error::InvalidArgument(format!(
            "initial time {t} must precede final time {t_final}"
        )));
    }
    check_dim("initial state", sys.state_dim, x0.len())?;
    let times = step_times(t, t_final, h);
    let mut states = Vec::with_capacity(times.len());
    states.push(x0.clone());
    let mut x = x0.clone();
    for w in times.windows(2) {
        let (s, dt) = (w[0], w[1] - w[0]);
        let (u0, d0) = (u_sig(s), d_sig(s));
        let (um, dm) = (u_sig(s + 0.5 * dt), d_sig(s + 0.5 * dt));
        let (u1, d1) = (u_sig(s + dt), d_sig(s + dt));
        check_dim("control signal", sys.control_dim, u0.len())?;
        check_dim("disturbance signal", sys.disturbance_dim, d0.len())?;
        let k1 = sys.eval_unchecked(&x, &u0, &d0);
        let k2 = sys.eval_unchecked(&(&x + &k1 * (0.5 * dt)), &um, &dm);
        let k3 = sys.eval_unchecked(&(&x + &k2 * (0.5 * dt)), &um, &dm);
        let k4 = sys.eval_unchecked(&(&x + &k3 * dt), &u1, &d1);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: s + dt });
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        controls: None,
        disturbances: None,
    })
}

/// Zero-order-hold signal: value `values[k]` on `[times[k], times[k+1])`.
#[derive(Debug, Clone)]
pub struct ZeroOrderHold {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl ZeroOrderHold {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidArgument(
                "zero-order hold needs matching, nonempty times and values".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("hold times must increase".into()));
        }
        Ok(ZeroOrderHold { times, values })
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        self.values[k].clone()
    }
}

pub fn constant_signal(v: DVector<f64>) -> impl Fn(f64) -> DVector<f64> {
    move |_| v.clone()
}

/// Estimates a Lipschitz constant of `f` over a box by sampling the spectral
/// norm of a finite-difference Jacobian (inputs at zero and at the ball's
/// axis extremes), scaled by a 1.5 safety factor.
pub fn estimate_lipschitz(sys: &AffineSystem, lo: &[f64], hi: &[f64], per_dim: usize) -> Result<f64> {
    check_dim("box lower", sys.state_dim, lo.len())?;
    check_dim("box upper", sys.state_dim, hi.len())?;
    let n = sys.state_dim;
    let per_dim = per_dim.max(2);
    let mut inputs = vec![(DVector::zeros(sys.control_dim), DVector::zeros(sys.disturbance_dim))];
    for j in 0..sys.control_dim {
        for s in [-1.0, 1.0] {
            let mut u = DVector::zeros(sys.control_dim);
            u[j] = s * sys.u_ball.radius;
            inputs.push((u, DVector::zeros(sys.disturbance_dim)));
        }
    }
    for j in 0..sys.disturbance_dim {
        for s in [-1.0, 1.0] {
            let mut d = DVector::zeros(sys.disturbance_dim);
            d[j] = s * sys.d_ball.radius;
            inputs.push((DVector::zeros(sys.control_dim), d));
        }
    }
    let total = per_dim.pow(n as u32);
    let mut best: f64 = 0.0;
    let step = 1e-6;
    for flat in 0..total {
        let mut idx = flat;
        let x = DVector::from_fn(n, |i, _| {
            let k = idx % per_dim;
            idx /= per_dim;
            lo[i] + (hi[i] - lo[i]) * k as f64 / (per_dim - 1) as f64
        });
        for (u, d) in &inputs {
            let mut jac = DMatrix::zeros(n, n);
            for c in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += step;
                xm[c] -= step;
                let col = (sys.eval_unchecked(&xp, u, d) - sys.eval_unchecked(&xm, u, d)) / (2.0 * step);
                jac.set_column(c, &col);
            }
            let s = jac.singular_values().max();
            if !s.is_finite() {
                return Err(Error::Evaluation("Jacobian during Lipschitz estimate".into()));
            }
            best = best.max(s);
        }
    }
    Ok(1.5 * best)
}

pub const DEMO_SYSTEMS: [&str; 2] = ["slow_manifold", "vanderpol"];

fn slow_manifold_drift<S: Scalar>(x: &[S], mu: f64, lambda: f64) -> [S; 2] {
    [S::cst(mu) * x[0], S::cst(lambda) * (x[1] - x[0].sq())]
}

fn vanderpol_drift<S: Scalar>(x: &[S], mu: f64) -> [S; 2] {
    [x[1], S::cst(mu) * (S::cst(1.0) - x[0].sq()) * x[1] - x[0]]
}

fn take_params(
    name: &str,
    params: &BTreeMap<String, f64>,
    defaults: &[(&str, f64)],
) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> =
        defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in params {
        if !out.contains_key(k) {
            let valid: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
            return Err(Error::InvalidArgument(format!(
                "unknown parameter '{k}' for system '{name}' (valid: {})",
                valid.join(", ")
            )));
        }
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("parameter '{k}' must be finite")));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

fn constant_map(m: DMatrix<f64>) -> InputMapFn {
    Arc::new(move |_x: &DVector<f64>| m.clone())
}

fn interval_rows(m: &DMatrix<f64>) -> Vec<Vec<Interval>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| Interval::point(m[(i, j)])).collect())
        .collect()
}

/// Bundled benchmark systems.
///
/// * `slow_manifold`: `(mu x1, lambda (x2 - x1^2)) + u + d`, defaults
///   `mu = -0.05`, `lambda = -1`, `|u| <= 1/2`, `|d| <= 1/4`.
/// * `vanderpol`: `(x2, mu (1 - x1^2) x2 - x1) + (0, 1) u`, defaults `mu = 1`,
///   `|u| <= 1/2`, no disturbance.
pub fn make_demo_system(name: &str, params: &BTreeMap<String, f64>) -> Result<AffineSystem> {
    match name {
        "slow_manifold" => {
            let p = take_params(
                name,
                params,
                &[("mu", -0.05), ("lambda", -1.0), ("u_radius", 0.5), ("d_radius", 0.25)],
            )?;
            let (mu, lambda) = (p["mu"], p["lambda"]);
            let drift: DriftFn = Arc::new(move |x: &DVector<f64>| {
                let f = slow_manifold_drift(x.as_slice(), mu, lambda);
                DVector::from_row_slice(&f)
            });
            let eye = DMatrix::<f64>::identity(2, 2);
            let enc_eye = interval_rows(&eye);
            let enclosure: EnclosureFn = Arc::new(move |b: &[Interval]| FieldEnclosure {
                drift: slow_manifold_drift(b, mu, lambda).to_vec(),
                control: enc_eye.clone(),
                disturbance: enc_eye.clone(),
            });
            AffineSystem::new(
                name,
                2,
                2,
                2,
                drift,
                constant_map(eye.clone()),
                constant_map(eye),
            )?
            .with_balls(InputBall::new(2, p["u_radius"])?, InputBall::new(2, p["d_radius"])?)
            .map(|s| s.with_enclosure(enclosure))
        }
        "vanderpol" => {
            let p = take_params(name, params, &[("mu", 1.0), ("u_radius", 0.5)])?;
            let mu = p["mu"];
            let drift: DriftFn = Arc::new(move |x: &DVector<f64>| {
                let f = vanderpol_drift(x.as_slice(), mu);
                DVector::from_row_slice(&f)
            });
            let h1 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
            let enc_h1 = interval_rows(&h1);
            let enclosure: EnclosureFn = Arc::new(move |b: &[Interval]| FieldEnclosure {
                drift: vanderpol_drift(b, mu).to_vec(),
                control: enc_h1.clone(),
                disturbance: vec![vec![]; 2],
            });
            AffineSystem::new(
                name,
                2,
                1,
                0,
                drift,
                constant_map(h1),
                constant_map(DMatrix::zeros(2, 0)),
            )?
            .with_balls(InputBall::new(1, p["u_radius"])?, InputBall::new(0, 0.0)?)
            .map(|s| s.with_enclosure(enclosure))
        }
        other => Err(Error::NotFound {
            kind: "system",
            name: other.to_string(),
            valid: DEMO_SYSTEMS.join(", "),
        }),
    }
}
