//! Linear models `g' = K g + L1 u + L2 d` in the lifted space: analytic,
//! Taylor, and least-squares (EDMD / DMD) fits.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lifting::{LiftMap, LiftSpec};
use crate::systems::{rk4_step, AffineSystem};

pub const DEFAULT_RIDGE: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Taylor { center: Vec<f64> },
    Edmd { n_samples: usize, seed: u64 },
    Dmd { n_samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedLinearModel {
    pub k: DMatrix<f64>,
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
    pub provenance: Provenance,
    /// Lift the model lives on; `None` for custom lifts.
    pub lift: Option<LiftSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    lifted_dim: usize,
    control_dim: usize,
    disturbance_dim: usize,
    k: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    provenance: Provenance,
    lift: Option<LiftSpec>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect()
}

fn from_row_major(r: usize, c: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != r * c {
        return Err(Error::Serde(format!(
            "{what}: expected {} entries, found {}",
            r * c,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(r, c, data))
}

impl LiftedLinearModel {
    pub fn new(
        k: DMatrix<f64>,
        l1: DMatrix<f64>,
        l2: DMatrix<f64>,
        provenance: Provenance,
        lift: Option<LiftSpec>,
    ) -> Result<Self> {
        let n = k.nrows();
        check_dim("K columns", n, k.ncols())?;
        check_dim("L1 rows", n, l1.nrows())?;
        check_dim("L2 rows", n, l2.nrows())?;
        if k.iter().chain(l1.iter()).chain(l2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Evaluation("linear model entries".into()));
        }
        Ok(LiftedLinearModel {
            k,
            l1,
            l2,
            provenance,
            lift,
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.k.nrows()
    }
    pub fn control_dim(&self) -> usize {
        self.l1.ncols()
    }
    pub fn disturbance_dim(&self) -> usize {
        self.l2.ncols()
    }

    /// `K g + L1 u + L2 d`.
    pub fn eval(&self, g: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.k * g;
        if self.control_dim() > 0 {
            out += &self.l1 * u;
        }
        if self.disturbance_dim() > 0 {
            out += &self.l2 * d;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            lifted_dim: self.lifted_dim(),
            control_dim: self.control_dim(),
            disturbance_dim: self.disturbance_dim(),
            k: row_major(&self.k),
            l1: row_major(&self.l1),
            l2: row_major(&self.l2),
            provenance: self.provenance.clone(),
            lift: self.lift.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        let n = doc.lifted_dim;
        LiftedLinearModel::new(
            from_row_major(n, n, &doc.k, "K")?,
            from_row_major(n, doc.control_dim, &doc.l1, "L1")?,
            from_row_major(n, doc.disturbance_dim, &doc.l2, "L2")?,
            doc.provenance,
            doc.lift,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LiftedLinearModel::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Slow-manifold model with the state-dependent input column frozen at `c`:
/// `K = [[mu,0,0],[0,lambda,-lambda],[0,0,2mu]]`, `L1 = L2 = [[1,0],[0,1],[2c1,0]]`.
pub fn analytic_slow_manifold_model(c: &DVector<f64>, mu: f64, lambda: f64) -> Result<LiftedLinearModel> {
    check_dim("linearization center", 2, c.len())?;
    let k = DMatrix::from_row_slice(
        3,
        3,
        &[mu, 0.0, 0.0, 0.0, lambda, -lambda, 0.0, 0.0, 2.0 * mu],
    );
    let l = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0 * c[0], 0.0]);
    LiftedLinearModel::new(k, l.clone(), l, Provenance::Analytic, Some(LiftSpec::SlowManifold))
}

/// One sampled transition `(x, u, d, f(x,u,d))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub d: DVector<f64>,
    pub xdot: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub pairs: Vec<SamplePair>,
    pub seed: u64,
}

/// Short RK4 snippets from uniform initial states in `[lo, hi]` with inputs
/// drawn uniformly from their balls at every step. Each visited state is
/// recorded with the exact field value.
pub fn sample_trajectories(
    sys: &AffineSystem,
    lo: &[f64],
    hi: &[f64],
    n_points: usize,
    snippet_len: usize,
    h: f64,
    seed: u64,
) -> Result<TrajectorySample> {
    check_dim("sample box lower", sys.state_dim(), lo.len())?;
    check_dim("sample box upper", sys.state_dim(), hi.len())?;
    if n_points == 0 || snippet_len == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_points);
    while pairs.len() < n_points {
        let mut x = DVector::from_fn(sys.state_dim(), |i, _| rng.random_range(lo[i]..=hi[i]));
        for _ in 0..snippet_len {
            if pairs.len() == n_points {
                break;
            }
            let u = sys.u_ball().sample(&mut rng);
            let d = sys.d_ball().sample(&mut rng);
            let xdot = sys.eval_unchecked(&x, &u, &d);
            let next = rk4_step(sys, &x, &u, &d, h);
            pairs.push(SamplePair {
                x: x.clone(),
                u,
                d,
                xdot,
            });
            if next.iter().any(|v| !v.is_finite()) {
                break;
            }
            x = next;
        }
    }
    Ok(TrajectorySample { pairs, seed })
}

/// Continuous-time least squares: fits `K Psi(x) + L1 u + L2 d` to the
/// lifted derivative `grad Psi(x) xdot` with Frobenius ridge, via the normal
/// equations on the stacked regressor `[Psi(x); u; d]`.
pub fn fit_edmd(m: &LiftMap, data: &TrajectorySample, ridge: f64) -> Result<LiftedLinearModel> {
    let first = data
        .pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("EDMD needs at least one sample".into()))?;
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {ridge}")));
    }
    let (nk, nu, nd) = (m.lifted_dim(), first.u.len(), first.d.len());
    let p = nk + nu + nd;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut cross = DMatrix::<f64>::zeros(p, nk);
    let mut z = DVector::<f64>::zeros(p);
    for pair in &data.pairs {
        check_dim("sample state", m.state_dim(), pair.x.len())?;
        check_dim("sample control", nu, pair.u.len())?;
        check_dim("sample disturbance", nd, pair.d.len())?;
        let g = m.lift(&pair.x)?;
        let y = m.lift_jacobian(&pair.x)? * &pair.xdot;
        z.rows_mut(0, nk).copy_from(&g);
        z.rows_mut(nk, nu).copy_from(&pair.u);
        z.rows_mut(nk + nu, nd).copy_from(&pair.d);
        gram.syger(1.0, &z, &z, 1.0);
        cross.ger(1.0, &z, &y, 1.0);
    }
    let scale = gram.diagonal().amax().max(1.0);
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::SingularFit(format!("regressor Gram matrix of size {p} is not positive definite"))
    })?;
    if ridge == 0.0 {
        let eig = gram.symmetric_eigenvalues();
        if eig.min() <= 1e-13 * scale {
            return Err(Error::SingularFit(format!(
                "regressor is rank deficient (smallest Gram eigenvalue {:.3e})",
                eig.min()
            )));
        }
    }
    // gram * W^T = cross
    let wt = chol.solve(&cross);
    let w = wt.transpose();
    let provenance = if m.is_identity() {
        Provenance::Dmd {
            n_samples: data.pairs.len(),
            seed: data.seed,
        }
    } else {
        Provenance::Edmd {
            n_samples: data.pairs.len(),
            seed: data.seed,
        }
    };
    LiftedLinearModel::new(
        w.columns(0, nk).into_owned(),
        w.columns(nk, nu).into_owned(),
        w.columns(nk + nu, nd).into_owned(),
        provenance,
        m.spec().cloned(),
    )
}

/// Input-aware DMD: the least-squares fit on the identity lift.
pub fn fit_dmd(sys: &AffineSystem, data: &TrajectorySample, ridge: f64) -> Result<LiftedLinearModel> {
    fit_edmd(&LiftMap::identity(sys.state_dim()), data, ridge)
}

/// First-order model about `center`: `K` is the finite-difference Jacobian
/// of `g -> grad Psi(P g) f_x(P g)` at `Psi(center)`, `L_i = grad Psi(c) h_i(c)`.
pub fn taylor_model(sys: &AffineSystem, m: &LiftMap, center: &DVector<f64>) -> Result<LiftedLinearModel> {
    check_dim("taylor center", sys.state_dim(), center.len())?;
    check_dim("lift vs system", sys.state_dim(), m.state_dim())?;
    let (n, nk) = (sys.state_dim(), m.lifted_dim());
    let lifted_drift = |x: &DVector<f64>| m.jacobian_unchecked(x.as_slice()) * sys.drift(x);
    let mut k = DMatrix::zeros(nk, nk);
    // the map reads only P g, so the columns of the extra coordinates vanish
    for c in 0..n {
        let mut xp = center.clone();
        let mut xm = center.clone();
        xp[c] += FD_STEP;
        xm[c] -= FD_STEP;
        let col = (lifted_drift(&xp) - lifted_drift(&xm)) / (2.0 * FD_STEP);
        k.set_column(c, &col);
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("Taylor Jacobian".into()));
    }
    let jac = m.lift_jacobian(center)?;
    LiftedLinearModel::new(
        k,
        &jac * sys.control_matrix(center),
        &jac * sys.disturbance_matrix(center),
        Provenance::Taylor {
            center: center.iter().copied().collect(),
        },
        m.spec().cloned(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Euclidean residual `|f_G(Psi(x),u,d) - kappa(Psi(x),u,d)|` per point.
pub fn pointwise_residual(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<f64> {
    let g = m.lift(x)?;
    let truth = m.lift_jacobian(x)? * sys.eval_dynamics(x, u, d)?;
    Ok((truth - model.eval(&g, u, d)).norm())
}

pub fn model_residual(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    pts: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
) -> Result<ResidualStats> {
    if pts.is_empty() {
        return Err(Error::InvalidArgument("residual needs at least one point".into()));
    }
    check_dim("model vs lift", m.lifted_dim(), model.lifted_dim())?;
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for (x, u, d) in pts {
        let r = pointwise_residual(model, m, sys, x, u, d)?;
        max = max.max(r);
        sum += r;
    }
    Ok(ResidualStats {
        max,
        mean: sum / pts.len() as f64,
        count: pts.len(),
    })
}
