//! State-inclusive lifting functions `Psi(x) = [x, psi_1(x), ...]`, the
//! projection back to the state, and the lifted nonlinear dynamics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::systems::AffineSystem;

pub const DEFAULT_MANIFOLD_TOL: f64 = 1e-6;

/// Serializable description of a lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LiftSpec {
    Identity,
    /// All monomials of total degree `2..=degree`, graded lexicographic,
    /// preceded by the constant monomial when `bias` is set.
    Polynomial {
        degree: u32,
        #[serde(default = "default_bias")]
        bias: bool,
    },
    /// Explicit monomial exponents, one entry per extra observable.
    Monomials { exponents: Vec<Vec<u32>> },
    /// Gaussian kernels `exp(-|x - c|^2 / (2 w^2))`.
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
    /// `count` Gaussian kernels placed by [`rbf_grid_centers`] over a box.
    RbfGrid { count: usize, lo: Vec<f64>, hi: Vec<f64> },
    /// `[x1, x2, x1^2]`.
    SlowManifold,
}

fn default_bias() -> bool {
    true
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A user-supplied observable with its gradient.
#[derive(Clone)]
pub struct CustomFeature {
    pub name: String,
    pub value: ValueFn,
    pub gradient: GradFn,
}

#[derive(Clone)]
enum Features {
    Monomials(Vec<Vec<u32>>),
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
    Custom(Vec<CustomFeature>),
}

/// Lifting function with its Jacobian and projection.
#[derive(Clone)]
pub struct LiftMap {
    state_dim: usize,
    features: Features,
    spec: Option<LiftSpec>,
}

impl fmt::Debug for LiftMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiftMap")
            .field("state_dim", &self.state_dim)
            .field("lifted_dim", &self.lifted_dim())
            .field("spec", &self.spec)
            .finish()
    }
}

/// Exponent vectors of total degree `deg` in `n` variables, lexicographically
/// descending in the first variable.
fn monomials_of_degree(n: usize, deg: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![deg]];
    }
    let mut out = Vec::new();
    for first in (0..=deg).rev() {
        for mut rest in monomials_of_degree(n - 1, deg - first) {
            let mut e = vec![first];
            e.append(&mut rest);
            out.push(e);
        }
    }
    out
}

/// Centers on a uniform grid over `[lo, hi]` and the shared kernel width.
///
/// A `k x k` grid (per dimension `k = ceil(count^(1/n))`) is laid over the
/// box and the `count` nodes nearest its middle are kept, ties broken in grid
/// order. The width is the mean nearest-center spacing.
pub fn rbf_grid_centers(count: usize, lo: &[f64], hi: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let n = lo.len();
    if count < 2 || n == 0 || hi.len() != n || lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
        return Err(Error::InvalidArgument(
            "rbf grid needs at least two centers and a nondegenerate box".into(),
        ));
    }
    let mut k = 1usize;
    while k.pow(n as u32) < count {
        k += 1;
    }
    let k = k.max(2);
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut nodes: Vec<(f64, usize, Vec<f64>)> = (0..k.pow(n as u32))
        .map(|flat| {
            let mut idx = flat;
            let p: Vec<f64> = (0..n)
                .map(|i| {
                    let j = idx % k;
                    idx /= k;
                    lo[i] + (hi[i] - lo[i]) * j as f64 / (k - 1) as f64
                })
                .collect();
            let d2: f64 = p.iter().zip(&mid).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, flat, p)
        })
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let centers: Vec<Vec<f64>> = nodes.into_iter().take(count).map(|n| n.2).collect();
    let spacing: f64 = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            centers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| c.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / centers.len() as f64;
    Ok((centers, spacing))
}

impl LiftMap {
    pub fn identity(state_dim: usize) -> Self {
        LiftMap {
            state_dim,
            features: Features::Monomials(Vec::new()),
            spec: Some(LiftSpec::Identity),
        }
    }

    pub fn polynomial(state_dim: usize, degree: u32, bias: bool) -> Result<Self> {
        if degree < 2 {
            return Err(Error::InvalidArgument(format!(
                "polynomial lift degree must be >= 2, got {degree}"
            )));
        }
        let mut exps = Vec::new();
        if bias {
            exps.push(vec![0; state_dim]);
        }
        for deg in 2..=degree {
            exps.extend(monomials_of_degree(state_dim, deg));
        }
        let mut m = LiftMap::monomials(state_dim, exps)?;
        m.spec = Some(LiftSpec::Polynomial { degree, bias });
        Ok(m)
    }

    pub fn monomials(state_dim: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        for e in &exponents {
            check_dim("monomial exponent", state_dim, e.len())?;
            if e.iter().sum::<u32>() == 1 {
                return Err(Error::InvalidArgument(
                    "degree-1 monomials duplicate the state block".into(),
                ));
            }
        }
        Ok(LiftMap {
            state_dim,
            spec: Some(LiftSpec::Monomials {
                exponents: exponents.clone(),
            }),
            features: Features::Monomials(exponents),
        })
    }

    pub fn rbf(centers: Vec<Vec<f64>>, width: f64) -> Result<Self> {
        let state_dim = centers.first().map(|c| c.len()).unwrap_or(0);
        if centers.is_empty() || state_dim == 0 || centers.iter().any(|c| c.len() != state_dim) {
            return Err(Error::InvalidArgument("rbf centers must be nonempty and equal-length".into()));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidArgument(format!("rbf width must be positive, got {width}")));
        }
        Ok(LiftMap {
            state_dim,
            spec: Some(LiftSpec::Rbf {
                centers: centers.clone(),
                width,
            }),
            features: Features::Rbf { centers, width },
        })
    }

    /// `[x1, x2, x1^2]`, exact for the autonomous slow-manifold drift.
    pub fn slow_manifold() -> Self {
        let mut m = LiftMap::monomials(2, vec![vec![2, 0]]).expect("static exponents");
        m.spec = Some(LiftSpec::SlowManifold);
        m
    }

    pub fn custom(state_dim: usize, features: Vec<CustomFeature>) -> Self {
        LiftMap {
            state_dim,
            features: Features::Custom(features),
            spec: None,
        }
    }

    pub fn from_spec(spec: &LiftSpec, state_dim: usize) -> Result<Self> {
        let m = match spec {
            LiftSpec::Identity => LiftMap::identity(state_dim),
            LiftSpec::Polynomial { degree, bias } => LiftMap::polynomial(state_dim, *degree, *bias)?,
            LiftSpec::Monomials { exponents } => LiftMap::monomials(state_dim, exponents.clone())?,
            LiftSpec::Rbf { centers, width } => LiftMap::rbf(centers.clone(), *width)?,
            LiftSpec::RbfGrid { count, lo, hi } => {
                let (c, w) = rbf_grid_centers(*count, lo, hi)?;
                LiftMap::rbf(c, w)?
            }
            LiftSpec::SlowManifold => LiftMap::slow_manifold(),
        };
        check_dim("lift state dimension", state_dim, m.state_dim)?;
        Ok(m)
    }

    /// Spec with grid placements resolved; `None` for custom lifts.
    pub fn spec(&self) -> Option<&LiftSpec> {
        self.spec.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn feature_count(&self) -> usize {
        match &self.features {
            Features::Monomials(e) => e.len(),
            Features::Rbf { centers, .. } => centers.len(),
            Features::Custom(f) => f.len(),
        }
    }

    pub fn lifted_dim(&self) -> usize {
        self.state_dim + self.feature_count()
    }

    pub fn is_identity(&self) -> bool {
        self.feature_count() == 0
    }

    fn feature_name(&self, i: usize) -> String {
        match &self.features {
            Features::Custom(f) => format!("psi_{} ({})", i + 1, f[i].name),
            _ => format!("psi_{}", i + 1),
        }
    }

    /// `[x; psi_1(x); ...; psi_m(x)]`.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("lift input", self.state_dim, x.len())?;
        let g = self.lift_unchecked(x.as_slice());
        if let Some(i) = (0..self.feature_count()).find(|i| !g[self.state_dim + i].is_finite()) {
            return Err(Error::Evaluation(self.feature_name(i)));
        }
        Ok(g)
    }

    pub(crate) fn lift_unchecked(&self, x: &[f64]) -> DVector<f64> {
        let n = self.state_dim;
        let mut g = DVector::zeros(self.lifted_dim());
        g.rows_mut(0, n).copy_from_slice(x);
        match &self.features {
            Features::Monomials(exps) => {
                for (i, e) in exps.iter().enumerate() {
                    g[n + i] = e.iter().zip(x).map(|(&a, &v)| v.powi(a as i32)).product();
                }
            }
            Features::Rbf { centers, width } => {
                let s = 1.0 / (2.0 * width * width);
                for (i, c) in centers.iter().enumerate() {
                    let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    g[n + i] = (-d2 * s).exp();
                }
            }
            Features::Custom(fs) => {
                for (i, f) in fs.iter().enumerate() {
                    g[n + i] = (f.value)(x);
                }
            }
        }
        g
    }

    /// `n_k x n_x` Jacobian; the top block is the identity.
    pub fn lift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("lift input", self.state_dim, x.len())?;
        let jac = self.jacobian_unchecked(x.as_slice());
        for i in 0..self.feature_count() {
            if jac.row(self.state_dim + i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation(self.feature_name(i)));
            }
        }
        Ok(jac)
    }

    pub(crate) fn jacobian_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(self.lifted_dim(), n);
        for i in 0..n {
            jac[(i, i)] = 1.0;
        }
        match &self.features {
            Features::Monomials(exps) => {
                for (r, e) in exps.iter().enumerate() {
                    for c in 0..n {
                        if e[c] == 0 {
                            continue;
                        }
                        let mut v = e[c] as f64 * x[c].powi(e[c] as i32 - 1);
                        for (k, (&a, &xv)) in e.iter().zip(x).enumerate() {
                            if k != c {
                                v *= xv.powi(a as i32);
                            }
                        }
                        jac[(n + r, c)] = v;
                    }
                }
            }
            Features::Rbf { centers, width } => {
                let s = 1.0 / (2.0 * width * width);
                for (r, ctr) in centers.iter().enumerate() {
                    let d2: f64 = ctr.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    let val = (-d2 * s).exp();
                    for c in 0..n {
                        jac[(n + r, c)] = -2.0 * s * (x[c] - ctr[c]) * val;
                    }
                }
            }
            Features::Custom(fs) => {
                for (r, f) in fs.iter().enumerate() {
                    let grad = (f.gradient)(x);
                    for c in 0..n {
                        jac[(n + r, c)] = grad[c];
                    }
                }
            }
        }
        jac
    }

    /// `P g`: the first `n_x` coordinates.
    pub fn project(&self, g: &DVector<f64>) -> DVector<f64> {
        g.rows(0, self.state_dim).into_owned()
    }

    /// `P` as a matrix `[I 0]`.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim, self.lifted_dim())
    }

    /// `||g - Psi(P g)||_inf <= tol`.
    pub fn is_on_manifold(&self, g: &DVector<f64>, tol: f64) -> bool {
        if g.len() != self.lifted_dim() {
            return false;
        }
        let back = self.lift_unchecked(&g.as_slice()[..self.state_dim]);
        (g - back).amax() <= tol
    }
}

/// Lifted nonlinear dynamics `f_G(g,u,d) = grad Psi(P g) f(P g, u, d)`.
///
/// Reads only `P g`, so it is defined on the whole augmented space.
pub fn lifted_dynamics(m: &LiftMap, sys: &AffineSystem) -> Result<AffineSystem> {
    check_dim("lift vs system state", sys.state_dim(), m.state_dim())?;
    let n = m.state_dim();
    let (mf, sf) = (Arc::new(m.clone()), Arc::new(sys.clone()));
    let (mc, sc) = (mf.clone(), sf.clone());
    let (md, sd) = (mf.clone(), sf.clone());
    let drift = Arc::new(move |g: &DVector<f64>| {
        let x = g.rows(0, n).into_owned();
        mf.jacobian_unchecked(x.as_slice()) * sf.drift(&x)
    });
    let control = Arc::new(move |g: &DVector<f64>| {
        let x = g.rows(0, n).into_owned();
        mc.jacobian_unchecked(x.as_slice()) * sc.control_matrix(&x)
    });
    let disturbance = Arc::new(move |g: &DVector<f64>| {
        let x = g.rows(0, n).into_owned();
        md.jacobian_unchecked(x.as_slice()) * sd.disturbance_matrix(&x)
    });
    AffineSystem::new(
        format!("{}_lifted", sys.name()),
        m.lifted_dim(),
        sys.control_dim(),
        sys.disturbance_dim(),
        drift,
        control,
        disturbance,
    )?
    .with_balls(sys.u_ball().clone(), sys.d_ball().clone())
}

/// Base points and their lifts, i.e. samples of the manifold `R_Psi`.
#[derive(Debug, Clone)]
pub struct ManifoldGrid {
    pub base_points: Vec<DVector<f64>>,
    pub lifted_points: Vec<DVector<f64>>,
}

impl ManifoldGrid {
    pub fn new(m: &LiftMap, base_points: Vec<DVector<f64>>) -> Result<Self> {
        let lifted_points = base_points.iter().map(|x| m.lift(x)).collect::<Result<_>>()?;
        Ok(ManifoldGrid {
            base_points,
            lifted_points,
        })
    }

    pub fn len(&self) -> usize {
        self.base_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn slow_manifold_lift_values() {
        let m = LiftMap::slow_manifold();
        assert_eq!(m.lift(&v(&[2.0, 3.0])).unwrap(), v(&[2.0, 3.0, 4.0]));
        let j = m.lift_jacobian(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0]));
    }

    #[test]
    fn polynomial_counts_include_bias() {
        assert_eq!(LiftMap::polynomial(2, 3, true).unwrap().lifted_dim(), 10);
        assert_eq!(LiftMap::polynomial(2, 4, true).unwrap().lifted_dim(), 15);
        assert_eq!(LiftMap::polynomial(2, 3, false).unwrap().lifted_dim(), 9);
    }

    #[test]
    fn polynomial_order_is_graded_lex() {
        let m = LiftMap::polynomial(2, 3, true).unwrap();
        let g = m.lift(&v(&[2.0, 3.0])).unwrap();
        let expect = [2.0, 3.0, 1.0, 4.0, 6.0, 9.0, 8.0, 12.0, 18.0, 27.0];
        assert_eq!(g.as_slice(), &expect);
    }

    #[test]
    fn jacobian_at_origin_has_identity_top_and_vanishing_monomials() {
        let m = LiftMap::polynomial(2, 4, true).unwrap();
        let j = m.lift_jacobian(&v(&[0.0, 0.0])).unwrap();
        assert_eq!(j.rows(0, 2).into_owned(), DMatrix::identity(2, 2));
        assert!(j.rows(2, m.feature_count()).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn rbf_counts_and_grid_placement() {
        let (c5, w5) = rbf_grid_centers(5, &[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(c5.len(), 5);
        assert_eq!(c5[0], vec![0.0, 0.0]);
        assert!((w5 - 2.0).abs() < 1e-12);
        let (c9, _) = rbf_grid_centers(9, &[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(LiftMap::rbf(c5, w5).unwrap().lifted_dim(), 7);
        assert_eq!(LiftMap::rbf(c9, 2.0).unwrap().lifted_dim(), 11);
    }

    #[test]
    fn manifold_membership() {
        let m = LiftMap::slow_manifold();
        let g = m.lift(&v(&[0.3, -1.2])).unwrap();
        assert!(m.is_on_manifold(&g, 1e-12));
        assert!(!m.is_on_manifold(&v(&[1.0, 0.0, 2.0]), 1e-6));
        assert!(m.is_on_manifold(&v(&[1.0, 0.0, 1.0 + 5e-7]), 1e-6));
    }

    #[test]
    fn non_finite_feature_is_named() {
        let bad = CustomFeature {
            name: "log".into(),
            value: Arc::new(|x: &[f64]| x[0].ln()),
            gradient: Arc::new(|x: &[f64]| vec![1.0 / x[0]]),
        };
        let m = LiftMap::custom(1, vec![bad]);
        let e = m.lift(&v(&[-1.0])).unwrap_err();
        assert!(e.to_string().contains("psi_1 (log)"), "{e}");
    }

    #[test]
    fn lifted_slow_manifold_dynamics() {
        let sys = crate::systems::make_demo_system("slow_manifold", &BTreeMap::new()).unwrap();
        let m = LiftMap::slow_manifold();
        let fg = lifted_dynamics(&m, &sys).unwrap();
        let (mu, lambda) = (-0.05, -1.0);
        let g = m.lift(&v(&[0.7, -0.4])).unwrap();
        let z = v(&[0.0, 0.0]);
        let f = fg.eval_dynamics(&g, &z, &z).unwrap();
        let expect = v(&[mu * g[0], lambda * (g[1] - g[2]), 2.0 * mu * g[2]]);
        assert!((f - expect).amax() < 1e-14);

        let g = v(&[1.0, 0.0, 1.0]);
        let drift = fg.eval_dynamics(&g, &z, &z).unwrap();
        let with_u = fg.eval_dynamics(&g, &v(&[1.0, 0.0]), &z).unwrap();
        assert!((with_u - drift - v(&[1.0, 0.0, 2.0])).amax() < 1e-14);
    }

    #[test]
    fn zero_field_lifts_to_zero() {
        let sys = AffineSystem::new(
            "still",
            2,
            1,
            0,
            Arc::new(|_x: &DVector<f64>| DVector::zeros(2)),
            Arc::new(|_x: &DVector<f64>| DMatrix::zeros(2, 1)),
            Arc::new(|_x: &DVector<f64>| DMatrix::zeros(2, 0)),
        )
        .unwrap();
        let m = LiftMap::polynomial(2, 3, true).unwrap();
        let fg = lifted_dynamics(&m, &sys).unwrap();
        let f = fg.eval_dynamics(&DVector::from_element(10, 0.4), &v(&[1.0]), &v(&[])).unwrap();
        assert!(f.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = LiftSpec::Polynomial { degree: 3, bias: true };
        let s = toml::to_string(&spec).unwrap();
        let back: LiftSpec = toml::from_str(&s).unwrap();
        assert_eq!(spec, back);
        let m = LiftMap::from_spec(&LiftSpec::RbfGrid { count: 9, lo: vec![-2.0, -2.0], hi: vec![2.0, 2.0] }, 2).unwrap();
        assert!(matches!(m.spec(), Some(LiftSpec::Rbf { .. })));
    }

    fn lifts() -> Vec<LiftMap> {
        let (c, w) = rbf_grid_centers(9, &[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        vec![
            LiftMap::slow_manifold(),
            LiftMap::polynomial(2, 3, true).unwrap(),
            LiftMap::polynomial(2, 4, true).unwrap(),
            LiftMap::rbf(c, w).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn projection_inverts_lift(x1 in -3.0..3.0f64, x2 in -3.0..3.0f64) {
            for m in lifts() {
                let x = v(&[x1, x2]);
                let g = m.lift(&x).unwrap();
                prop_assert_eq!(m.project(&g), x.clone());
                prop_assert_eq!(m.projection_matrix() * &g, x);
            }
        }

        #[test]
        fn jacobian_matches_central_differences(x1 in -2.0..2.0f64, x2 in -2.0..2.0f64) {
            let h = 1e-6;
            for m in lifts() {
                let x = v(&[x1, x2]);
                let j = m.lift_jacobian(&x).unwrap();
                for c in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (m.lift(&xp).unwrap() - m.lift(&xm).unwrap()) / (2.0 * h);
                    for r in 0..m.lifted_dim() {
                        let scale = j[(r, c)].abs().max(1.0);
                        prop_assert!((fd[r] - j[(r, c)]).abs() / scale <= 1e-5,
                            "row {} col {}: fd {} vs {}", r, c, fd[r], j[(r, c)]);
                    }
                }
            }
        }
    }
}
