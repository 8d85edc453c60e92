//! Ellipsoidal targets, their terminal costs and Fenchel conjugates, and the
//! inner/outer augmented targets used by the lifted games.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lifting::LiftMap;

pub const DEFAULT_AUDIT_SAMPLES: usize = 10_000;

/// `{y : (y - c)^T Q (y - c) <= r}` with cost `J(y) = (y - c)^T Q (y - c) - r`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTarget {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    shape_inv: DMatrix<f64>,
    level: f64,
}

impl QuadTarget {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, level: f64) -> Result<Self> {
        let n = center.len();
        check_dim("target shape rows", n, shape.nrows())?;
        check_dim("target shape cols", n, shape.ncols())?;
        if !(level > 0.0) || !level.is_finite() {
            return Err(Error::InvalidTarget(format!("level must be positive, got {level}")));
        }
        if (&shape - shape.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidTarget("shape matrix is not symmetric".into()));
        }
        let min_eig = shape.clone().symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "shape matrix is not positive definite (smallest eigenvalue {min_eig})"
            )));
        }
        let shape_inv = shape
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidTarget("shape matrix Cholesky failed".into()))?
            .inverse();
        Ok(QuadTarget {
            center,
            shape,
            shape_inv,
            level,
        })
    }

    pub fn from_diag(center: DVector<f64>, diag: &[f64], level: f64) -> Result<Self> {
        check_dim("target diagonal", center.len(), diag.len())?;
        QuadTarget::new(center, DMatrix::from_diagonal(&DVector::from_row_slice(diag)), level)
    }

    /// Unit ball centered at the origin.
    pub fn unit_ball(dim: usize) -> Self {
        QuadTarget::new(DVector::zeros(dim), DMatrix::identity(dim, dim), 1.0)
            .expect("identity shape is valid")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }
    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }
    pub fn shape_inv(&self) -> &DMatrix<f64> {
        &self.shape_inv
    }
    pub fn level(&self) -> f64 {
        self.level
    }

    /// `J(y) = (y - c)^T Q (y - c) - r`.
    pub fn eval_j(&self, y: &DVector<f64>) -> f64 {
        let e = y - &self.center;
        e.dot(&(&self.shape * &e)) - self.level
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        self.eval_j(y) <= 0.0
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        (&self.shape * (y - &self.center)) * 2.0
    }

    /// `J*(p) = p.c + p^T Q^{-1} p / 4 + r`.
    pub fn conjugate(&self, p: &DVector<f64>) -> f64 {
        p.dot(&self.center) + 0.25 * p.dot(&(&self.shape_inv * p)) + self.level
    }

    /// Gradient of the conjugate, `c + Q^{-1} p / 2`.
    pub fn conjugate_gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.center + (&self.shape_inv * p) * 0.5
    }

    /// Axis-aligned bounding box of the ellipsoid.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let half: Vec<f64> = (0..self.dim())
            .map(|i| (self.level * self.shape_inv[(i, i)]).sqrt())
            .collect();
        (
            self.center.iter().zip(&half).map(|(c, h)| c - h).collect(),
            self.center.iter().zip(&half).map(|(c, h)| c + h).collect(),
        )
    }

    /// Uniform direction mapped onto the boundary ellipsoid.
    fn boundary_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
        let z = &z / z.norm().max(f64::MIN_POSITIVE);
        let l = self.shape.clone().cholesky().expect("validated SPD").l();
        let offset = l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("nonsingular factor")
            * self.level.sqrt();
        &self.center + offset
    }
}

/// Serializable target: diagonal or full shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub center: Vec<f64>,
    #[serde(default)]
    pub q_diag: Option<Vec<f64>>,
    /// Row-major full shape matrix.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    pub level: f64,
}

impl TargetSpec {
    pub fn build(&self) -> Result<QuadTarget> {
        let n = self.center.len();
        let c = DVector::from_row_slice(&self.center);
        match (&self.q_diag, &self.q) {
            (Some(d), None) => QuadTarget::from_diag(c, d, self.level),
            (None, Some(q)) => {
                if q.len() != n * n {
                    return Err(Error::InvalidTarget(format!("full shape needs {} entries", n * n)));
                }
                QuadTarget::new(c, DMatrix::from_row_slice(n, n, q), self.level)
            }
            (None, None) => QuadTarget::new(c, DMatrix::identity(n, n), self.level),
            (Some(_), Some(_)) => Err(Error::InvalidTarget("give either q_diag or q, not both".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    /// Bounded subset of the extruded target, centered on the lifted center.
    ReachInner,
    /// Bounded superset of the lifted target, centered at the origin.
    AvoidOuter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    pub samples: usize,
    pub seed: u64,
    /// For outer targets: raise the level to the smallest sampled-valid
    /// level (with `margin`) instead of failing.
    pub auto_level: bool,
    pub margin: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            samples: DEFAULT_AUDIT_SAMPLES,
            seed: 0,
            auto_level: false,
            margin: 0.01,
        }
    }
}

/// Inner/outer augmented targets paired with the base target.
#[derive(Debug, Clone)]
pub struct AugTargetPair {
    pub inner: Option<QuadTarget>,
    pub outer: Option<QuadTarget>,
    pub base: QuadTarget,
    pub eta: f64,
    /// Level requested by the caller; differs from the used level only when
    /// `auto_level` raised it.
    pub requested_level: f64,
}

impl AugTargetPair {
    /// The target the game with `mode` is played on.
    pub fn game_target(&self) -> &QuadTarget {
        self.inner
            .as_ref()
            .or(self.outer.as_ref())
            .expect("one of inner/outer is always set")
    }
}

/// Samples over a box twice the target's extent plus its boundary.
fn audit_points(base: &QuadTarget, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, hi) = base.bounding_box();
    let c = base.center();
    let mut pts = Vec::with_capacity(n);
    for k in 0..n {
        if k % 4 == 3 {
            pts.push(base.boundary_sample(&mut rng));
        } else {
            pts.push(DVector::from_fn(base.dim(), |i, _| {
                let half = hi[i] - c[i];
                c[i] + 2.0 * half * (2.0 * rng.random::<f64>() - 1.0)
            }));
        }
    }
    pts
}

/// Builds the augmented target with shape `diag(Q_base, eta I)` and validates
/// it on manifold samples.
///
/// `ReachInner` centers on `Psi(c)` and must satisfy
/// `inner.J(Psi(x)) <= 0 => base.J(x) <= 0`; `AvoidOuter` centers at the
/// origin and must satisfy `base.J(x) <= 0 => outer.J(Psi(x)) <= 0`.
pub fn make_aug_targets(
    base: &QuadTarget,
    m: &LiftMap,
    eta: f64,
    mode: AugMode,
    level: f64,
    audit: &AuditOptions,
) -> Result<AugTargetPair> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    check_dim("target vs lift", m.state_dim(), base.dim())?;
    let (n, nk) = (m.state_dim(), m.lifted_dim());
    let mut shape = DMatrix::zeros(nk, nk);
    shape.view_mut((0, 0), (n, n)).copy_from(base.shape());
    for i in n..nk {
        shape[(i, i)] = eta;
    }
    let pts = audit_points(base, audit.samples, audit.seed);
    let lifted: Vec<DVector<f64>> = pts.iter().map(|x| m.lift(x)).collect::<Result<_>>()?;
    match mode {
        AugMode::ReachInner => {
            let inner = QuadTarget::new(m.lift(base.center())?, shape, level)?;
            for (x, g) in pts.iter().zip(&lifted) {
                if inner.eval_j(g) <= 0.0 && base.eval_j(x) > 0.0 {
                    return Err(Error::InvalidTarget(format!(
                        "inner target contains lifted point of x = {:?} outside the base target",
                        x.as_slice()
                    )));
                }
            }
            Ok(AugTargetPair {
                inner: Some(inner),
                outer: None,
                base: base.clone(),
                eta,
                requested_level: level,
            })
        }
        AugMode::AvoidOuter => {
            let mut used = level;
            if audit.auto_level {
                let need = pts
                    .iter()
                    .zip(&lifted)
                    .filter(|(x, _)| base.eval_j(x) <= 0.0)
                    .map(|(_, g)| g.dot(&(&shape * g)))
                    .fold(0.0, f64::max);
                if need > used {
                    used = need * (1.0 + audit.margin);
                }
            }
            let outer = QuadTarget::new(DVector::zeros(nk), shape, used)?;
            for (x, g) in pts.iter().zip(&lifted) {
                if base.eval_j(x) <= 0.0 && outer.eval_j(g) > 0.0 {
                    return Err(Error::InvalidTarget(format!(
                        "outer target misses lifted point of x = {:?} inside the base target \
                         (J_outer = {:.4e}); lower eta or raise the level",
                        x.as_slice(),
                        outer.eval_j(g)
                    )));
                }
            }
            Ok(AugTargetPair {
                inner: None,
                outer: Some(outer),
                base: base.clone(),
                eta,
                requested_level: level,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn slow_target() -> QuadTarget {
        QuadTarget::from_diag(v(&[0.0, 1.25]), &[1.0, 1.0], 1.0).unwrap()
    }

    /// Brute-force `sup_y p.y - J(y)` on a dense 2D grid.
    fn grid_conjugate(t: &QuadTarget, p: &DVector<f64>, half: f64, n: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let y = v(&[
                    t.center()[0] - half + 2.0 * half * i as f64 / n as f64,
                    t.center()[1] - half + 2.0 * half * j as f64 / n as f64,
                ]);
                best = best.max(p.dot(&y) - t.eval_j(&y));
            }
        }
        best
    }

    #[test]
    fn cost_values() {
        assert_eq!(QuadTarget::unit_ball(2).eval_j(&v(&[0.0, 0.0])), -1.0);
        assert!(slow_target().eval_j(&v(&[0.0, 2.25])).abs() < 1e-15);
        let outer = QuadTarget::from_diag(DVector::zeros(10), &[1.0, 1.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0], 10.0 / 9.0).unwrap();
        assert!((outer.eval_j(&DVector::zeros(10)) + 10.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn conjugate_closed_form_cases() {
        let b = QuadTarget::unit_ball(2);
        assert_eq!(b.conjugate(&v(&[0.0, 0.0])), 1.0);
        assert!((b.conjugate(&v(&[2.0, 0.0])) - 2.0).abs() < 1e-15);
        assert!((grid_conjugate(&b, &v(&[2.0, 0.0]), 3.0, 600) - 2.0).abs() < 1e-3);

        let shifted = QuadTarget::unit_ball(2);
        let moved = QuadTarget::new(v(&[0.5, -2.0]), DMatrix::identity(2, 2), 1.0).unwrap();
        let p = v(&[1.5, 0.3]);
        assert!((moved.conjugate(&p) - (p.dot(moved.center()) + shifted.conjugate(&p))).abs() < 1e-14);
    }

    #[test]
    fn invalid_targets_rejected() {
        assert!(QuadTarget::from_diag(v(&[0.0]), &[-1.0], 1.0).is_err());
        assert!(QuadTarget::from_diag(v(&[0.0]), &[1.0], 0.0).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadTarget::new(v(&[0.0, 0.0]), asym, 1.0).is_err());
    }

    #[test]
    fn slow_manifold_inner_target_is_accepted_and_audited() {
        let base = slow_target();
        let lift = LiftMap::slow_manifold();
        let pair = make_aug_targets(&base, &lift, 1.0 / 15.0, AugMode::ReachInner, 1.0, &AuditOptions::default()).unwrap();
        let inner = pair.inner.as_ref().unwrap();
        assert_eq!(inner.center().as_slice(), &[0.0, 1.25, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let x = v(&[rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.5)]);
            if inner.contains(&lift.lift(&x).unwrap()) {
                assert!(base.contains(&x));
            }
        }
    }

    #[test]
    fn literal_outer_target_fails_and_auto_level_repairs_it() {
        let base = QuadTarget::unit_ball(2);
        let lift = LiftMap::polynomial(2, 3, true).unwrap();
        let strict = make_aug_targets(&base, &lift, 10.0, AugMode::AvoidOuter, 10.0 / 9.0, &AuditOptions::default());
        assert!(matches!(strict, Err(Error::InvalidTarget(_))));
        // x = (1, 0) is in the target but its lift has cost 1 + 10 (1 + 1 + 1) - 10/9 > 0
        let g = lift.lift(&v(&[1.0, 0.0])).unwrap();
        assert!(g.norm_squared() > 1.0);

        let audit = AuditOptions { auto_level: true, ..Default::default() };
        let pair = make_aug_targets(&base, &lift, 10.0, AugMode::AvoidOuter, 10.0 / 9.0, &audit).unwrap();
        let outer = pair.outer.unwrap();
        assert!(outer.level() > 10.0 / 9.0);
        assert_eq!(pair.requested_level, 10.0 / 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x = base.boundary_sample(&mut rng) * rng.random::<f64>();
            assert!(outer.contains(&lift.lift(&x).unwrap()));
        }
    }

    #[test]
    fn zero_eta_rejected() {
        let r = make_aug_targets(&slow_target(), &LiftMap::slow_manifold(), 0.0, AugMode::ReachInner, 1.0, &AuditOptions::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn inner_target_shrinks_with_eta() {
        let base = slow_target();
        let lift = LiftMap::slow_manifold();
        let a = make_aug_targets(&base, &lift, 0.05, AugMode::ReachInner, 1.0, &AuditOptions::default()).unwrap();
        let b = make_aug_targets(&base, &lift, 0.5, AugMode::ReachInner, 1.0, &AuditOptions::default()).unwrap();
        let g = v(&[0.3, 1.0, 2.0]);
        assert!(b.inner.unwrap().eval_j(&g) >= a.inner.unwrap().eval_j(&g));
    }

    #[test]
    fn spec_builds_diag_and_full() {
        let s = TargetSpec { center: vec![0.0, 1.25], q_diag: Some(vec![1.0, 1.0]), q: None, level: 1.0 };
        assert_eq!(s.build().unwrap(), slow_target());
        let f = TargetSpec { center: vec![0.0, 0.0], q_diag: None, q: Some(vec![2.0, 0.0, 0.0, 1.0]), level: 1.0 };
        assert_eq!(f.build().unwrap().shape()[(0, 0)], 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn conjugate_matches_grid_maximization(p1 in -3.0..3.0f64, p2 in -3.0..3.0f64) {
            let t = QuadTarget::new(v(&[0.3, -0.4]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), 0.8).unwrap();
            let p = v(&[p1, p2]);
            let exact = t.conjugate(&p);
            let brute = grid_conjugate(&t, &p, 4.0, 800);
            prop_assert!((exact - brute).abs() < 1e-3, "{} vs {}", exact, brute);
        }

        #[test]
        fn biconjugate_recovers_cost(y1 in -1.0..1.0f64, y2 in -1.0..1.0f64) {
            let t = QuadTarget::new(v(&[0.3, -0.4]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]), 0.8).unwrap();
            let y = v(&[y1, y2]);
            // J**(y) = sup_p p.y - J*(p) on a grid of costates
            let mut best = f64::NEG_INFINITY;
            let n = 400;
            for i in 0..=n {
                for j in 0..=n {
                    let p = v(&[-12.0 + 24.0 * i as f64 / n as f64, -12.0 + 24.0 * j as f64 / n as f64]);
                    best = best.max(p.dot(&y) - t.conjugate(&p));
                }
            }
            prop_assert!((best - t.eval_j(&y)).abs() < 1e-3 * t.eval_j(&y).abs().max(1.0) * 2.0,
                "{} vs {}", best, t.eval_j(&y));
        }
    }
}
