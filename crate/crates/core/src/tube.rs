//! Box over-approximation of the backward feasible tube and the model error
//! bound over its lifted image.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hopf::{ErrorProfile, ErrorShape};
use crate::interval::Interval;
use crate::io::{fmt_float, Table};
use crate::lifting::LiftMap;
use crate::models::LiftedLinearModel;
use crate::systems::{AffineSystem, BallNorm, InputBall};

pub const DEFAULT_DIAMETER_CAP: f64 = 1e3;
pub const DEFAULT_INFLATION: f64 = 0.1;

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!("malformed box {lo:?} .. {hi:?}")));
        }
        Ok(AxisBox { lo, hi })
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        AxisBox {
            lo: iv.iter().map(|i| i.lo()).collect(),
            hi: iv.iter().map(|i| i.hi()).collect(),
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| Interval::new(*a, *b)).collect()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn contains_box(&self, other: &AxisBox) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    pub fn hull(&self, other: &AxisBox) -> AxisBox {
        AxisBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }

    /// Largest side length.
    pub fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).fold(0.0, f64::max)
    }
}

/// Per-time boxes from `T` (index 0) back to `t`, plus the a-priori
/// enclosures valid over each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTube {
    pub times: Vec<f64>,
    pub boxes: Vec<AxisBox>,
    /// `segments[k]` encloses every feasible state on `[times[k+1], times[k]]`.
    pub segments: Vec<AxisBox>,
    pub step: f64,
    pub method: String,
}

impl BoxTube {
    pub fn union_box(&self) -> AxisBox {
        self.segments
            .iter()
            .chain(self.boxes.iter())
            .skip(1)
            .fold(self.boxes[0].clone(), |acc, b| acc.hull(b))
    }

    /// Node box at a stored time (matched within `1e-9`).
    pub fn box_at(&self, time: f64) -> Option<&AxisBox> {
        self.times.iter().position(|s| (s - time).abs() < 1e-9).map(|k| &self.boxes[k])
    }

    /// The tube restricted to times `>= t`.
    pub fn truncated(&self, t: f64) -> BoxTube {
        let keep = self.times.iter().take_while(|s| **s >= t - 1e-9).count().max(1);
        BoxTube {
            times: self.times[..keep].to_vec(),
            boxes: self.boxes[..keep].to_vec(),
            segments: self.segments[..keep - 1].to_vec(),
            step: self.step,
            method: self.method.clone(),
        }
    }

    pub fn to_table(&self) -> Table {
        let n = self.boxes[0].dim();
        let mut header = vec!["time".to_string()];
        header.extend((1..=n).map(|i| format!("lo_{i}")));
        header.extend((1..=n).map(|i| format!("hi_{i}")));
        let mut t = Table::new(header);
        for (s, b) in self.times.iter().zip(&self.boxes) {
            let mut row = vec![*s];
            row.extend(&b.lo);
            row.extend(&b.hi);
            t.push_floats(&row);
        }
        t
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

fn widened(i: &Interval, r: f64) -> Interval {
    Interval::new(i.lo() - r, i.hi() + r)
}

fn shifted(base: &[Interval], field: &[Interval], span: Interval) -> Vec<Interval> {
    base.iter().zip(field).map(|(b, f)| *b - span * *f).collect()
}

/// A-priori enclosure of every backward state reachable from `cur` within
/// `dt`. The flag is false when no enclosure was found below the cap.
fn apriori(
    sys: &AffineSystem,
    cur: &[Interval],
    dt: f64,
    lip: f64,
    diameter_cap: f64,
) -> Result<(Vec<Interval>, bool)> {
    let span = Interval::new(0.0, dt);
    let grow = (lip * dt).exp() - 1.0;
    let mut cand: Vec<Interval> = shifted(cur, &sys.field_enclosure(cur)?, span)
        .iter()
        .map(|i| widened(i, grow * i.width() + 1e-12 * (1.0 + i.mag())))
        .collect();
    for _ in 0..40 {
        let fb = sys.field_enclosure(&cand)?;
        let img = shifted(cur, &fb, span);
        if cand.iter().zip(&img).all(|(c, i)| c.contains_interval(i)) {
            return Ok((cand, true));
        }
        cand = cand
            .iter()
            .zip(&img)
            .map(|(c, i)| {
                let hl = c.hull(i);
                widened(&hl, 0.1 * hl.width() + 1e-9 * (1.0 + hl.mag()))
            })
            .collect();
        if cand.iter().any(|c| !c.is_finite() || c.width() > diameter_cap) {
            break;
        }
    }
    Ok((cand, false))
}

/// Backward interval Euler with an a-priori enclosure per step.
///
/// For each step the candidate `B~ = box + [0,h] (-F(box))`, widened by the
/// Lipschitz growth factor, is accepted once it contains
/// `box + [0,h] (-F(B~))`; every feasible backward state then stays in `B~`
/// over the step and the next box is `box + h (-F(B~))`.
pub fn backward_tube(
    sys: &AffineSystem,
    target_box: &AxisBox,
    t: f64,
    t_final: f64,
    h: f64,
    diameter_cap: f64,
) -> Result<BoxTube> {
    check_dim("target box", sys.state_dim(), target_box.dim())?;
    if !(h > 0.0) || !(t < t_final) {
        return Err(Error::InvalidArgument(format!(
            "tube needs h > 0 and t < T (h = {h}, t = {t}, T = {t_final})"
        )));
    }
    let lip = sys.lipschitz().unwrap_or(1.0);
    let times: Vec<f64> = crate::systems::step_times(t, t_final, h).into_iter().rev().collect();
    let mut boxes = vec![target_box.clone()];
    let mut segments = Vec::with_capacity(times.len() - 1);
    let mut cur = target_box.intervals();
    for w in times.windows(2) {
        let dt = w[0] - w[1];
        let (cand, accepted) = apriori(sys, &cur, dt, lip, diameter_cap)?;
        let seg = AxisBox::from_intervals(&cand);
        if !accepted || seg.diameter() > diameter_cap {
            return Err(Error::TubeBlowUp {
                time: w[1],
                diameter: seg.diameter(),
                cap: diameter_cap,
            });
        }
        let fb = sys.field_enclosure(&cand)?;
        cur = shifted(&cur, &fb, Interval::point(dt));
        let next = AxisBox::from_intervals(&cur);
        if next.diameter() > diameter_cap || cur.iter().any(|c| !c.is_finite()) {
            return Err(Error::TubeBlowUp {
                time: w[1],
                diameter: next.diameter(),
                cap: diameter_cap,
            });
        }
        segments.push(seg);
        boxes.push(next);
    }
    Ok(BoxTube {
        times,
        boxes,
        segments,
        step: h,
        method: "interval_euler_apriori".into(),
    })
}

/// Largest dense paving grid, in cells.
pub const DEFAULT_MAX_CELLS: usize = 20_000_000;

/// Settings for [`backward_tube_paved`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paving {
    /// Side length of the grid cells.
    pub cell: f64,
    /// Euler steps each cell takes before its image is re-covered by cells.
    pub substeps: usize,
}

impl Default for Paving {
    fn default() -> Self {
        Paving { cell: 0.01, substeps: 25 }
    }
}

fn cell_range(lo: f64, hi: f64, cell: f64) -> (i64, i64) {
    ((lo / cell).floor() as i64, (hi / cell).floor() as i64)
}

/// Dense occupancy grid over the integer cell range `lo..=hi`.
struct CellGrid {
    lo: Vec<i64>,
    extent: Vec<usize>,
    occupied: Vec<bool>,
}

impl CellGrid {
    fn covering(hull: &[(i64, i64)], max_cells: usize) -> Option<Self> {
        let extent: Vec<usize> = hull.iter().map(|(a, b)| (b - a + 1) as usize).collect();
        let total = extent.iter().try_fold(1usize, |acc, e| acc.checked_mul(*e))?;
        if total > max_cells {
            return None;
        }
        Some(CellGrid {
            lo: hull.iter().map(|r| r.0).collect(),
            extent,
            occupied: vec![false; total],
        })
    }

    fn mark(&mut self, b: &[Interval], cell: f64) {
        let ranges: Vec<(usize, usize)> = b
            .iter()
            .zip(&self.lo)
            .map(|(i, lo)| {
                let (a, z) = cell_range(i.lo(), i.hi(), cell);
                ((a - lo) as usize, (z - lo) as usize)
            })
            .collect();
        let mut key: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            let flat = key.iter().zip(&self.extent).fold(0, |acc, (k, e)| acc * e + k);
            self.occupied[flat] = true;
            let mut d = key.len();
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                if key[d] < ranges[d].1 {
                    key[d] += 1;
                    break;
                }
                key[d] = ranges[d].0;
            }
        }
    }

    fn cells(&self, cell: f64) -> Vec<Vec<Interval>> {
        let n = self.extent.len();
        let mut out = Vec::new();
        for (flat, _) in self.occupied.iter().enumerate().filter(|(_, o)| **o) {
            let mut rem = flat;
            let mut iv = vec![Interval::point(0.0); n];
            for d in (0..n).rev() {
                let k = (rem % self.extent[d]) as i64 + self.lo[d];
                rem /= self.extent[d];
                iv[d] = Interval::new(k as f64 * cell, (k + 1) as f64 * cell);
            }
            out.push(iv);
        }
        out
    }
}

fn hull_of(boxes: &[Vec<Interval>]) -> AxisBox {
    let n = boxes[0].len();
    AxisBox {
        lo: (0..n).map(|d| boxes.iter().map(|b| b[d].lo()).fold(f64::INFINITY, f64::min)).collect(),
        hi: (0..n).map(|d| boxes.iter().map(|b| b[d].hi()).fold(f64::NEG_INFINITY, f64::max)).collect(),
    }
}

/// Backward tube on a paving of grid cells.
///
/// Every cell takes `substeps` steps of the same a-priori scheme as
/// [`backward_tube`]; the images are then re-covered by grid cells. Keeping
/// the boxes small confines the interval wrapping that makes a single box
/// blow up on strongly nonlinear fields. Node and segment boxes are hulls
/// over the cells.
pub fn backward_tube_paved(
    sys: &AffineSystem,
    target_box: &AxisBox,
    t: f64,
    t_final: f64,
    h: f64,
    paving: Paving,
    diameter_cap: f64,
) -> Result<BoxTube> {
    check_dim("target box", sys.state_dim(), target_box.dim())?;
    if !(h > 0.0) || !(t < t_final) || !(paving.cell > 0.0) || paving.substeps == 0 {
        return Err(Error::InvalidArgument(format!(
            "paved tube needs h > 0, cell > 0, substeps >= 1 and t < T \
             (h = {h}, cell = {}, substeps = {}, t = {t}, T = {t_final})",
            paving.cell, paving.substeps
        )));
    }
    let cell = paving.cell;
    let lip = sys.lipschitz().unwrap_or(1.0);
    let times: Vec<f64> = crate::systems::step_times(t, t_final, h).into_iter().rev().collect();
    let blow = |time: f64, diameter: f64| Error::TubeBlowUp {
        time,
        diameter,
        cap: diameter_cap,
    };
    let tb = target_box.intervals();
    let hull: Vec<(i64, i64)> = tb.iter().map(|i| cell_range(i.lo(), i.hi(), cell)).collect();
    let mut grid = CellGrid::covering(&hull, DEFAULT_MAX_CELLS).ok_or_else(|| blow(t_final, target_box.diameter()))?;
    grid.mark(&tb, cell);
    let mut cells = grid.cells(cell);

    let mut boxes = vec![target_box.clone()];
    let mut segments = Vec::with_capacity(times.len() - 1);
    for chunk in times.windows(2).collect::<Vec<_>>().chunks(paving.substeps) {
        let dts: Vec<f64> = chunk.iter().map(|w| w[0] - w[1]).collect();
        // Per cell: a-priori box and end box of every sub-step.
        let traces: Vec<Vec<(Vec<Interval>, Vec<Interval>)>> = cells
            .par_iter()
            .map(|c0| {
                let mut cur = c0.clone();
                let mut out = Vec::with_capacity(dts.len());
                for (k, dt) in dts.iter().enumerate() {
                    let (cand, ok) = apriori(sys, &cur, *dt, lip, diameter_cap)?;
                    if !ok {
                        return Err(blow(chunk[k][1], AxisBox::from_intervals(&cand).diameter()));
                    }
                    cur = shifted(&cur, &sys.field_enclosure(&cand)?, Interval::point(*dt));
                    if cur.iter().any(|c| !c.is_finite() || c.width() > diameter_cap) {
                        return Err(blow(chunk[k][1], AxisBox::from_intervals(&cur).diameter()));
                    }
                    out.push((cand, cur.clone()));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for k in 0..dts.len() {
            let segs: Vec<Vec<Interval>> = traces.iter().map(|tr| tr[k].0.clone()).collect();
            let ends: Vec<Vec<Interval>> = traces.iter().map(|tr| tr[k].1.clone()).collect();
            let (seg, node) = (hull_of(&segs), hull_of(&ends));
            if seg.diameter() > diameter_cap || node.diameter() > diameter_cap {
                return Err(blow(chunk[k][1], seg.diameter().max(node.diameter())));
            }
            segments.push(seg);
            boxes.push(node);
        }
        let last = boxes.last().expect("node box").intervals();
        let hull: Vec<(i64, i64)> = last.iter().map(|i| cell_range(i.lo(), i.hi(), cell)).collect();
        let time = chunk[chunk.len() - 1][1];
        let mut grid = CellGrid::covering(&hull, DEFAULT_MAX_CELLS)
            .ok_or_else(|| blow(time, boxes.last().map_or(0.0, |b| b.diameter())))?;
        for tr in &traces {
            grid.mark(&tr[dts.len() - 1].1, cell);
        }
        cells = grid.cells(cell);
    }
    Ok(BoxTube {
        times,
        boxes,
        segments,
        step: h,
        method: format!("paved_interval_euler(cell={cell}, substeps={})", paving.substeps),
    })
}

/// Model error bound over the lifted tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    /// Grid maximum times `1 + inflation`.
    pub delta_star: f64,
    pub raw_max: f64,
    pub inflation: f64,
    pub grid_per_dim: usize,
    pub domain: AxisBox,
    /// Per lifted coordinate, grid maximum of the coordinate error bound.
    pub coordinate_max: Vec<f64>,
    /// `(x, bound)` at every grid point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<(Vec<f64>, f64)>,
}

/// `sup ||B v||_2` over the ball.
fn gain(b: &DMatrix<f64>, ball: &InputBall) -> f64 {
    if b.ncols() == 0 || ball.radius == 0.0 {
        return 0.0;
    }
    match ball.norm {
        BallNorm::Euclidean => ball.radius * b.singular_values().max(),
        BallNorm::Box => ball.radius * b.column_iter().map(|c| c.norm()).sum::<f64>(),
    }
}

/// Row-wise version of [`gain`]: `sup |b_i . v|`.
fn row_gain(b: &DMatrix<f64>, i: usize, ball: &InputBall) -> f64 {
    if b.ncols() == 0 {
        return 0.0;
    }
    ball.support(b.row(i).transpose().as_slice())
}

/// Upper bound of `||f_G(Psi(x), u, d) - kappa(Psi(x), u, d)||` over the
/// input balls, and its per-coordinate counterpart.
pub fn pointwise_error_bound(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    x: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let g = m.lift(x)?;
    let jac = m.lift_jacobian(x)?;
    let a = &jac * sys.drift(x) - &model.k * &g;
    let b1 = &jac * sys.control_matrix(x) - &model.l1;
    let b2 = &jac * sys.disturbance_matrix(x) - &model.l2;
    let total = a.norm() + gain(&b1, sys.u_ball()) + gain(&b2, sys.d_ball());
    let coords = (0..g.len())
        .map(|i| a[i].abs() + row_gain(&b1, i, sys.u_ball()) + row_gain(&b2, i, sys.d_ball()))
        .collect();
    if !total.is_finite() {
        return Err(Error::Evaluation(format!("error bound at x = {:?}", x.as_slice())));
    }
    Ok((total, coords))
}

/// Uniform grid with `per_dim` nodes per axis, first axis fastest.
pub fn box_grid(domain: &AxisBox, per_dim: usize) -> Vec<DVector<f64>> {
    let n = domain.dim();
    let total = per_dim.pow(n as u32);
    (0..total)
        .map(|mut k| {
            DVector::from_fn(n, |i, _| {
                let j = k % per_dim;
                k /= per_dim;
                let (a, b) = (domain.lo[i], domain.hi[i]);
                a + (b - a) * j as f64 / (per_dim - 1) as f64
            })
        })
        .collect()
}

/// Grid maximum of the pointwise bound over the tube's union box, scaled by
/// `1 + inflation`.
pub fn error_bound_delta(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    tube: &BoxTube,
    grid_per_dim: usize,
    inflation: f64,
) -> Result<ErrorBound> {
    if tube.boxes.is_empty() {
        return Err(Error::InvalidArgument("empty tube".into()));
    }
    error_bound_on_box(model, m, sys, &tube.union_box(), grid_per_dim, inflation)
}

pub fn error_bound_on_box(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    domain: &AxisBox,
    grid_per_dim: usize,
    inflation: f64,
) -> Result<ErrorBound> {
    if grid_per_dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "error grid needs at least 2 points per axis, got {grid_per_dim}"
        )));
    }
    if !(inflation >= 0.0) {
        return Err(Error::InvalidArgument(format!("inflation must be nonnegative, got {inflation}")));
    }
    check_dim("error bound domain", sys.state_dim(), domain.dim())?;
    check_dim("model vs lift", m.lifted_dim(), model.lifted_dim())?;
    let pts = box_grid(domain, grid_per_dim);
    let vals: Vec<(f64, Vec<f64>)> = pts
        .par_iter()
        .map(|x| pointwise_error_bound(model, m, sys, x))
        .collect::<Result<_>>()?;
    let raw_max = vals.iter().map(|v| v.0).fold(0.0, f64::max);
    let mut coordinate_max = vec![0.0; model.lifted_dim()];
    for (_, c) in &vals {
        for (acc, v) in coordinate_max.iter_mut().zip(c) {
            *acc = f64::max(*acc, *v);
        }
    }
    Ok(ErrorBound {
        delta_star: raw_max * (1.0 + inflation),
        raw_max,
        inflation,
        grid_per_dim,
        domain: domain.clone(),
        coordinate_max,
        diagnostics: pts
            .iter()
            .zip(&vals)
            .map(|(x, v)| (x.as_slice().to_vec(), v.0))
            .collect(),
    })
}

/// Time-varying bounds: the tube segments are grouped into at most
/// `pieces` consecutive groups and each group gets the bound over the hull
/// of its segment enclosures.
pub fn error_profile(
    model: &LiftedLinearModel,
    m: &LiftMap,
    sys: &AffineSystem,
    tube: &BoxTube,
    grid_per_dim: usize,
    inflation: f64,
    shape: ErrorShape,
    pieces: usize,
) -> Result<ErrorProfile> {
    if tube.segments.is_empty() || pieces == 0 {
        return Err(Error::InvalidArgument("error profile needs a nonempty tube and pieces > 0".into()));
    }
    let nseg = tube.segments.len();
    let per = nseg.div_ceil(pieces);
    let mut breaks = Vec::new();
    let mut bounds = Vec::new();
    // segments run backward in time; walk them forward
    let mut end = nseg;
    while end > 0 {
        let start = end.saturating_sub(per);
        let hull = tube.segments[start..end]
            .iter()
            .skip(1)
            .fold(tube.segments[start].clone(), |a, b| a.hull(b));
        let eb = error_bound_on_box(model, m, sys, &hull, grid_per_dim, inflation)?;
        breaks.push(tube.times[end]);
        bounds.push(match shape {
            ErrorShape::Ball => vec![eb.delta_star],
            ErrorShape::Box => eb.coordinate_max.iter().map(|v| v * (1.0 + inflation)).collect(),
        });
        end = start;
    }
    breaks.push(tube.times[0]);
    Ok(ErrorProfile { shape, breaks, bounds })
}

impl ErrorBound {
    /// JSON report without the per-point diagnostics.
    pub fn summary(&self) -> ErrorBound {
        ErrorBound {
            diagnostics: Vec::new(),
            ..self.clone()
        }
    }

    pub fn diagnostics_table(&self) -> Table {
        let n = self.domain.dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.push("bound".into());
        let mut t = Table::new(header);
        for (x, b) in &self.diagnostics {
            let mut row: Vec<String> = x.iter().map(|v| fmt_float(*v)).collect();
            row.push(fmt_float(*b));
            t.push(row);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{analytic_slow_manifold_model, taylor_model};
    use crate::systems::make_demo_system;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn integrator(radius: f64) -> AffineSystem {
        AffineSystem::new(
            "integrator",
            1,
            1,
            0,
            Arc::new(|_: &DVector<f64>| DVector::zeros(1)),
            Arc::new(|_: &DVector<f64>| DMatrix::identity(1, 1)),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 0)),
        )
        .unwrap()
        .with_balls(InputBall::new(1, radius).unwrap(), InputBall::new(0, 0.0).unwrap())
        .unwrap()
        .with_lipschitz(0.0)
    }

    #[test]
    fn static_system_keeps_target_box() {
        let tb = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let tube = backward_tube(&integrator(0.0), &tb, 0.0, 1.0, 0.1, DEFAULT_DIAMETER_CAP).unwrap();
        assert_eq!(tube.times.len(), 11);
        for b in &tube.boxes {
            assert!((b.lo[0] + 1.0).abs() < 1e-9 && (b.hi[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn integrator_tube_contains_exact_feasible_set() {
        let tb = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let tube = backward_tube(&integrator(1.0), &tb, 0.0, 1.0, 0.05, DEFAULT_DIAMETER_CAP).unwrap();
        let last = tube.box_at(0.0).unwrap();
        assert!(last.lo[0] <= -2.0 && last.hi[0] >= 2.0);
        assert!(last.hi[0] < 2.01);
        assert_eq!(tube.times[0], 1.0);
    }

    #[test]
    fn blow_up_reported() {
        let sys = AffineSystem::new(
            "unstable",
            1,
            0,
            0,
            Arc::new(|x: &DVector<f64>| x * 5.0),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 0)),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(1, 0)),
        )
        .unwrap()
        .with_lipschitz(5.0);
        let tb = AxisBox::new(vec![1.0], vec![2.0]).unwrap();
        let r = backward_tube(&sys, &tb, 0.0, 10.0, 0.1, 50.0);
        assert!(matches!(r, Err(Error::TubeBlowUp { .. })));
    }

    #[test]
    fn slow_manifold_tube_contains_backward_samples() {
        let sys = make_demo_system("slow_manifold", &BTreeMap::new()).unwrap();
        let target = AxisBox::new(vec![-1.0, 0.25], vec![1.0, 2.25]).unwrap();
        let tube = backward_tube(&sys, &target, 0.0, 1.0, 0.01, DEFAULT_DIAMETER_CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut x = v(&[rng.random_range(-1.0..1.0), rng.random_range(0.25..2.25)]);
            for k in 1..tube.times.len() {
                let u = sys.u_ball().sample(&mut rng);
                let d = sys.d_ball().sample(&mut rng);
                let dt = tube.times[k - 1] - tube.times[k];
                x = crate::systems::rk4_step(&sys, &x, &u, &d, -dt);
                assert!(tube.boxes[k].contains(x.as_slice()), "escape at step {k}");
            }
        }
    }

    #[test]
    fn vanderpol_paved_tube_contains_backward_samples() {
        let sys = make_demo_system("vanderpol", &BTreeMap::new()).unwrap();
        let target = AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            backward_tube(&sys, &target, 0.0, 1.0, 0.01, DEFAULT_DIAMETER_CAP),
            Err(Error::TubeBlowUp { .. })
        ));
        let paving = Paving { cell: 0.02, substeps: 25 };
        let tube = backward_tube_paved(&sys, &target, 0.0, 1.0, 0.01, paving, DEFAULT_DIAMETER_CAP).unwrap();
        assert_eq!(tube.boxes.len(), 101);
        assert!(tube.union_box().diameter() < 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let mut x = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let u = sys.u_ball().extremizer(&[if rng.random::<bool>() { 1.0 } else { -1.0 }]);
            for k in 1..tube.times.len() {
                let dt = tube.times[k - 1] - tube.times[k];
                x = crate::systems::rk4_step(&sys, &x, &u, &v(&[]), -dt);
                assert!(tube.boxes[k].contains(x.as_slice()), "escape at step {k}: {x:?}");
                assert!(tube.segments[k - 1].contains(x.as_slice()));
            }
        }
    }

    #[test]
    fn paved_integrator_tube_is_sound_and_tight() {
        let drift: crate::systems::DriftFn = std::sync::Arc::new(|_x: &DVector<f64>| DVector::zeros(1));
        let one: crate::systems::InputMapFn = std::sync::Arc::new(|_x: &DVector<f64>| DMatrix::from_element(1, 1, 1.0));
        let sys = AffineSystem::new("integrator", 1, 1, 0, drift, one.clone(), std::sync::Arc::new(|_x: &DVector<f64>| DMatrix::zeros(1, 0)))
            .unwrap()
            .with_balls(InputBall::new(1, 1.0).unwrap(), InputBall::new(0, 0.0).unwrap())
            .unwrap()
            .with_lipschitz(0.0);
        let target = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let paving = Paving { cell: 0.01, substeps: 10 };
        let tube = backward_tube_paved(&sys, &target, 0.0, 1.0, 0.05, paving, DEFAULT_DIAMETER_CAP).unwrap();
        for (s, b) in tube.times.iter().zip(&tube.boxes) {
            let r = 1.0 + (1.0 - s);
            assert!(b.lo[0] <= -r + 1e-9 && b.hi[0] >= r - 1e-9);
            assert!(b.hi[0] - r < 0.05, "box {b:?} at {s}");
        }
        assert!(backward_tube_paved(&sys, &target, 0.0, 1.0, 0.05, Paving { cell: 0.0, substeps: 1 }, 1e3).is_err());
    }

    #[test]
    fn exact_lift_autonomous_error_is_zero() {
        let mut params = BTreeMap::new();
        params.insert("u_radius".to_string(), 0.0);
        params.insert("d_radius".to_string(), 0.0);
        let sys = make_demo_system("slow_manifold", &params).unwrap();
        let model = analytic_slow_manifold_model(&v(&[0.0, 0.0]), -0.05, -1.0).unwrap();
        let dom = AxisBox::new(vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
        let eb = error_bound_on_box(&model, &LiftMap::slow_manifold(), &sys, &dom, 21, 0.1).unwrap();
        assert!(eb.raw_max < 1e-10);
    }

    #[test]
    fn analytic_model_bound_matches_closed_form() {
        let sys = make_demo_system("slow_manifold", &BTreeMap::new()).unwrap();
        let model = analytic_slow_manifold_model(&v(&[0.0, 0.0]), -0.05, -1.0).unwrap();
        let m = 1.5;
        let dom = AxisBox::new(vec![-m, -1.0], vec![m, 3.0]).unwrap();
        let eb = error_bound_on_box(&model, &LiftMap::slow_manifold(), &sys, &dom, 11, 0.1).unwrap();
        let want = 2.0 * m * 0.75;
        assert!((eb.raw_max - want).abs() < 1e-9, "{} vs {want}", eb.raw_max);
        assert!((eb.delta_star - 1.1 * want).abs() < 1e-9);
        assert!(eb.diagnostics.iter().all(|(_, b)| *b <= eb.delta_star));
        assert!(error_bound_on_box(&model, &LiftMap::slow_manifold(), &sys, &dom, 1, 0.1).is_err());
    }

    #[test]
    fn larger_domain_never_lowers_bound() {
        let sys = make_demo_system("vanderpol", &BTreeMap::new()).unwrap();
        let lift = LiftMap::polynomial(2, 3, true).unwrap();
        let model = taylor_model(&sys, &lift, &v(&[0.0, 0.0])).unwrap();
        let small = AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let big = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let a = error_bound_on_box(&model, &lift, &sys, &small, 9, 0.0).unwrap();
        let b = error_bound_on_box(&model, &lift, &sys, &big, 17, 0.0).unwrap();
        assert!(b.delta_star >= a.delta_star);
    }

    #[test]
    fn tube_table_and_json_round_trip() {
        let tb = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let tube = backward_tube(&integrator(1.0), &tb, 0.0, 0.5, 0.25, DEFAULT_DIAMETER_CAP).unwrap();
        let t = tube.to_table();
        assert_eq!(t.header, vec!["time", "lo_1", "hi_1"]);
        assert_eq!(t.rows.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tube.json");
        tube.save_json(&p).unwrap();
        assert_eq!(BoxTube::load_json(&p).unwrap(), tube);
        assert_eq!(tube.truncated(0.25).times, vec![0.5, 0.25]);
    }
}
