//! Two-dimensional Lax-Friedrichs level-set solver for the nonlinear game.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::{fmt_float, Table};
use crate::systems::AffineSystem;
use crate::targets::QuadTarget;
use crate::GameSense;

const MAGIC: &[u8; 4] = b"HJVG";
const FORMAT_VERSION: u32 = 1;
const SAFETY: f64 = 1.2;

/// Sampled value function on a 2D tensor grid; `values[i * n2 + j]` sits at
/// `(axes[0][i], axes[1][j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub time: f64,
    pub sense: GameSense,
    pub cfl_used: f64,
}

/// Uniform axis with `n` nodes on `[lo, hi]`.
pub fn uniform_axis(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "axis needs n >= 2 and lo < hi (n = {n}, lo = {lo}, hi = {hi})"
        )));
    }
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect())
}

fn spacing(axis: &[f64]) -> f64 {
    (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    shape: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    time: f64,
    sense: GameSense,
    cfl_used: f64,
    min_value: f64,
    max_value: f64,
    negative_cells: usize,
}

impl ValueGrid {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, time: f64, sense: GameSense) -> Result<Self> {
        check_dim("grid axes", 2, axes.len())?;
        if axes.iter().any(|a| a.len() < 2) {
            return Err(Error::InvalidArgument("each axis needs at least 2 nodes".into()));
        }
        check_dim("grid values", axes[0].len() * axes[1].len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("value grid contains non-finite entries".into()));
        }
        Ok(ValueGrid {
            axes,
            values,
            time,
            sense,
            cfl_used: 0.0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axes[0].len(), self.axes[1].len())
    }

    pub fn spacing(&self) -> (f64, f64) {
        (spacing(&self.axes[0]), spacing(&self.axes[1]))
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.axes[1].len() + j]
    }

    pub fn node(&self, i: usize, j: usize) -> DVector<f64> {
        DVector::from_row_slice(&[self.axes[0][i], self.axes[1][j]])
    }

    /// All nodes in storage order.
    pub fn nodes(&self) -> Vec<DVector<f64>> {
        let (n1, n2) = self.shape();
        (0..n1 * n2).map(|k| self.node(k / n2, k % n2)).collect()
    }

    /// Nodes with `V <= level`.
    pub fn sublevel_mask(&self, level: f64) -> Vec<bool> {
        self.values.iter().map(|v| *v <= level).collect()
    }

    /// Area of `{V <= 0}` by node count times cell area.
    pub fn sublevel_area(&self) -> f64 {
        let (d1, d2) = self.spacing();
        self.values.iter().filter(|v| **v <= 0.0).count() as f64 * d1 * d2
    }

    fn locate(&self, x: &[f64]) -> Result<[(usize, f64); 2]> {
        check_dim("grid query", 2, x.len())?;
        let mut out = [(0, 0.0); 2];
        for (d, (axis, v)) in self.axes.iter().zip(x).enumerate() {
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            let slack = 1e-12 * (hi - lo);
            if !(*v >= lo - slack && *v <= hi + slack) {
                return Err(Error::OutOfDomain(format!(
                    "coordinate {d} = {v} outside [{lo}, {hi}]"
                )));
            }
            let h = spacing(axis);
            let s = ((v - lo) / h).clamp(0.0, (axis.len() - 1) as f64);
            let i = (s.floor() as usize).min(axis.len() - 2);
            out[d] = (i, s - i as f64);
        }
        Ok(out)
    }

    /// Bilinear interpolation.
    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        let [(i, a), (j, b)] = self.locate(x)?;
        Ok((1.0 - a) * (1.0 - b) * self.at(i, j)
            + a * (1.0 - b) * self.at(i + 1, j)
            + (1.0 - a) * b * self.at(i, j + 1)
            + a * b * self.at(i + 1, j + 1))
    }

    /// Central differences of the interpolant with half-cell steps, one-sided
    /// at the hull boundary.
    pub fn gradient_at(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.locate(x)?;
        let (d1, d2) = self.spacing();
        let mut g = DVector::zeros(2);
        for (d, h) in [(0, 0.5 * d1), (1, 0.5 * d2)] {
            let axis = &self.axes[d];
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[d] = (x[d] - h).max(lo);
            b[d] = (x[d] + h).min(hi);
            g[d] = (self.value_at(&b)? - self.value_at(&a)?) / (b[d] - a[d]);
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 8 * (self.values.len() + 8));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.axes.len() as u32).to_le_bytes());
        for a in &self.axes {
            buf.extend_from_slice(&(a.len() as u64).to_le_bytes());
        }
        for v in self.axes.iter().flatten().chain([&self.time]).chain(self.values.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        File::create(path)?.write_all(&buf)?;
        let sidecar = Sidecar {
            format: "row-major f64 little-endian".into(),
            version: FORMAT_VERSION,
            shape: self.axes.iter().map(|a| a.len()).collect(),
            lo: self.axes.iter().map(|a| a[0]).collect(),
            hi: self.axes.iter().map(|a| a[a.len() - 1]).collect(),
            time: self.time,
            sense: self.sense,
            cfl_used: self.cfl_used,
            min_value: self.values.iter().cloned().fold(f64::INFINITY, f64::min),
            max_value: self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            negative_cells: self.values.iter().filter(|v| **v <= 0.0).count(),
        };
        crate::io::write_json(&path.with_extension("json"), &sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        let bad = |what: &str| Error::Serde(format!("value grid {}: {what}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let dims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut lens = Vec::with_capacity(dims);
        for _ in 0..dims {
            lens.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let mut f = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
                .collect()
        };
        let axes: Vec<Vec<f64>> = lens.iter().map(|n| f(*n)).collect::<Result<_>>()?;
        let time = f(1)?[0];
        let values = f(lens.iter().product())?;
        let side: Sidecar = crate::io::read_json(&path.with_extension("json"))?;
        let mut g = ValueGrid::new(axes, values, time, side.sense)?;
        g.cfl_used = side.cfl_used;
        Ok(g)
    }

    /// CSV with `x1, x2, value`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["x1", "x2", "value"]);
        let (n1, n2) = self.shape();
        for i in 0..n1 {
            for j in 0..n2 {
                t.push(vec![
                    fmt_float(self.axes[0][i]),
                    fmt_float(self.axes[1][j]),
                    fmt_float(self.at(i, j)),
                ]);
            }
        }
        t
    }
}

/// Per-node field data and the dissipation bounds.
struct FieldSamples {
    drift: Vec<[f64; 2]>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    m1: usize,
    m2: usize,
    /// Grid-wide dissipation bound; sets the time step.
    alpha: [f64; 2],
    /// Dissipation per node: the bound over the node's 3x3 neighbourhood.
    local: Vec<[f64; 2]>,
}

fn sample_field(sys: &AffineSystem, axes: &[Vec<f64>]) -> Result<FieldSamples> {
    let (n1, n2) = (axes[0].len(), axes[1].len());
    let (m1, m2) = (sys.control_dim(), sys.disturbance_dim());
    let rows: Vec<(Vec<[f64; 2]>, Vec<f64>, Vec<f64>)> = (0..n1)
        .into_par_iter()
        .map(|i| {
            let mut d = Vec::with_capacity(n2);
            let mut a = Vec::with_capacity(n2 * 2 * m1);
            let mut b = Vec::with_capacity(n2 * 2 * m2);
            for j in 0..n2 {
                let x = DVector::from_row_slice(&[axes[0][i], axes[1][j]]);
                let f = sys.drift(&x);
                d.push([f[0], f[1]]);
                let c = sys.control_matrix(&x);
                let e = sys.disturbance_matrix(&x);
                for r in 0..2 {
                    a.extend((0..m1).map(|k| c[(r, k)]));
                    b.extend((0..m2).map(|k| e[(r, k)]));
                }
            }
            (d, a, b)
        })
        .collect();
    let mut out = FieldSamples {
        drift: Vec::with_capacity(n1 * n2),
        h1: Vec::with_capacity(n1 * n2 * 2 * m1),
        h2: Vec::with_capacity(n1 * n2 * 2 * m2),
        m1,
        m2,
        alpha: [0.0; 2],
        local: Vec::new(),
    };
    for (d, a, b) in rows {
        out.drift.extend(d);
        out.h1.extend(a);
        out.h2.extend(b);
    }
    if out.drift.iter().flatten().chain(&out.h1).chain(&out.h2).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("dynamics on the DP grid".into()));
    }
    let mut node = vec![[0.0; 2]; n1 * n2];
    for (k, a) in node.iter_mut().enumerate() {
        for r in 0..2 {
            let ru = sys.u_ball().support(&out.h1[(k * 2 + r) * m1..(k * 2 + r + 1) * m1]);
            let rd = sys.d_ball().support(&out.h2[(k * 2 + r) * m2..(k * 2 + r + 1) * m2]);
            // |dH/dp_r| <= |f_r| + sup |h1_r . u| + sup |h2_r . d|
            a[r] = out.drift[k][r].abs() + ru + rd;
            out.alpha[r] = out.alpha[r].max(a[r]);
        }
    }
    out.alpha = [SAFETY * out.alpha[0], SAFETY * out.alpha[1]];
    out.local = (0..n1 * n2)
        .map(|k| {
            let (i, j) = (k / n2, k % n2);
            let mut a = [0.0f64; 2];
            for ni in i.saturating_sub(1)..(i + 2).min(n1) {
                for nj in j.saturating_sub(1)..(j + 2).min(n2) {
                    let b = node[ni * n2 + nj];
                    a = [a[0].max(b[0]), a[1].max(b[1])];
                }
            }
            [SAFETY * a[0], SAFETY * a[1]]
        })
        .collect();
    Ok(out)
}

/// Game Hamiltonian `min_u max_d p . f` (reach) or `max_u min_d` (avoid).
fn hamiltonian(sys: &AffineSystem, fs: &FieldSamples, k: usize, p: [f64; 2], sense: GameSense, buf: &mut [f64]) -> f64 {
    let (m1, m2) = (fs.m1, fs.m2);
    let mut h = p[0] * fs.drift[k][0] + p[1] * fs.drift[k][1];
    for c in 0..m1 {
        buf[c] = p[0] * fs.h1[(k * 2) * m1 + c] + p[1] * fs.h1[(k * 2 + 1) * m1 + c];
    }
    let su = sys.u_ball().support(&buf[..m1]);
    for c in 0..m2 {
        buf[c] = p[0] * fs.h2[(k * 2) * m2 + c] + p[1] * fs.h2[(k * 2 + 1) * m2 + c];
    }
    let sd = sys.d_ball().support(&buf[..m2]);
    match sense {
        GameSense::Reach => h += -su + sd,
        GameSense::Avoid => h += su - sd,
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpOptions {
    pub cfl: f64,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { cfl: 0.9 }
    }
}

/// Values at each requested time in `times` (all `< T`), sorted by
/// decreasing time; one backward sweep covers all of them.
pub fn solve_dp_snapshots(
    sys: &AffineSystem,
    tgt: &QuadTarget,
    sense: GameSense,
    axes: &[Vec<f64>],
    times: &[f64],
    t_final: f64,
    cfl: f64,
) -> Result<Vec<ValueGrid>> {
    check_dim("DP state dimension", 2, sys.state_dim())?;
    check_dim("DP target dimension", 2, tgt.dim())?;
    check_dim("DP axes", 2, axes.len())?;
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::InvalidArgument(format!("cfl must be in (0, 1], got {cfl}")));
    }
    for a in axes {
        if a.len() < 3 {
            return Err(Error::InvalidArgument("DP axes need at least 3 nodes".into()));
        }
    }
    if times.is_empty() || times.iter().any(|t| !(*t <= t_final)) {
        return Err(Error::InvalidArgument("snapshot times must be <= T".into()));
    }
    let mut order: Vec<f64> = times.to_vec();
    order.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let (n1, n2) = (axes[0].len(), axes[1].len());
    let (dx, dy) = (spacing(&axes[0]), spacing(&axes[1]));
    let fs = sample_field(sys, axes)?;
    let rate = fs.alpha[0] / dx + fs.alpha[1] / dy;
    let ds_max = if rate > 0.0 { cfl / rate } else { f64::INFINITY };

    let mut v: Vec<f64> = (0..n1 * n2)
        .map(|k| tgt.eval_j(&DVector::from_row_slice(&[axes[0][k / n2], axes[1][k % n2]])))
        .collect();
    let mut next = vec![0.0; n1 * n2];
    let mut now = t_final;
    let mut out = Vec::with_capacity(order.len());
    let mut step_index = 0usize;
    let buf_len = fs.m1.max(fs.m2).max(1);
    for &target_time in &order {
        let span = now - target_time;
        if span > 0.0 {
            let steps = (span / ds_max).ceil().max(1.0) as usize;
            let ds = span / steps as f64;
            for _ in 0..steps {
                next.par_chunks_mut(n2).enumerate().for_each(|(i, row)| {
                    let mut buf = vec![0.0; buf_len];
                    let at = |i: isize, j: isize| -> f64 {
                        // linear extrapolation ghost cells
                        let ci = i.clamp(0, n1 as isize - 1);
                        let cj = j.clamp(0, n2 as isize - 1);
                        let base = v[ci as usize * n2 + cj as usize];
                        let mut val = base;
                        if i != ci {
                            let inner = (ci - (i - ci).signum()) as usize;
                            val += (base - v[inner * n2 + cj as usize]) * (i - ci).abs() as f64;
                        }
                        if j != cj {
                            let inner = (cj - (j - cj).signum()) as usize;
                            val += (base - v[ci as usize * n2 + inner]) * (j - cj).abs() as f64;
                        }
                        val
                    };
                    let ii = i as isize;
                    for (j, slot) in row.iter_mut().enumerate() {
                        let jj = j as isize;
                        let c = v[i * n2 + j];
                        let pxm = (c - at(ii - 1, jj)) / dx;
                        let pxp = (at(ii + 1, jj) - c) / dx;
                        let pym = (c - at(ii, jj - 1)) / dy;
                        let pyp = (at(ii, jj + 1) - c) / dy;
                        let p = [0.5 * (pxm + pxp), 0.5 * (pym + pyp)];
                        let h = hamiltonian(sys, &fs, i * n2 + j, p, sense, &mut buf);
                        let a = fs.local[i * n2 + j];
                        let diss = 0.5 * a[0] * (pxp - pxm) + 0.5 * a[1] * (pyp - pym);
                        *slot = c + ds * (h + diss);
                    }
                });
                std::mem::swap(&mut v, &mut next);
                step_index += 1;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite DP value at step {step_index}")));
                }
            }
            now = target_time;
        }
        let mut g = ValueGrid::new(axes.to_vec(), v.clone(), target_time, sense)?;
        g.cfl_used = if ds_max.is_finite() { cfl } else { 0.0 };
        out.push(g);
    }
    Ok(out)
}

pub fn solve_dp(
    sys: &AffineSystem,
    tgt: &QuadTarget,
    sense: GameSense,
    axes: &[Vec<f64>],
    t: f64,
    t_final: f64,
    cfl: f64,
) -> Result<ValueGrid> {
    if !(t <= t_final) {
        return Err(Error::InvalidArgument(format!("need t <= T, got {t} > {t_final}")));
    }
    Ok(solve_dp_snapshots(sys, tgt, sense, axes, &[t], t_final, cfl)?.remove(0))
}

pub fn dp_value_at(grid: &ValueGrid, x: &DVector<f64>) -> Result<f64> {
    grid.value_at(x.as_slice())
}

pub fn dp_gradient_at(grid: &ValueGrid, x: &DVector<f64>) -> Result<DVector<f64>> {
    grid.gradient_at(x.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use crate::systems::{make_demo_system, InputBall};

    fn first_axis_integrator() -> AffineSystem {
        AffineSystem::new(
            "x1_integrator",
            2,
            1,
            0,
            Arc::new(|_: &DVector<f64>| DVector::zeros(2)),
            Arc::new(|_: &DVector<f64>| DMatrix::from_row_slice(2, 1, &[1.0, 0.0])),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(2, 0)),
        )
        .unwrap()
        .with_balls(InputBall::new(1, 1.0).unwrap(), InputBall::new(0, 0.0).unwrap())
        .unwrap()
    }

    fn x1_target() -> QuadTarget {
        QuadTarget::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 1e-9])), 1.0).unwrap()
    }

    fn closed_form(x1: f64, x2: f64) -> f64 {
        (x1.abs() - 1.0).max(0.0).powi(2) - 1.0 + 1e-9 * x2 * x2
    }

    #[test]
    fn zero_dynamics_keeps_terminal_cost() {
        let sys = AffineSystem::new(
            "still",
            2,
            0,
            0,
            Arc::new(|_: &DVector<f64>| DVector::zeros(2)),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(2, 0)),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(2, 0)),
        )
        .unwrap();
        let tgt = QuadTarget::unit_ball(2);
        let axes = vec![uniform_axis(-2.0, 2.0, 21).unwrap(), uniform_axis(-2.0, 2.0, 21).unwrap()];
        let g = solve_dp(&sys, &tgt, GameSense::Reach, &axes, 0.0, 1.0, 0.9).unwrap();
        for (k, x) in g.nodes().iter().enumerate() {
            assert_eq!(g.values[k], tgt.eval_j(x));
        }
    }

    #[test]
    fn terminal_snapshot_is_exact_cost() {
        let sys = make_demo_system("slow_manifold", &BTreeMap::new()).unwrap();
        let tgt = QuadTarget::from_diag(DVector::from_row_slice(&[0.0, 1.25]), &[1.0, 1.0], 1.0).unwrap();
        let axes = vec![uniform_axis(-2.0, 2.0, 11).unwrap(), uniform_axis(-1.0, 3.0, 11).unwrap()];
        let snaps = solve_dp_snapshots(&sys, &tgt, GameSense::Reach, &axes, &[1.0, 0.5], 1.0, 0.9).unwrap();
        assert_eq!(snaps[0].time, 1.0);
        for (k, x) in snaps[0].nodes().iter().enumerate() {
            assert_eq!(snaps[0].values[k], tgt.eval_j(x));
        }
    }

    #[test]
    fn integrator_embedding_matches_closed_form() {
        let axes = vec![uniform_axis(-3.0, 3.0, 201).unwrap(), uniform_axis(-1.0, 1.0, 5).unwrap()];
        let g = solve_dp(&first_axis_integrator(), &x1_target(), GameSense::Reach, &axes, 0.0, 1.0, 0.9).unwrap();
        let mut worst: f64 = 0.0;
        for (k, x) in g.nodes().iter().enumerate() {
            if x[0].abs() <= 2.5 {
                worst = worst.max((g.values[k] - closed_form(x[0], x[1])).abs());
            }
        }
        assert!(worst < 0.05, "max error {worst}");
    }

    #[test]
    fn refinement_reduces_error() {
        let err = |n: usize| {
            let axes = vec![uniform_axis(-3.0, 3.0, n).unwrap(), uniform_axis(-1.0, 1.0, 5).unwrap()];
            let g = solve_dp(&first_axis_integrator(), &x1_target(), GameSense::Reach, &axes, 0.0, 1.0, 0.9).unwrap();
            g.nodes()
                .iter()
                .enumerate()
                .filter(|(_, x)| x[0].abs() <= 2.5)
                .map(|(k, x)| (g.values[k] - closed_form(x[0], x[1])).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(61), err(121));
        assert!(fine <= coarse);
        assert!((coarse - fine) <= 6.0 / 60.0 + 1e-12);
    }

    #[test]
    fn reach_set_grows_backward() {
        let axes = vec![uniform_axis(-3.0, 3.0, 121).unwrap(), uniform_axis(-1.0, 1.0, 5).unwrap()];
        let snaps = solve_dp_snapshots(
            &first_axis_integrator(),
            &x1_target(),
            GameSense::Reach,
            &axes,
            &[0.75, 0.5, 0.25, 0.0],
            1.0,
            0.9,
        )
        .unwrap();
        for w in snaps.windows(2) {
            let (a, b) = (w[0].sublevel_mask(0.0), w[1].sublevel_mask(0.0));
            assert!(a.iter().zip(&b).all(|(x, y)| !*x || *y));
            assert!(w[1].sublevel_area() > w[0].sublevel_area());
        }
    }

    #[test]
    fn interpolation_identities() {
        let axes = vec![uniform_axis(0.0, 2.0, 5).unwrap(), uniform_axis(-1.0, 1.0, 3).unwrap()];
        let lin: Vec<f64> = (0..15).map(|k| axes[0][k / 3] + 0.5 * axes[1][k % 3]).collect();
        let g = ValueGrid::new(axes.clone(), lin, 0.0, GameSense::Reach).unwrap();
        assert_eq!(g.value_at(&[1.0, 0.0]).unwrap(), g.at(2, 1));
        assert!((g.value_at(&[0.77, 0.31]).unwrap() - (0.77 + 0.155)).abs() < 1e-14);
        let c = g.value_at(&[0.25, -0.5]).unwrap();
        let avg = 0.25 * (g.at(0, 0) + g.at(1, 0) + g.at(0, 1) + g.at(1, 1));
        assert!((c - avg).abs() < 1e-14);
        let gr = g.gradient_at(&[1.3, 0.2]).unwrap();
        assert!((gr[0] - 1.0).abs() < 1e-10 && (gr[1] - 0.5).abs() < 1e-10);
        assert!(g.gradient_at(&[0.0, -1.0]).unwrap().iter().all(|v| v.is_finite()));
        assert!(matches!(g.value_at(&[2.5, 0.0]), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn quadratic_gradient_points_outward() {
        let axes = vec![uniform_axis(-2.0, 2.0, 81).unwrap(), uniform_axis(-2.0, 2.0, 81).unwrap()];
        let tgt = QuadTarget::unit_ball(2);
        let vals = (0..81 * 81)
            .map(|k| tgt.eval_j(&DVector::from_row_slice(&[axes[0][k / 81], axes[1][k % 81]])))
            .collect();
        let g = ValueGrid::new(axes, vals, 0.0, GameSense::Reach).unwrap();
        let gr = g.gradient_at(&[1.23, 0.0]).unwrap();
        assert!((gr[0] - 2.46).abs() < 0.05 * 2.46 && gr[1].abs() < 1e-9);
    }

    #[test]
    fn binary_round_trip() {
        let axes = vec![uniform_axis(0.0, 1.0, 4).unwrap(), uniform_axis(0.0, 1.0, 3).unwrap()];
        let mut g = ValueGrid::new(axes, (0..12).map(|k| k as f64 * 0.1 - 0.3).collect(), 0.5, GameSense::Avoid).unwrap();
        g.cfl_used = 0.9;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        g.save(&p).unwrap();
        assert!(p.with_extension("json").exists());
        assert_eq!(ValueGrid::load(&p).unwrap(), g);
        std::fs::write(&p, b"nope").unwrap();
        assert!(ValueGrid::load(&p).is_err());
    }

    #[test]
    fn bad_inputs_rejected() {
        let sys = make_demo_system("slow_manifold", &BTreeMap::new()).unwrap();
        let tgt = QuadTarget::unit_ball(2);
        let axes = vec![uniform_axis(-1.0, 1.0, 5).unwrap(), uniform_axis(-1.0, 1.0, 5).unwrap()];
        assert!(solve_dp(&sys, &tgt, GameSense::Reach, &axes, 0.0, 1.0, 1.5).is_err());
        assert!(uniform_axis(1.0, 0.0, 4).is_err());
    }
}
