//! Marching-squares extraction of level curves from 2D grids.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{check_dim, Result};
use crate::io::Table;

/// Cell edge: `(i, j, 0)` runs from node `(i, j)` to `(i+1, j)`, `(i, j, 1)`
/// from `(i, j)` to `(i, j+1)`.
type Edge = (usize, usize, u8);

/// Level curves of `values` (row-major, `values[i * n2 + j]`) at `level`.
/// Closed curves repeat their first point at the end.
pub fn level_curves(axes: &[Vec<f64>], values: &[f64], level: f64) -> Result<Vec<Vec<[f64; 2]>>> {
    check_dim("contour axes", 2, axes.len())?;
    let (n1, n2) = (axes[0].len(), axes[1].len());
    check_dim("contour values", n1 * n2, values.len())?;
    let v = |i: usize, j: usize| values[i * n2 + j];
    let above = |i: usize, j: usize| v(i, j) > level;

    let point = |e: Edge| -> [f64; 2] {
        let (i, j, dir) = e;
        let (i2, j2) = if dir == 0 { (i + 1, j) } else { (i, j + 1) };
        let (a, b) = (v(i, j), v(i2, j2));
        let s = if b != a { ((level - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
        [
            axes[0][i] + s * (axes[0][i2] - axes[0][i]),
            axes[1][j] + s * (axes[1][j2] - axes[1][j]),
        ]
    };

    let mut segs: Vec<(Edge, Edge)> = Vec::new();
    for i in 0..n1.saturating_sub(1) {
        for j in 0..n2.saturating_sub(1) {
            // Corners counter-clockwise from (i, j).
            let c = [above(i, j), above(i + 1, j), above(i + 1, j + 1), above(i, j + 1)];
            let edges: [Edge; 4] = [(i, j, 0), (i + 1, j, 1), (i, j + 1, 0), (i, j, 1)];
            let cut: Vec<usize> = (0..4).filter(|k| c[*k] != c[(*k + 1) % 4]).collect();
            match cut.len() {
                2 => segs.push((edges[cut[0]], edges[cut[1]])),
                4 => {
                    let centre = 0.25 * (v(i, j) + v(i + 1, j) + v(i + 1, j + 1) + v(i, j + 1));
                    // Pair edges so that the centre joins corners on its side.
                    if (centre > level) == c[0] {
                        segs.push((edges[0], edges[1]));
                        segs.push((edges[2], edges[3]));
                    } else {
                        segs.push((edges[3], edges[0]));
                        segs.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }

    let mut at: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segs.iter().enumerate() {
        at.entry(*a).or_default().push(k);
        at.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segs.len()];
    let walk = |start_seg: usize, from: Edge, used: &mut Vec<bool>| -> Vec<Edge> {
        let mut chain = vec![from];
        let mut k = start_seg;
        let mut cur = from;
        loop {
            used[k] = true;
            let (a, b) = segs[k];
            let nxt = if a == cur { b } else { a };
            chain.push(nxt);
            cur = nxt;
            match at[&cur].iter().find(|s| !used[**s]) {
                Some(s) => k = *s,
                None => return chain,
            }
        }
    };

    let mut curves = Vec::new();
    // Open chains start at edges used by a single segment.
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by_key(|k| {
        let (a, b) = segs[*k];
        !(at[&a].len() == 1 || at[&b].len() == 1)
    });
    for k in order {
        if used[k] {
            continue;
        }
        let (a, b) = segs[k];
        let from = if at[&b].len() == 1 && at[&a].len() != 1 { b } else { a };
        let chain = walk(k, from, &mut used);
        curves.push(chain.into_iter().map(point).collect());
    }
    Ok(curves)
}

/// One row per vertex: `polyline, x1, x2`.
pub fn curves_table(curves: &[Vec<[f64; 2]>]) -> Table {
    let mut t = Table::new(["polyline", "x1", "x2"]);
    for (id, c) in curves.iter().enumerate() {
        for p in c {
            t.push(vec![id.to_string(), crate::io::fmt_float(p[0]), crate::io::fmt_float(p[1])]);
        }
    }
    t
}

pub fn write_curves(path: &Path, curves: &[Vec<[f64; 2]>]) -> Result<()> {
    curves_table(curves).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, f: impl Fn(f64, f64) -> f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let ax: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let mut v = Vec::new();
        for a in &ax {
            for b in &ax {
                v.push(f(*a, *b));
            }
        }
        (vec![ax.clone(), ax], v)
    }

    #[test]
    fn circle_is_one_closed_curve_near_radius() {
        let (axes, v) = grid(41, |a, b| a * a + b * b - 1.0);
        let cs = level_curves(&axes, &v, 0.0).unwrap();
        assert_eq!(cs.len(), 1);
        let c = &cs[0];
        assert_eq!(c.first(), c.last());
        let cell = 0.1;
        for p in c {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < cell);
        }
    }

    #[test]
    fn constant_field_has_no_curves() {
        let (axes, v) = grid(11, |_, _| 3.0);
        assert!(level_curves(&axes, &v, 0.0).unwrap().is_empty());
    }

    #[test]
    fn curve_touching_border_is_open() {
        let (axes, v) = grid(21, |a, _| a - 0.3);
        let cs = level_curves(&axes, &v, 0.0).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].len(), 21);
        assert!(cs[0].iter().all(|p| (p[0] - 0.3).abs() < 1e-12));
        let t = curves_table(&cs);
        assert_eq!(t.rows.len(), 21);
    }

    #[test]
    fn two_blobs_give_two_curves() {
        let (axes, v) = grid(61, |a, b| ((a - 1.0).powi(2) + b * b).min((a + 1.0).powi(2) + b * b) - 0.25);
        assert_eq!(level_curves(&axes, &v, 0.0).unwrap().len(), 2);
    }
}
