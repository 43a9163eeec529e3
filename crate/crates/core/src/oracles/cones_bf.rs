//! Brute-force distance quotients for control sets, from exact projections
//! computed independently of the cone toolkit.

use nalgebra::{DMatrix, DVector};

use crate::cones::ControlSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeRow {
    pub eps: f64,
    /// `dist(u + εv, U)/ε`.
    pub first: f64,
    /// `dist(u + εv + ε²h, U)/ε²`.
    pub second: f64,
}

/// Projection onto a polytope `{Ax ≤ b}` by enumerating active sets: each
/// subset of rows with independent normals gives the projection onto its
/// affine hull; the nearest feasible one is the projection.
fn polytope_projection(a: &DMatrix<f64>, b: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let rows = a.nrows();
    let d = a.ncols();
    let feasible = |x: &DVector<f64>| (0..rows).all(|i| a.row(i).dot(&x.transpose()) <= b[i] + 1e-11 * (1.0 + b[i].abs()));
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0usize..(1 << rows) {
        let subset: Vec<usize> = (0..rows).filter(|i| mask >> i & 1 == 1).collect();
        if subset.len() > d {
            continue;
        }
        let x = if subset.is_empty() {
            y.clone()
        } else {
            let sa = a.select_rows(subset.iter());
            let sb = DVector::from_iterator(subset.len(), subset.iter().map(|&i| b[i]));
            let gram = &sa * sa.transpose();
            let Some(inv) = gram.try_inverse() else { continue };
            if !inv.iter().all(|v| v.is_finite()) {
                continue;
            }
            y - sa.transpose() * (inv * (&sa * y - sb))
        };
        if !feasible(&x) {
            continue;
        }
        let dist = (&x - y).norm();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, x));
        }
    }
    best.map(|(_, x)| x).unwrap_or_else(|| y.clone())
}

pub fn exact_projection(set: &ControlSet, y: &DVector<f64>) -> DVector<f64> {
    match set {
        ControlSet::Box { lo, hi } => DVector::from_fn(y.len(), |i, _| y[i].max(lo[i]).min(hi[i])),
        ControlSet::Ball { center, radius } => {
            let r = (y - center).norm();
            if r <= *radius {
                y.clone()
            } else {
                center + (y - center) * (*radius / r)
            }
        }
        ControlSet::Halfspace { normal, offset } => {
            let gap = normal.dot(y) - offset;
            if gap <= 0.0 {
                y.clone()
            } else {
                y - normal * (gap / normal.dot(normal))
            }
        }
        ControlSet::Polytope { a, b } => polytope_projection(a, b, y),
        ControlSet::Finite { points } => points
            .iter()
            .min_by(|p, q| (*p - y).norm().total_cmp(&(*q - y).norm()))
            .cloned()
            .unwrap_or_else(|| y.clone()),
    }
}

fn dist(set: &ControlSet, y: &DVector<f64>) -> f64 {
    (y - exact_projection(set, y)).norm()
}

pub fn brute_force_cone(set: &ControlSet, u: &DVector<f64>, v: &DVector<f64>, h: &DVector<f64>, ladder: &[f64]) -> Vec<ConeRow> {
    ladder
        .iter()
        .map(|&eps| ConeRow {
            eps,
            first: dist(set, &(u + v * eps)) / eps,
            second: dist(set, &(u + v * eps + h * (eps * eps))) / (eps * eps),
        })
        .collect()
}

/// Richardson limits `2q(ε/2) − q(ε)` from the last two rungs of a halving
/// ladder, for the first and second quotients.
pub fn extrapolate(rows: &[ConeRow]) -> (f64, f64) {
    match rows {
        [.., a, b] => ((2.0 * b.first - a.first).max(0.0), (2.0 * b.second - a.second).max(0.0)),
        [a] => (a.first, a.second),
        [] => (0.0, 0.0),
    }
}
