//! Control sets and their tangent objects: adjacent cone, normal cone and the
//! second-order adjacent subset.
//!
//! Residuals are analytic per family. The `*_sampled` variants evaluate the
//! defining distance quotients on [`EPS_LADDER`] through [`ControlSet::project`]
//! and keep the larger of the two smallest rungs; they work for every family
//! and are what the analytic formulas are tested against inside this module.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Absolute tolerance for `u ∈ U`.
pub const TOL_MEMBERSHIP: f64 = 1e-9;
/// Tolerance for deciding that a constraint is active, or that a directional
/// quantity vanishes.
pub const TOL_ACTIVE: f64 = 1e-9;
/// Largest adjacent residual for which a direction still counts as tangent.
pub const TOL_TANGENT: f64 = 1e-8;

/// `ε ∈ {2⁻³, …, 2⁻¹²}`.
pub const EPS_LADDER: [f64; 10] = [
    0.125,
    0.0625,
    0.03125,
    0.015625,
    0.0078125,
    0.00390625,
    0.001953125,
    0.0009765625,
    0.00048828125,
    0.000244140625,
];

#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    /// `lo ≤ u ≤ hi` componentwise; infinite bounds allowed.
    Box { lo: DVector<f64>, hi: DVector<f64> },
    /// `|u − center| ≤ radius`.
    Ball { center: DVector<f64>, radius: f64 },
    /// `⟨normal, u⟩ ≤ offset`.
    Halfspace { normal: DVector<f64>, offset: f64 },
    /// `a u ≤ b`, rows of `a` being constraint normals.
    Polytope { a: DMatrix<f64>, b: DVector<f64> },
    /// A finite list of points.
    Finite { points: Vec<DVector<f64>> },
}

impl ControlSet {
    pub fn unconstrained(d: usize) -> Self {
        ControlSet::Box {
            lo: DVector::from_element(d, f64::NEG_INFINITY),
            hi: DVector::from_element(d, f64::INFINITY),
        }
    }

    pub fn new_box(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("box bounds", lo.len(), hi.len()));
        }
        if lo.is_empty() {
            return Err(Error::InvalidParameter("control dimension must be positive".into()));
        }
        for (l, h) in lo.iter().zip(hi.iter()) {
            if l.is_nan() || h.is_nan() || l > h || *l == f64::INFINITY || *h == f64::NEG_INFINITY {
                return Err(Error::InvalidParameter(format!("empty box interval [{l}, {h}]")));
            }
        }
        Ok(ControlSet::Box { lo, hi })
    }

    pub fn new_ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::InvalidParameter("control dimension must be positive".into()));
        }
        if !(radius >= 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid ball radius {radius}")));
        }
        Ok(ControlSet::Ball { center, radius })
    }

    pub fn new_halfspace(normal: DVector<f64>, offset: f64) -> Result<Self> {
        if normal.is_empty() {
            return Err(Error::InvalidParameter("control dimension must be positive".into()));
        }
        if !(normal.norm() > 0.0) || !offset.is_finite() || normal.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("halfspace needs a finite nonzero normal".into()));
        }
        Ok(ControlSet::Halfspace { normal, offset })
    }

    /// Rejects empty polytopes by projecting the origin and checking the result.
    pub fn new_polytope(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::dim("polytope rows", a.nrows(), b.len()));
        }
        if a.ncols() == 0 {
            return Err(Error::InvalidParameter("control dimension must be positive".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("polytope data must be finite".into()));
        }
        for i in 0..a.nrows() {
            if a.row(i).norm() == 0.0 {
                return Err(Error::InvalidParameter(format!("polytope row {i} is zero")));
            }
        }
        let p = project_polyhedron(&a, &b, &DVector::zeros(a.ncols()));
        let viol = max_violation(&a, &b, &p);
        if viol > 1e-7 * (1.0 + b.amax()) {
            return Err(Error::InvalidParameter(format!(
                "polytope is empty (violation {viol:e})"
            )));
        }
        Ok(ControlSet::Polytope { a, b })
    }

    pub fn new_finite(points: Vec<DVector<f64>>) -> Result<Self> {
        let d = match points.first() {
            Some(p) if !p.is_empty() => p.len(),
            _ => return Err(Error::InvalidParameter("finite set needs at least one point".into())),
        };
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::dim("finite set point", d, p.len()));
        }
        if points.iter().flat_map(|p| p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("finite set points must be finite".into()));
        }
        Ok(ControlSet::Finite { points })
    }

    pub fn family(&self) -> &'static str {
        match self {
            ControlSet::Box { .. } => "box",
            ControlSet::Ball { .. } => "ball",
            ControlSet::Halfspace { .. } => "halfspace",
            ControlSet::Polytope { .. } => "polytope",
            ControlSet::Finite { .. } => "finite",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lo, .. } => lo.len(),
            ControlSet::Ball { center, .. } => center.len(),
            ControlSet::Halfspace { normal, .. } => normal.len(),
            ControlSet::Polytope { a, .. } => a.ncols(),
            ControlSet::Finite { points } => points[0].len(),
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, ControlSet::Finite { points } if points.len() > 1)
    }

    pub fn is_compact(&self) -> bool {
        match self {
            ControlSet::Box { lo, hi } => lo.iter().chain(hi.iter()).all(|v| v.is_finite()),
            ControlSet::Ball { .. } | ControlSet::Finite { .. } => true,
            ControlSet::Halfspace { .. } => false,
            ControlSet::Polytope { a, b } => polytope_is_bounded(a, b),
        }
    }

    /// Nearest point of `U`; ties in the finite family go to the
    /// lexicographically smallest point.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlSet::Box { lo, hi } => DVector::from_iterator(
                u.len(),
                u.iter().zip(lo.iter().zip(hi.iter())).map(|(x, (l, h))| x.clamp(*l, *h)),
            ),
            ControlSet::Ball { center, radius } => {
                let diff = u - center;
                let r = diff.norm();
                if r <= *radius {
                    u.clone()
                } else {
                    center + diff * (*radius / r)
                }
            }
            ControlSet::Halfspace { normal, offset } => {
                let excess = normal.dot(u) - offset;
                if excess <= 0.0 {
                    u.clone()
                } else {
                    u - normal * (excess / normal.norm_squared())
                }
            }
            ControlSet::Polytope { a, b } => project_polyhedron(a, b, u),
            ControlSet::Finite { points } => {
                let mut best = &points[0];
                let mut best_d = (u - best).norm_squared();
                for p in &points[1..] {
                    let d = (u - p).norm_squared();
                    if d < best_d || (d == best_d && lex_less(p, best)) {
                        best = p;
                        best_d = d;
                    }
                }
                best.clone()
            }
        }
    }

    pub fn distance(&self, u: &DVector<f64>) -> f64 {
        (u - self.project(u)).norm()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim() && self.distance(u) <= TOL_MEMBERSHIP
    }

    fn check_member(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::dim("control point", self.dim(), u.len()));
        }
        let distance = self.distance(u);
        if distance > TOL_MEMBERSHIP {
            return Err(Error::NotInSet { distance });
        }
        Ok(())
    }

    fn check_dir(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::dim("control direction", self.dim(), v.len()));
        }
        Ok(())
    }

    /// Projection of `v` onto the adjacent cone `T_U(u)`. The caller
    /// guarantees `u ∈ U`.
    pub fn tangent_project(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlSet::Box { lo, hi } => DVector::from_iterator(
                v.len(),
                (0..v.len()).map(|i| {
                    let at_lo = u[i] - lo[i] <= TOL_ACTIVE;
                    let at_hi = hi[i] - u[i] <= TOL_ACTIVE;
                    match (at_lo, at_hi) {
                        (true, true) => 0.0,
                        (true, false) => v[i].max(0.0),
                        (false, true) => v[i].min(0.0),
                        (false, false) => v[i],
                    }
                }),
            ),
            ControlSet::Ball { center, radius } => {
                let diff = u - center;
                if *radius == 0.0 {
                    return DVector::zeros(v.len());
                }
                if diff.norm() < radius - TOL_ACTIVE {
                    return v.clone();
                }
                let n = &diff / diff.norm();
                let out = n.dot(v);
                if out > 0.0 {
                    v - n * out
                } else {
                    v.clone()
                }
            }
            ControlSet::Halfspace { normal, offset } => {
                if normal.dot(u) - offset < -TOL_ACTIVE * normal.norm() {
                    return v.clone();
                }
                let out = normal.dot(v);
                if out > 0.0 {
                    v - normal * (out / normal.norm_squared())
                } else {
                    v.clone()
                }
            }
            ControlSet::Polytope { a, b } => {
                let active = polytope_active(a, b, u);
                if active.is_empty() {
                    return v.clone();
                }
                let sub = a.select_rows(active.iter());
                project_polyhedron(&sub, &DVector::zeros(active.len()), v)
            }
            ControlSet::Finite { .. } => DVector::zeros(v.len()),
        }
    }

    /// `dist(v, T_U(u))`, the limit of `dist(u + εv, U)/ε`.
    pub fn adjacent_cone_residual(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_member(u)?;
        self.check_dir(v)?;
        Ok((v - self.tangent_project(u, v)).norm())
    }

    /// `sup{⟨ξ, v⟩ : v ∈ T_U(u), |v| ≤ 1}` clipped at zero, which equals the
    /// norm of the projection of `ξ` onto the tangent cone.
    pub fn normal_cone_residual(&self, u: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        self.check_member(u)?;
        self.check_dir(xi)?;
        Ok(self.tangent_project(u, xi).norm())
    }

    /// Limit of `dist(u + εv + ε²h, U)/ε²` for `v ∈ T_U(u)`.
    pub fn second_adjacent_residual(
        &self,
        u: &DVector<f64>,
        v: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<f64> {
        let first = self.adjacent_cone_residual(u, v)?;
        self.check_dir(h)?;
        if first > TOL_TANGENT * v.norm().max(1.0) {
            return Err(Error::NotTangent { residual: first });
        }
        let zero = |x: f64, scale: f64| x.abs() <= TOL_ACTIVE * scale.max(1.0);
        Ok(match self {
            ControlSet::Box { lo, hi } => {
                let mut s = 0.0;
                for i in 0..u.len() {
                    let at_lo = u[i] - lo[i] <= TOL_ACTIVE;
                    let at_hi = hi[i] - u[i] <= TOL_ACTIVE;
                    let r = match (at_lo, at_hi) {
                        (true, true) => h[i].abs(),
                        (true, false) if zero(v[i], 1.0) => (-h[i]).max(0.0),
                        (false, true) if zero(v[i], 1.0) => h[i].max(0.0),
                        _ => 0.0,
                    };
                    s += r * r;
                }
                s.sqrt()
            }
            ControlSet::Ball { center, radius } => {
                if *radius == 0.0 {
                    return Ok(h.norm());
                }
                let diff = u - center;
                if diff.norm() < radius - TOL_ACTIVE {
                    return Ok(0.0);
                }
                let n = &diff / diff.norm();
                if zero(n.dot(v), v.norm()) {
                    (n.dot(h) + v.norm_squared() / (2.0 * radius)).max(0.0)
                } else {
                    0.0
                }
            }
            ControlSet::Halfspace { normal, offset } => {
                let nn = normal.norm();
                if normal.dot(u) - offset < -TOL_ACTIVE * nn {
                    return Ok(0.0);
                }
                if zero(normal.dot(v) / nn, v.norm()) {
                    (normal.dot(h) / nn).max(0.0)
                } else {
                    0.0
                }
            }
            ControlSet::Polytope { a, b } => {
                let active: Vec<usize> = polytope_active(a, b, u)
                    .into_iter()
                    .filter(|&i| {
                        let row = a.row(i);
                        zero(row.dot(&v.transpose()), row.norm() * v.norm())
                    })
                    .collect();
                if active.is_empty() {
                    0.0
                } else {
                    let sub = a.select_rows(active.iter());
                    let p = project_polyhedron(&sub, &DVector::zeros(active.len()), h);
                    (h - p).norm()
                }
            }
            ControlSet::Finite { .. } => h.norm(),
        })
    }

    /// Ladder estimate of the adjacent residual.
    pub fn adjacent_cone_residual_sampled(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_member(u)?;
        self.check_dir(v)?;
        Ok(self.ladder(|e| self.distance(&(u + v * e)) / e))
    }

    /// Ladder estimate of the second-order adjacent residual.
    pub fn second_adjacent_residual_sampled(
        &self,
        u: &DVector<f64>,
        v: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<f64> {
        self.check_member(u)?;
        self.check_dir(v)?;
        self.check_dir(h)?;
        Ok(self.ladder(|e| self.distance(&(u + v * e + h * (e * e))) / (e * e)))
    }

    fn ladder(&self, q: impl Fn(f64) -> f64) -> f64 {
        let n = EPS_LADDER.len();
        q(EPS_LADDER[n - 2]).max(q(EPS_LADDER[n - 1]))
    }
}

fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn polytope_active(a: &DMatrix<f64>, b: &DVector<f64>, u: &DVector<f64>) -> Vec<usize> {
    (0..a.nrows())
        .filter(|&i| {
            let row = a.row(i);
            row.dot(&u.transpose()) - b[i] >= -TOL_ACTIVE * row.norm().max(1.0)
        })
        .collect()
}

fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (a * x - b).iter().fold(0.0f64, |m, v| m.max(*v))
}

/// Bounded iff no nonzero direction `w` satisfies `a w ≤ 0`; checked on the
/// recession cone by projecting each coordinate direction and its negative.
fn polytope_is_bounded(a: &DMatrix<f64>, _b: &DVector<f64>) -> bool {
    let d = a.ncols();
    let zeros = DVector::zeros(a.nrows());
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(d);
            e[i] = s;
            if project_polyhedron(a, &zeros, &e).norm() > 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Euclidean projection onto `{x : a x ≤ b}` by Hildreth's dual coordinate
/// ascent, followed by an exact solve on the detected active set.
pub(crate) fn project_polyhedron(a: &DMatrix<f64>, b: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let k = a.nrows();
    if k == 0 {
        return y.clone();
    }
    let norms: Vec<f64> = (0..k).map(|i| a.row(i).norm_squared()).collect();
    let scale = 1.0 + y.amax() + b.amax();
    let mut x = y.clone();
    let mut lambda = vec![0.0; k];
    for _ in 0..20_000 {
        let mut change = 0.0f64;
        for i in 0..k {
            let row = a.row(i);
            let r = (row.dot(&x.transpose()) - b[i]) / norms[i];
            let new = (lambda[i] + r).max(0.0);
            let step = new - lambda[i];
            if step != 0.0 {
                x -= row.transpose() * step;
                lambda[i] = new;
                change = change.max(step.abs() * norms[i].sqrt());
            }
        }
        if change <= 1e-15 * scale {
            break;
        }
    }

    let active: Vec<usize> = (0..k)
        .filter(|&i| lambda[i] > 1e-13 * scale || a.row(i).dot(&x.transpose()) - b[i] > -1e-12 * scale)
        .collect();
    if active.is_empty() {
        return x;
    }
    let sub = a.select_rows(active.iter());
    let rhs = &sub * y - b.select_rows(active.iter());
    let gram = &sub * sub.transpose();
    let mu = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => match gram.pseudo_inverse(1e-12) {
            Ok(pinv) => pinv * rhs,
            Err(_) => return x,
        },
    };
    let polished = y - sub.transpose() * &mu;
    let dual_ok = mu.iter().all(|m| *m >= -1e-12 * scale);
    let primal_ok = max_violation(a, b, &polished) <= 1e-12 * scale;
    if dual_ok && primal_ok {
        polished
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn unit_box(d: usize) -> ControlSet {
        ControlSet::new_box(DVector::zeros(d), DVector::from_element(d, 1.0)).unwrap()
    }

    #[test]
    fn adjacent_examples() {
        let b = unit_box(2);
        assert_eq!(b.adjacent_cone_residual(&v(&[0.5, 0.5]), &v(&[3.0, -7.0])).unwrap(), 0.0);
        assert_eq!(b.adjacent_cone_residual(&v(&[0.0, 0.5]), &v(&[-1.0, 0.0])).unwrap(), 1.0);
        let f = ControlSet::new_finite(vec![v(&[0.0, 0.0]), v(&[1.0, 2.0])]).unwrap();
        let dir = v(&[3.0, 4.0]);
        assert_eq!(f.adjacent_cone_residual(&v(&[1.0, 2.0]), &dir).unwrap(), 5.0);
    }

    #[test]
    fn normal_examples() {
        assert_eq!(unit_box(2).normal_cone_residual(&v(&[0.3, 0.6]), &v(&[0.0, 0.0])).unwrap(), 0.0);
        let b = unit_box(1);
        assert_eq!(b.normal_cone_residual(&v(&[0.0]), &v(&[-1.0])).unwrap(), 0.0);
        assert_eq!(b.normal_cone_residual(&v(&[0.0]), &v(&[1.0])).unwrap(), 1.0);
    }

    #[test]
    fn second_order_examples() {
        let b = unit_box(1);
        for h in [-5.0, -1.0, 0.0, 2.0] {
            assert_eq!(b.second_adjacent_residual(&v(&[0.0]), &v(&[1.0]), &v(&[h])).unwrap(), 0.0);
        }
        assert_eq!(b.second_adjacent_residual(&v(&[0.0]), &v(&[0.0]), &v(&[-1.0])).unwrap(), 1.0);
        assert_eq!(
            b.second_adjacent_residual(&v(&[0.0]), &v(&[-1.0]), &v(&[0.0])),
            Err(Error::NotTangent { residual: 1.0 })
        );
    }

    #[test]
    fn projection_examples() {
        assert_eq!(unit_box(2).project(&v(&[2.0, -1.0])), v(&[1.0, 0.0]));
        let ball = ControlSet::new_ball(v(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(ball.project(&v(&[3.0, 0.0])), v(&[1.0, 0.0]));
        let f = ControlSet::new_finite(vec![v(&[2.0, 0.0]), v(&[0.0, 0.0]), v(&[1.0, 5.0])]).unwrap();
        assert_eq!(f.project(&v(&[0.9, 0.1])), v(&[0.0, 0.0]));
        assert_eq!(f.project(&v(&[1.0, 0.0])), v(&[0.0, 0.0]));
    }

    #[test]
    fn membership_errors() {
        let b = unit_box(1);
        assert!(matches!(
            b.adjacent_cone_residual(&v(&[2.0]), &v(&[1.0])),
            Err(Error::NotInSet { .. })
        ));
        assert!(matches!(
            b.normal_cone_residual(&v(&[0.5, 0.5]), &v(&[1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn constructors_reject_empty_sets() {
        assert!(ControlSet::new_box(v(&[1.0]), v(&[0.0])).is_err());
        assert!(ControlSet::new_ball(v(&[0.0]), -1.0).is_err());
        assert!(ControlSet::new_halfspace(v(&[0.0, 0.0]), 1.0).is_err());
        assert!(ControlSet::new_finite(vec![]).is_err());
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert!(ControlSet::new_polytope(a.clone(), v(&[-1.0, -1.0])).is_err());
        assert!(ControlSet::new_polytope(a, v(&[1.0, 1.0])).is_ok());
    }

    #[test]
    fn ball_second_order_curvature() {
        let ball = ControlSet::new_ball(v(&[0.0, 0.0]), 2.0).unwrap();
        let u = v(&[2.0, 0.0]);
        let r = ball.second_adjacent_residual(&u, &v(&[0.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        assert!((r - 0.25).abs() < 1e-15);
        let r = ball.second_adjacent_residual(&u, &v(&[0.0, 1.0]), &v(&[-0.25, 3.0])).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn polytope_projection_matches_box() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let p = ControlSet::new_polytope(a, v(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        let b = unit_box(2);
        for y in [[2.0, -1.0], [0.3, 0.4], [-3.0, 0.5], [1.5, 1.5]] {
            let y = v(&y);
            assert!((p.project(&y) - b.project(&y)).norm() < 1e-14);
        }
        assert!(p.is_compact());
    }

    #[test]
    fn analytic_matches_ladder_on_triangle() {
        let a = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let t = ControlSet::new_polytope(a, v(&[0.0, 0.0, 1.0])).unwrap();
        let u = v(&[0.5, 0.5]);
        for dir in [[1.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [0.2, -0.7]] {
            let dir = v(&dir);
            let exact = t.adjacent_cone_residual(&u, &dir).unwrap();
            let sampled = t.adjacent_cone_residual_sampled(&u, &dir).unwrap();
            assert!((exact - sampled).abs() < 1e-9, "{exact} vs {sampled}");
        }
        let vt = v(&[1.0, -1.0]);
        let h = v(&[0.4, 0.1]);
        let exact = t.second_adjacent_residual(&u, &vt, &h).unwrap();
        let sampled = t.second_adjacent_residual_sampled(&u, &vt, &h).unwrap();
        assert!((exact - 0.5f64.sqrt() * 0.5).abs() < 1e-12);
        assert!((exact - sampled).abs() < 1e-9);
    }

    fn random_set(kind: u8, seed: &[f64]) -> ControlSet {
        match kind {
            0 => unit_box(2),
            1 => ControlSet::new_ball(v(&[seed[0], seed[1]]), 1.0 + seed[2].abs()).unwrap(),
            _ => ControlSet::new_halfspace(v(&[seed[0], 1.0 + seed[1].abs()]), seed[2]).unwrap(),
        }
    }

    proptest! {
        #[test]
        fn convex_normal_cone_equivalence(kind in 0u8..3, seed in proptest::collection::vec(-1.0f64..1.0, 3),
                                          w in proptest::collection::vec(-2.0f64..2.0, 2),
                                          xi in proptest::collection::vec(-2.0f64..2.0, 2),
                                          samples in proptest::collection::vec(-4.0f64..4.0, 80)) {
            let set = random_set(kind, &seed);
            let u = set.project(&v(&w));
            let xi = v(&xi);
            let res = set.normal_cone_residual(&u, &xi).unwrap();
            if res <= 1e-12 {
                for pair in samples.chunks(2) {
                    let y = set.project(&v(pair));
                    prop_assert!(xi.dot(&(y - &u)) <= 1e-9);
                }
            } else {
                let dir = set.tangent_project(&u, &xi);
                let y = set.project(&(&u + dir * 1e-3));
                prop_assert!(xi.dot(&(y - &u)) > 0.0);
            }
        }

        #[test]
        fn residuals_positively_homogeneous(kind in 0u8..3, seed in proptest::collection::vec(-1.0f64..1.0, 3),
                                            w in proptest::collection::vec(-2.0f64..2.0, 2),
                                            d in proptest::collection::vec(-2.0f64..2.0, 2),
                                            alpha in 0.01f64..10.0) {
            let set = random_set(kind, &seed);
            let u = set.project(&v(&w));
            let d = v(&d);
            let r1 = set.adjacent_cone_residual(&u, &d).unwrap();
            let r2 = set.adjacent_cone_residual(&u, &(&d * alpha)).unwrap();
            prop_assert!((r2 - alpha * r1).abs() <= 1e-12 * (1.0 + r2));
            let n1 = set.normal_cone_residual(&u, &d).unwrap();
            let n2 = set.normal_cone_residual(&u, &(&d * alpha)).unwrap();
            prop_assert!((n2 - alpha * n1).abs() <= 1e-12 * (1.0 + n2));
        }
    }
}
