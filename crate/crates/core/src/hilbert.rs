//! Truncated Hilbert-space kernel.
//!
//! The generator `A` is diagonal in the retained basis, so the semigroup acts
//! mode by mode as `exp(λₖ t)`. Noise space is `ℝᵐ` and Hilbert–Schmidt
//! operators from it into the state space are plain `n × m` matrices with the
//! Frobenius pairing.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSpace {
    eigenvalues: Vec<f64>,
}

impl TruncatedSpace {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidParameter(
                "truncated space needs at least one mode".into(),
            ));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eigenvalue {bad} is not finite"
            )));
        }
        Ok(Self { eigenvalues })
    }

    /// First `n` Dirichlet Laplacian modes on the unit interval: `λₖ = −k²π²`.
    pub fn dirichlet_laplacian(n: usize) -> Result<Self> {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        Self::new((1..=n).map(|k| -((k * k) as f64) * pi2).collect())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Diagonal of `S(t)`.
    pub fn semigroup_factors(&self, t: f64) -> Result<DVector<f64>> {
        if !(t >= 0.0) {
            return Err(Error::NegativeTime(t));
        }
        Ok(DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|l| (l * t).exp()),
        ))
    }

    pub fn semigroup_apply(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("semigroup_apply", self.dim(), x.len()));
        }
        Ok(self.semigroup_factors(t)?.component_mul(x))
    }

    /// Dense matrix of the generator restricted to the retained modes.
    pub fn generator(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues))
    }
}

/// Element of the truncated Hilbert–Schmidt class `𝓛₂⁰`: an `n × m` matrix
/// mapping noise coordinates into state coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct HsOperator {
    entries: DMatrix<f64>,
}

impl HsOperator {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "Hilbert-Schmidt operator has non-finite entries".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, m),
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    pub fn norm(&self) -> f64 {
        self.entries.norm()
    }
}

impl From<DMatrix<f64>> for HsOperator {
    fn from(entries: DMatrix<f64>) -> Self {
        Self { entries }
    }
}

/// Frobenius inner product `⟨w₁, w₂⟩_{𝓛₂⁰}`.
pub fn hs_inner(w1: &HsOperator, w2: &HsOperator) -> Result<f64> {
    if w1.shape() != w2.shape() {
        let (r1, c1) = w1.shape();
        let (r2, c2) = w2.shape();
        return Err(Error::dim("hs_inner", r1 * c1, r2 * c2));
    }
    Ok(frobenius(&w1.entries, &w2.entries))
}

pub(crate) fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_frobenius(a: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                s += a[(i, j)] * a[(i, j)];
            }
        }
        s
    }

    #[test]
    fn identity_semigroup() {
        let space = TruncatedSpace::new(vec![0.0, 0.0]).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(space.semigroup_apply(5.0, &x).unwrap(), x);
    }

    #[test]
    fn semigroup_at_zero_is_identity() {
        let space = TruncatedSpace::dirichlet_laplacian(3).unwrap();
        let x = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        assert_eq!(space.semigroup_apply(0.0, &x).unwrap(), x);
    }

    #[test]
    fn half_decay() {
        let space = TruncatedSpace::new(vec![-1.0]).unwrap();
        let y = space
            .semigroup_apply(std::f64::consts::LN_2, &DVector::from_vec(vec![4.0]))
            .unwrap();
        assert!((y[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let space = TruncatedSpace::dirichlet_laplacian(2).unwrap();
        assert_eq!(
            space.semigroup_apply(-1.0, &DVector::zeros(2)),
            Err(Error::NegativeTime(-1.0))
        );
        assert!(matches!(
            space.semigroup_apply(1.0, &DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
        assert!(TruncatedSpace::new(vec![]).is_err());
        assert!(TruncatedSpace::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn hs_inner_examples() {
        let w = HsOperator::from(DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]));
        assert_eq!(hs_inner(&w, &HsOperator::zeros(2, 3)).unwrap(), 0.0);
        let i2 = HsOperator::from(DMatrix::identity(2, 2));
        assert_eq!(hs_inner(&i2, &i2).unwrap(), 2.0);
        assert!((hs_inner(&w, &w).unwrap() - naive_frobenius(w.entries())).abs() < 1e-14);
        assert!(hs_inner(&w, &i2).is_err());
    }

    proptest! {
        #[test]
        fn semigroup_property(s in 0.0f64..0.5, t in 0.0f64..0.5, x in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let space = TruncatedSpace::dirichlet_laplacian(4).unwrap();
            let x = DVector::from_vec(x);
            let direct = space.semigroup_apply(s + t, &x).unwrap();
            let composed = space.semigroup_apply(s, &space.semigroup_apply(t, &x).unwrap()).unwrap();
            for (a, b) in direct.iter().zip(composed.iter()) {
                prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn hs_inner_symmetric_bilinear(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            c in proptest::collection::vec(-3.0f64..3.0, 6),
            alpha in -2.0f64..2.0,
        ) {
            let a = HsOperator::from(DMatrix::from_vec(3, 2, a));
            let b = HsOperator::from(DMatrix::from_vec(3, 2, b));
            let c = HsOperator::from(DMatrix::from_vec(3, 2, c));
            let ab = hs_inner(&a, &b).unwrap();
            prop_assert!((ab - hs_inner(&b, &a).unwrap()).abs() < 1e-12);
            let combo = HsOperator::from(a.entries() * alpha + b.entries());
            let lhs = hs_inner(&combo, &c).unwrap();
            let rhs = alpha * hs_inner(&a, &c).unwrap() + hs_inner(&b, &c).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
