//! Common-noise finite differences of the cost along `ū + εv + ε²h`.

use crate::forward::{path_costs, simulate, AdaptedField, ControlPolicy, Estimate, NoiseEnsemble, ProblemSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionQuotients {
    /// `[J(ū+εv+ε²h) − J(ū)]/ε`.
    pub first: f64,
    /// `[J(ū+εv+ε²h) − J(ū) − ε·dJ(v)]/ε²`.
    pub second: f64,
    /// Two-rung Richardson limit `2q(ε/2) − q(ε)` of the first quotient,
    /// used as `dJ(v)`.
    pub derivative: f64,
}

fn perturbed(base: &AdaptedField, v: &AdaptedField, h: &AdaptedField, eps: f64) -> Result<AdaptedField> {
    base.axpy(eps, v)?.axpy(eps * eps, h)
}

fn costs(spec: &ProblemSpec, control: AdaptedField, noise: &NoiseEnsemble) -> Result<Vec<f64>> {
    let traj = simulate(spec, &ControlPolicy::Field(control), noise)?;
    path_costs(spec, &traj, noise.dt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Expansion quotients on the ensemble `noise`; every cost is evaluated on
/// the same increments and `base` is the realized control `ū`.
pub fn finite_diff_expansion(
    spec: &ProblemSpec,
    base: &AdaptedField,
    v: &AdaptedField,
    h: &AdaptedField,
    eps: f64,
    noise: &NoiseEnsemble,
) -> Result<ExpansionQuotients> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("step {eps} must be positive")));
    }
    let j0 = mean(&costs(spec, base.clone(), noise)?);
    let j1 = mean(&costs(spec, perturbed(base, v, h, eps)?, noise)?);
    let j2 = mean(&costs(spec, perturbed(base, v, h, 0.5 * eps)?, noise)?);
    let q1 = (j1 - j0) / eps;
    let q1_half = (j2 - j0) / (0.5 * eps);
    let derivative = 2.0 * q1_half - q1;
    Ok(ExpansionQuotients {
        first: q1,
        second: (j1 - j0 - eps * derivative) / (eps * eps),
        derivative,
    })
}

/// `[J(ū+εv) − 2J(ū) + J(ū−εv)]/ε²` as a path estimate.
pub fn second_difference(spec: &ProblemSpec, base: &AdaptedField, v: &AdaptedField, eps: f64, noise: &NoiseEnsemble) -> Result<Estimate> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("step {eps} must be positive")));
    }
    let c0 = costs(spec, base.clone(), noise)?;
    let cp = costs(spec, base.axpy(eps, v)?, noise)?;
    let cm = costs(spec, base.axpy(-eps, v)?, noise)?;
    let samples: Vec<f64> = (0..c0.len())
        .map(|p| (cp[p] - 2.0 * c0[p] + cm[p]) / (eps * eps))
        .collect();
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::{DMatrix, DVector};

    use super::*;
    use crate::cones::ControlSet;
    use crate::forward::{FieldShape, LqFamily, LqParams};
    use crate::hilbert::TruncatedSpace;

    fn spec() -> ProblemSpec {
        let mut p = LqParams::zeros(2, 1, 1);
        p.b = DMatrix::from_column_slice(2, 1, &[1.0, -0.5]);
        p.sigma = DMatrix::from_element(2, 1, 0.3);
        p.m = DMatrix::identity(2, 2);
        p.g = DMatrix::identity(2, 2);
        ProblemSpec::new(
            TruncatedSpace::new(vec![-1.0, -2.0]).unwrap(),
            Arc::new(LqFamily::new(p).unwrap()),
            ControlSet::unconstrained(1),
            1.0,
            DVector::from_element(2, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn zero_perturbation() {
        let spec = spec();
        let noise = NoiseEnsemble::generate(1, 32, 8, 1, 1.0).unwrap();
        let zero = AdaptedField::zeros(FieldShape::Control(1), 32, 8);
        let q = finite_diff_expansion(&spec, &zero, &zero, &zero, 0.1, &noise).unwrap();
        assert_eq!((q.first, q.second), (0.0, 0.0));
    }

    #[test]
    fn quadratic_cost_has_constant_second_quotient() {
        let spec = spec();
        let noise = NoiseEnsemble::generate(1, 32, 8, 1, 1.0).unwrap();
        let base = AdaptedField::from_fn(FieldShape::Control(1), 32, 8, |p, k, out| out[0] = 0.1 * ((p + k) % 3) as f64);
        let v = AdaptedField::from_fn(FieldShape::Control(1), 32, 8, |_, k, out| out[0] = (k as f64).cos());
        let zero = AdaptedField::zeros(FieldShape::Control(1), 32, 8);
        let a = finite_diff_expansion(&spec, &base, &v, &zero, 0.2, &noise).unwrap();
        let b = finite_diff_expansion(&spec, &base, &v, &zero, 0.05, &noise).unwrap();
        assert!((a.second - b.second).abs() < 1e-8 * (1.0 + a.second.abs()));
        let sd = second_difference(&spec, &base, &v, 0.1, &noise).unwrap();
        assert!((2.0 * a.second - sd.mean).abs() < 1e-8 * (1.0 + sd.mean.abs()));
    }
}
