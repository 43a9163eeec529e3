use std::sync::Arc;

use nalgebra::DVector;

use super::family::CoefficientFamily;
use crate::cones::ControlSet;
use crate::hilbert::TruncatedSpace;
use crate::{Error, Result};

/// Recorded constants of the standing assumptions. They are carried through
/// reports but do not enter the numerics, which always work with second
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub lipschitz: Option<f64>,
    pub integrability: Option<f64>,
    pub moment_order: f64,
}

impl Default for Metadata {
    fn default() -> Self {
        Self {
            lipschitz: None,
            integrability: None,
            moment_order: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub space: TruncatedSpace,
    pub noise_dim: usize,
    pub control_dim: usize,
    pub family: Arc<dyn CoefficientFamily>,
    pub control_set: ControlSet,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub metadata: Metadata,
}

impl ProblemSpec {
    pub fn new(
        space: TruncatedSpace,
        family: Arc<dyn CoefficientFamily>,
        control_set: ControlSet,
        horizon: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let (n, m, d) = family.dims();
        if n != space.dim() {
            return Err(Error::dim("family state dimension", space.dim(), n));
        }
        if x0.len() != n {
            return Err(Error::dim("initial state", n, x0.len()));
        }
        if control_set.dim() != d {
            return Err(Error::dim("control set dimension", d, control_set.dim()));
        }
        if m == 0 {
            return Err(Error::InvalidParameter("noise dimension must be positive".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon {horizon} must be positive")));
        }
        Ok(Self {
            space,
            noise_dim: m,
            control_dim: d,
            family,
            control_set,
            horizon,
            x0,
            metadata: Metadata::default(),
        })
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.space.dim()
    }

    /// Fails with a capability error unless the family supplies second
    /// derivatives, including the terminal Hessian.
    pub fn require_second_order(&self) -> Result<()> {
        let fam = &self.family;
        if fam.order() < 2 || fam.terminal_hessian(&self.x0).is_none() {
            return Err(Error::Capability {
                family: fam.name().to_string(),
                what: "second derivatives",
            });
        }
        Ok(())
    }
}
