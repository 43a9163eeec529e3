//! Least-squares estimation of conditional expectations given the state.
//!
//! The basis is the monomials of total degree `≤ degree` in the standardized
//! state coordinates. Coordinates without spread across paths are dropped, so
//! a step where the state is deterministic reduces to the sample mean.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::forward::AdaptedField;
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionConfig {
    pub degree: usize,
    /// Tikhonov weight relative to the mean diagonal of the Gram matrix. The
    /// constant term is not penalized.
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degree > 2 {
            return Err(Error::InvalidParameter(format!(
                "regression degree {} not supported (0, 1 or 2)",
                self.degree
            )));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidParameter(format!("ridge {} must be nonnegative", self.ridge)));
        }
        Ok(())
    }
}

/// Gram matrices above this condition number are reported as ill-conditioned.
pub const CONDITION_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionDiagnostics {
    pub step: usize,
    pub basis_len: usize,
    pub condition: f64,
    /// True when the Gram matrix was ill-conditioned or the Cholesky solve
    /// failed and an eigenvalue-clipped solve was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    offset: Vec<f64>,
    scale: Vec<f64>,
    kept: Vec<usize>,
    degree: usize,
}

impl Basis {
    /// Standardization fitted to the state at step `k`.
    pub fn fit(states: &AdaptedField, k: usize, degree: usize) -> Self {
        let n = states.width();
        let paths = states.paths();
        let mut mean = vec![0.0; n];
        for p in 0..paths {
            for (m, x) in mean.iter_mut().zip(states.get(p, k)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= paths as f64);
        let mut var = vec![0.0; n];
        for p in 0..paths {
            for ((v, x), m) in var.iter_mut().zip(states.get(p, k)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut kept = Vec::new();
        let mut scale = vec![1.0; n];
        for i in 0..n {
            let sd = (var[i] / paths as f64).sqrt();
            if sd > 1e-10 * (1.0 + mean[i].abs()) {
                kept.push(i);
                scale[i] = 1.0 / sd;
            }
        }
        Self {
            offset: mean,
            scale,
            kept,
            degree: if paths < 2 { 0 } else { degree },
        }
    }

    pub fn len(&self) -> usize {
        let q = self.kept.len();
        match self.degree {
            0 => 1,
            1 => 1 + q,
            _ => 1 + q + q * (q + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        if self.degree == 0 {
            return;
        }
        let z: Vec<f64> = self
            .kept
            .iter()
            .map(|&i| (x[i] - self.offset[i]) * self.scale[i])
            .collect();
        out[1..1 + z.len()].copy_from_slice(&z);
        if self.degree >= 2 {
            let mut idx = 1 + z.len();
            for i in 0..z.len() {
                for j in i..z.len() {
                    out[idx] = z[i] * z[j];
                    idx += 1;
                }
            }
        }
    }
}

struct Normal {
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
}

impl std::ops::AddAssign for Normal {
    fn add_assign(&mut self, other: Self) {
        self.gram += other.gram;
        self.rhs += other.rhs;
    }
}

/// Fitted coefficients. Features are the basis times each of `blocks`
/// per-path weights; block `b` occupies rows `b·len..(b+1)·len` of `coeffs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub basis: Basis,
    pub blocks: usize,
    pub coeffs: DMatrix<f64>,
}

impl Fit {
    /// Prediction of the first block, the plain conditional mean.
    pub fn predict(&self, x: &[f64]) -> DVector<f64> {
        self.predict_blocks(x).swap_remove(0)
    }

    /// Per-block predictions at `x`, each of length `q`.
    pub fn predict_blocks(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let len = self.basis.len();
        let mut phi = vec![0.0; len];
        self.basis.eval(x, &mut phi);
        let phi = DVector::from_vec(phi);
        (0..self.blocks)
            .map(|b| self.coeffs.rows(b * len, len).tr_mul(&phi))
            .collect()
    }
}

/// Regresses the `q` responses `target(p, out)` on the basis evaluated at the
/// state of step `k`.
pub fn regress<F>(
    states: &AdaptedField,
    k: usize,
    q: usize,
    cfg: &RegressionConfig,
    target: F,
) -> Result<(Fit, RegressionDiagnostics)>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    regress_blocks(states, k, 1, |_, w| w[0] = 1.0, q, cfg, target)
}

/// Regression on the products `φ(x_k) · w_b(p)`, `b < blocks`, with
/// `w_0 ≡ 1`. With `w_{j+1} = ΔW_j/√Δt` the blocks beyond the first carry
/// the martingale coefficients of the response.
///
/// The normal equations are accumulated in fixed blocks of paths and combined
/// in path order.
pub fn regress_blocks<W, F>(
    states: &AdaptedField,
    k: usize,
    blocks: usize,
    weights: W,
    q: usize,
    cfg: &RegressionConfig,
    target: F,
) -> Result<(Fit, RegressionDiagnostics)>
where
    W: Fn(usize, &mut [f64]) + Sync + Send,
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let basis = Basis::fit(states, k, cfg.degree);
    let blen = basis.len();
    let len = blen * blocks;
    let normal = par::blocked_sum(
        states.paths(),
        || Normal {
            gram: DMatrix::zeros(len, len),
            rhs: DMatrix::zeros(len, q),
        },
        |p, acc| {
            let mut phi = vec![0.0; blen];
            basis.eval(states.get(p, k), &mut phi);
            let mut w = vec![0.0; blocks];
            weights(p, &mut w);
            let feat: Vec<f64> = w.iter().flat_map(|wb| phi.iter().map(move |f| f * wb)).collect();
            let mut y = vec![0.0; q];
            target(p, &mut y);
            for a in 0..len {
                let fa = feat[a];
                if fa == 0.0 {
                    continue;
                }
                for b in a..len {
                    acc.gram[(a, b)] += fa * feat[b];
                }
                for (c, yc) in y.iter().enumerate() {
                    acc.rhs[(a, c)] += fa * yc;
                }
            }
        },
    );
    let mut gram = normal.gram;
    for a in 0..len {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    if gram.iter().chain(normal.rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "regression", path: 0, step: k });
    }

    let eig = SymmetricEigen::new(gram.clone());
    let max_e = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(*e));
    let min_e = eig.eigenvalues.iter().fold(f64::INFINITY, |m, e| m.min(*e));
    let condition = if min_e > 0.0 { max_e / min_e } else { f64::INFINITY };
    let lambda = cfg.ridge * gram.trace() / len as f64;

    let mut reg = gram;
    for a in 1..len {
        reg[(a, a)] += lambda;
    }
    let mut fallback = condition > CONDITION_LIMIT;
    let coeffs = match (fallback, reg.clone().cholesky()) {
        (false, Some(ch)) => ch.solve(&normal.rhs),
        _ => {
            fallback = true;
            let floor = cfg.ridge.max(1e-12) * max_e;
            let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| if e > floor { 1.0 / e } else { 0.0 }));
            &eig.eigenvectors * inv * eig.eigenvectors.transpose() * &normal.rhs
        }
    };
    Ok((
        Fit {
            basis,
            blocks,
            coeffs,
        },
        RegressionDiagnostics {
            step: k,
            basis_len: len,
            condition,
            fallback,
        },
    ))
}
