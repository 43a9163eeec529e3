//! Riccati and Lyapunov references for the linear-quadratic family.
//!
//! With `V(t, x) = ½xᵀP x + sᵀx + c` and `Â = diag(λ) + F`, the continuous
//! value function solves
//!
//! ```text
//! −Ṗ = ÂᵀP + PÂ + M + Σ_j C_jᵀPC_j − NᵀR̂⁻¹N,
//! −ṡ = Âᵀs + P a0 + Σ_j C_jᵀPσ_j + q_x − NᵀR̂⁻¹w,
//! −ċ = sᵀa0 + ½Σ_j σ_jᵀPσ_j + c0 − ½wᵀR̂⁻¹w,
//! ```
//!
//! with `R̂ = R + Σ_j D_jᵀPD_j`, `N = BᵀP + Σ_j D_jᵀPC_j`,
//! `w = Bᵀs + Σ_j D_jᵀPσ_j + q_u` and optimal feedback `u = −R̂⁻¹(Nx + w)`.

use nalgebra::{DMatrix, DVector};

use crate::forward::{AffineFeedback, LqParams};
use crate::hilbert::TruncatedSpace;
use crate::{Error, Result};

/// Linear-quadratic test data. `lambda` holds the diagonal of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LqData {
    pub lambda: DVector<f64>,
    pub params: LqParams,
}

impl LqData {
    pub fn new(space: &TruncatedSpace, params: LqParams) -> Result<Self> {
        params.validate().map_err(Error::InvalidParameter)?;
        let (n, _, _) = params.dims();
        if space.dim() != n {
            return Err(Error::dim("LQ state dimension", space.dim(), n));
        }
        let sym = |name: &str, a: &DMatrix<f64>, strict: bool| -> Result<()> {
            if (a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
                return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
            }
            let min = a.clone().symmetric_eigenvalues().min();
            let bad = if strict { min <= 0.0 } else { min < -1e-12 * a.amax().max(1.0) };
            if bad {
                let kind = if strict { "positive definite" } else { "positive semidefinite" };
                return Err(Error::InvalidParameter(format!("{name} is not {kind} (min eigenvalue {min})")));
            }
            Ok(())
        };
        sym("R", &params.r, true)?;
        sym("M", &params.m, false)?;
        sym("G", &params.g, false)?;
        Ok(Self {
            lambda: DVector::from_column_slice(space.eigenvalues()),
            params,
        })
    }

    fn a_hat(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.lambda) + &self.params.f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiccatiKind {
    /// Continuous-time equations, integrated on a refined grid.
    Continuous,
    /// Exact dynamic programming for the exponential-Euler scheme.
    Discrete,
}

/// Value function coefficients at the solver grid `t_k = kΔt`, `k = 0..=N`,
/// and the optimal affine feedback `u_k = −K_k x − k_k` for `k < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub kind: RiccatiKind,
    pub dt: f64,
    pub p: Vec<DMatrix<f64>>,
    pub s: Vec<DVector<f64>>,
    pub c: Vec<f64>,
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.gains.len()
    }

    /// `V(0, x0)`.
    pub fn value(&self, x0: &DVector<f64>) -> f64 {
        0.5 * x0.dot(&(&self.p[0] * x0)) + self.s[0].dot(x0) + self.c[0]
    }

    pub fn feedback(&self) -> AffineFeedback {
        AffineFeedback {
            gains: self.gains.iter().map(|k| -k).collect(),
            offsets: self.offsets.iter().map(|k| -k).collect(),
        }
    }
}

fn check_psd(p: &DMatrix<f64>, step: usize) -> Result<()> {
    let min = p.clone().symmetric_eigenvalues().min();
    if !min.is_finite() || min < -1e-9 * p.amax().max(1.0) {
        return Err(Error::Riccati { step, min_eigenvalue: min });
    }
    Ok(())
}

fn spd_inverse(a: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    match sym.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::Riccati {
            step,
            min_eigenvalue: sym.symmetric_eigenvalues().min(),
        }),
    }
}

struct Rhs {
    dp: DMatrix<f64>,
    ds: DVector<f64>,
    dc: f64,
}

/// Backward-time derivatives `(−Ṗ, −ṡ, −ċ)` and the feedback pair.
fn continuous_rhs(lq: &LqData, a: &DMatrix<f64>, p: &DMatrix<f64>, s: &DVector<f64>, step: usize) -> Result<(Rhs, DMatrix<f64>, DVector<f64>)> {
    let q = &lq.params;
    let mut rhat = q.r.clone();
    let mut nmat = q.b.transpose() * p;
    let mut w = q.b.transpose() * s + &q.q_u;
    let mut dp = a.transpose() * p + p * a + &q.m;
    let mut ds = a.transpose() * s + p * &q.a0 + &q.q_x;
    let mut dc = s.dot(&q.a0) + q.c0;
    for j in 0..q.c.len() {
        let (cj, dj, sj) = (&q.c[j], &q.d[j], q.sigma.column(j));
        rhat += dj.transpose() * p * dj;
        nmat += dj.transpose() * p * cj;
        w += dj.transpose() * (p * sj);
        dp += cj.transpose() * p * cj;
        ds += cj.transpose() * (p * sj);
        dc += 0.5 * sj.dot(&(p * sj));
    }
    let rinv = spd_inverse(&rhat, step)?;
    let gain = &rinv * &nmat;
    let offset = &rinv * &w;
    dp -= nmat.transpose() * &gain;
    ds -= nmat.transpose() * &offset;
    dc -= 0.5 * w.dot(&offset);
    Ok((Rhs { dp: (&dp + dp.transpose()) * 0.5, ds, dc }, gain, offset))
}

/// Continuous Riccati system integrated backward with classical RK4 using
/// `substeps` (at least 8) sub-intervals per solver step.
pub fn riccati_solve(lq: &LqData, horizon: f64, steps: usize, substeps: usize) -> Result<RiccatiSolution> {
    if steps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("Riccati grid needs positive steps and horizon".into()));
    }
    let substeps = substeps.max(8);
    let dt = horizon / steps as f64;
    let hstep = dt / substeps as f64;
    let a = lq.a_hat();
    let q = &lq.params;
    let mut p = q.g.clone();
    let mut s = q.g1.clone();
    let mut c = q.g0;
    let mut ps = vec![p.clone()];
    let mut ss = vec![s.clone()];
    let mut cs = vec![c];
    for k in (0..steps).rev() {
        for _ in 0..substeps {
            let (k1, _, _) = continuous_rhs(lq, &a, &p, &s, k)?;
            let (k2, _, _) = continuous_rhs(lq, &a, &(&p + &k1.dp * (0.5 * hstep)), &(&s + &k1.ds * (0.5 * hstep)), k)?;
            let (k3, _, _) = continuous_rhs(lq, &a, &(&p + &k2.dp * (0.5 * hstep)), &(&s + &k2.ds * (0.5 * hstep)), k)?;
            let (k4, _, _) = continuous_rhs(lq, &a, &(&p + &k3.dp * hstep), &(&s + &k3.ds * hstep), k)?;
            let w = hstep / 6.0;
            p += (&k1.dp + &k2.dp * 2.0 + &k3.dp * 2.0 + &k4.dp) * w;
            s += (&k1.ds + &k2.ds * 2.0 + &k3.ds * 2.0 + &k4.ds) * w;
            c += (k1.dc + 2.0 * k2.dc + 2.0 * k3.dc + k4.dc) * w;
        }
        p = (&p + p.transpose()) * 0.5;
        check_psd(&p, k)?;
        ps.push(p.clone());
        ss.push(s.clone());
        cs.push(c);
    }
    ps.reverse();
    ss.reverse();
    cs.reverse();
    let mut gains = Vec::with_capacity(steps);
    let mut offsets = Vec::with_capacity(steps);
    for k in 0..steps {
        let (_, g, o) = continuous_rhs(lq, &a, &ps[k], &ss[k], k)?;
        gains.push(g);
        offsets.push(o);
    }
    Ok(RiccatiSolution {
        kind: RiccatiKind::Continuous,
        dt,
        p: ps,
        s: ss,
        c: cs,
        gains,
        offsets,
    })
}

/// Exact dynamic programming for `x' = S(x + Δt(Fx + Bu + a0) + Σ_j b_j ΔW_j)`
/// with running cost `Δt f`. The resulting feedback is the optimal control of
/// the discretized problem.
pub fn discrete_riccati(lq: &LqData, horizon: f64, steps: usize) -> Result<RiccatiSolution> {
    if steps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("Riccati grid needs positive steps and horizon".into()));
    }
    let q = &lq.params;
    let n = lq.lambda.len();
    let dt = horizon / steps as f64;
    let sdiag = lq.lambda.map(|l| (l * dt).exp());
    let smat = DMatrix::from_diagonal(&sdiag);
    let l = &smat * (DMatrix::identity(n, n) + &q.f * dt);
    let bd = &smat * &q.b * dt;
    let e = &smat * &q.a0 * dt;
    let mut p = q.g.clone();
    let mut s = q.g1.clone();
    let mut c = q.g0;
    let (mut ps, mut ss, mut cs) = (vec![p.clone()], vec![s.clone()], vec![c]);
    let (mut gains, mut offsets) = (Vec::new(), Vec::new());
    for k in (0..steps).rev() {
        let pt = &smat * &p * &smat;
        let pe_s = &p * &e + &s;
        let mut huu = bd.transpose() * &p * &bd + &q.r * dt;
        let mut hux = bd.transpose() * &p * &l;
        let mut hu = bd.transpose() * &pe_s + &q.q_u * dt;
        let mut pn = l.transpose() * &p * &l + &q.m * dt;
        let mut sn = l.transpose() * &pe_s + &q.q_x * dt;
        let mut cn = c + 0.5 * e.dot(&(&p * &e)) + s.dot(&e) + q.c0 * dt;
        for j in 0..q.c.len() {
            let (cj, dj, sj) = (&q.c[j], &q.d[j], q.sigma.column(j));
            huu += dj.transpose() * &pt * dj * dt;
            hux += dj.transpose() * &pt * cj * dt;
            hu += dj.transpose() * (&pt * sj) * dt;
            pn += cj.transpose() * &pt * cj * dt;
            sn += cj.transpose() * (&pt * sj) * dt;
            cn += 0.5 * dt * sj.dot(&(&pt * sj));
        }
        let inv = spd_inverse(&huu, k)?;
        let gain = &inv * &hux;
        let offset = &inv * &hu;
        pn -= hux.transpose() * &gain;
        sn -= hux.transpose() * &offset;
        cn -= 0.5 * hu.dot(&offset);
        p = (&pn + pn.transpose()) * 0.5;
        check_psd(&p, k)?;
        s = sn;
        c = cn;
        ps.push(p.clone());
        ss.push(s.clone());
        cs.push(c);
        gains.push(gain);
        offsets.push(offset);
    }
    gains.reverse();
    offsets.reverse();
    ps.reverse();
    ss.reverse();
    cs.reverse();
    Ok(RiccatiSolution {
        kind: RiccatiKind::Discrete,
        dt,
        p: ps,
        s: ss,
        c: cs,
        gains,
        offsets,
    })
}

/// Deterministic second adjoint of the LQ family:
/// `−Ṗ₂ = ÂᵀP₂ + P₂Â + Σ_j C_jᵀP₂C_j − M`, `P₂(T) = −G`, by RK4 with
/// `substeps` (at least 8) sub-intervals per solver step. Returns `P₂(t_k)`,
/// `k = 0..=N`.
pub fn lyapunov_second_adjoint(lq: &LqData, horizon: f64, steps: usize, substeps: usize) -> Result<Vec<DMatrix<f64>>> {
    if steps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("Lyapunov grid needs positive steps and horizon".into()));
    }
    let substeps = substeps.max(8);
    let hstep = horizon / (steps * substeps) as f64;
    let a = lq.a_hat();
    let q = &lq.params;
    let rhs = |p: &DMatrix<f64>| {
        let mut d = a.transpose() * p + p * &a - &q.m;
        for cj in &q.c {
            d += cj.transpose() * p * cj;
        }
        d
    };
    let mut p = -q.g.clone();
    let mut out = vec![p.clone()];
    for _ in 0..steps {
        for _ in 0..substeps {
            let k1 = rhs(&p);
            let k2 = rhs(&(&p + &k1 * (0.5 * hstep)));
            let k3 = rhs(&(&p + &k2 * (0.5 * hstep)));
            let k4 = rhs(&(&p + &k3 * hstep));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hstep / 6.0);
        }
        out.push(p.clone());
    }
    out.reverse();
    Ok(out)
}
