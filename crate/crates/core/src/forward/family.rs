//! Coefficient families: the drift `a`, diffusion `b`, running cost `f`,
//! terminal cost `g` and their derivatives.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

/// Second derivative of a vector-valued map: `data[o]` is the Hessian block
/// of output component `o`, of shape `rows × cols`. An empty `data` encodes an
/// identically zero tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub out: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<DMatrix<f64>>,
}

impl Tensor3 {
    pub fn zeros(out: usize, rows: usize, cols: usize) -> Self {
        Self {
            out,
            rows,
            cols,
            data: Vec::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.is_empty()
    }

    /// `(y, z) ↦ (yᵀ data[o] z)_o`.
    pub fn apply(&self, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        if self.is_zero() {
            return DVector::zeros(self.out);
        }
        DVector::from_iterator(self.out, self.data.iter().map(|h| y.dot(&(h * z))))
    }

    /// `Σ_o w_o data[o]`.
    pub fn contract(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.rows, self.cols);
        for (o, h) in self.data.iter().enumerate() {
            acc += h * w[o];
        }
        acc
    }
}

/// First derivatives at one point. `b_x[j]`, `b_u[j]` are the derivatives of
/// the `j`-th diffusion column.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet1 {
    pub a_x: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub b_x: Vec<DMatrix<f64>>,
    pub b_u: Vec<DMatrix<f64>>,
    pub f_x: DVector<f64>,
    pub f_u: DVector<f64>,
}

/// Second derivatives at one point. Diffusion tensors have `n·m` outputs
/// indexed column-major, output `j·n + i` being entry `(i, j)` of `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub a_xx: Tensor3,
    pub a_xu: Tensor3,
    pub a_uu: Tensor3,
    pub b_xx: Tensor3,
    pub b_xu: Tensor3,
    pub b_uu: Tensor3,
    pub f_xx: DMatrix<f64>,
    pub f_xu: DMatrix<f64>,
    pub f_uu: DMatrix<f64>,
}

pub trait CoefficientFamily: Send + Sync + Debug {
    fn name(&self) -> &str;
    /// `(n, m, d)`.
    fn dims(&self) -> (usize, usize, usize);
    /// Highest derivative order supplied by the jets (1 or 2).
    fn order(&self) -> usize;
    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `n × m`, column `j` multiplying the `j`-th Brownian increment.
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn running_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn terminal_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>>;
    fn jet1(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Jet1;
    fn jet2(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<Jet2>;
    /// True when `a` and `b` are affine and `f` is quadratic in `u`, so that
    /// the Hamiltonian is a quadratic function of the control.
    fn quadratic_in_control(&self) -> bool;
}

/// Linear-quadratic data:
/// `a = F x + B u + a0`, `b_j = C_j x + D_j u + σ_j`,
/// `f = ½xᵀMx + ½uᵀRu + q_xᵀx + q_uᵀu + c0`, `g = ½xᵀGx + g1ᵀx + g0`.
/// The generator of the space is not part of `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqParams {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a0: DVector<f64>,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub sigma: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub c0: f64,
    pub g: DMatrix<f64>,
    pub g1: DVector<f64>,
    pub g0: f64,
}

impl LqParams {
    /// Zero data except `R = I`.
    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        Self {
            f: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, d),
            a0: DVector::zeros(n),
            c: vec![DMatrix::zeros(n, n); m],
            d: vec![DMatrix::zeros(n, d); m],
            sigma: DMatrix::zeros(n, m),
            m: DMatrix::zeros(n, n),
            r: DMatrix::identity(d, d),
            q_x: DVector::zeros(n),
            q_u: DVector::zeros(d),
            c0: 0.0,
            g: DMatrix::zeros(n, n),
            g1: DVector::zeros(n),
            g0: 0.0,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.f.nrows(), self.sigma.ncols(), self.b.ncols())
    }

    /// Shape check of every block.
    pub fn validate(&self) -> Result<(), String> {
        let (n, m, d) = self.dims();
        let mut errs = Vec::new();
        let mut shape = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                errs.push(format!("{name} has shape {got:?}, expected {want:?}"));
            }
        };
        shape("F", self.f.shape(), (n, n));
        shape("B", self.b.shape(), (n, d));
        shape("a0", self.a0.shape(), (n, 1));
        shape("sigma", self.sigma.shape(), (n, m));
        shape("M", self.m.shape(), (n, n));
        shape("R", self.r.shape(), (d, d));
        shape("q_x", self.q_x.shape(), (n, 1));
        shape("q_u", self.q_u.shape(), (d, 1));
        shape("G", self.g.shape(), (n, n));
        shape("g1", self.g1.shape(), (n, 1));
        for c in &self.c {
            shape("C", c.shape(), (n, n));
        }
        for dd in &self.d {
            shape("D", dd.shape(), (n, d));
        }
        if self.c.len() != m || self.d.len() != m {
            errs.push(format!(
                "expected {m} C and D blocks, got {} and {}",
                self.c.len(),
                self.d.len()
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LqFamily {
    pub params: LqParams,
}

impl LqFamily {
    pub fn new(params: LqParams) -> crate::Result<Self> {
        params.validate().map_err(crate::Error::InvalidParameter)?;
        Ok(Self { params })
    }
}

impl CoefficientFamily for LqFamily {
    fn name(&self) -> &str {
        "lq"
    }

    fn dims(&self) -> (usize, usize, usize) {
        self.params.dims()
    }

    fn order(&self) -> usize {
        2
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        &p.f * x + &p.b * u + &p.a0
    }

    fn diffusion(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let mut out = p.sigma.clone();
        for j in 0..out.ncols() {
            let col = &p.c[j] * x + &p.d[j] * u;
            let mut dst = out.column_mut(j);
            dst += col;
        }
        out
    }

    fn running_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let p = &self.params;
        0.5 * x.dot(&(&p.m * x)) + 0.5 * u.dot(&(&p.r * u)) + p.q_x.dot(x) + p.q_u.dot(u) + p.c0
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        0.5 * x.dot(&(&p.g * x)) + p.g1.dot(x) + p.g0
    }

    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.params.g * x + &self.params.g1
    }

    fn terminal_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.params.g.clone())
    }

    fn jet1(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Jet1 {
        let p = &self.params;
        Jet1 {
            a_x: p.f.clone(),
            a_u: p.b.clone(),
            b_x: p.c.clone(),
            b_u: p.d.clone(),
            f_x: &p.m * x + &p.q_x,
            f_u: &p.r * u + &p.q_u,
        }
    }

    fn jet2(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<Jet2> {
        let p = &self.params;
        let (n, m, d) = p.dims();
        Some(Jet2 {
            a_xx: Tensor3::zeros(n, n, n),
            a_xu: Tensor3::zeros(n, n, d),
            a_uu: Tensor3::zeros(n, d, d),
            b_xx: Tensor3::zeros(n * m, n, n),
            b_xu: Tensor3::zeros(n * m, n, d),
            b_uu: Tensor3::zeros(n * m, d, d),
            f_xx: p.m.clone(),
            f_xu: DMatrix::zeros(n, d),
            f_uu: p.r.clone(),
        })
    }

    fn quadratic_in_control(&self) -> bool {
        true
    }
}

/// Smooth nonlinear family with bilinear noise:
/// `a = B u + α ⊙ sin(x)`, `b_j = σ_j + u_{j mod d} C_j x`,
/// `f = ½xᵀMx + ½uᵀRu`, `g = ½xᵀGx`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFamily {
    pub b: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub c: Vec<DMatrix<f64>>,
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl BilinearFamily {
    pub fn new(
        b: DMatrix<f64>,
        alpha: DVector<f64>,
        sigma: DMatrix<f64>,
        c: Vec<DMatrix<f64>>,
        m: DMatrix<f64>,
        r: DMatrix<f64>,
        g: DMatrix<f64>,
    ) -> crate::Result<Self> {
        let n = b.nrows();
        let d = b.ncols();
        let mm = sigma.ncols();
        let ok = alpha.len() == n
            && sigma.nrows() == n
            && c.len() == mm
            && c.iter().all(|c| c.shape() == (n, n))
            && m.shape() == (n, n)
            && r.shape() == (d, d)
            && g.shape() == (n, n)
            && d > 0;
        if !ok {
            return Err(crate::Error::InvalidParameter(
                "bilinear family blocks have inconsistent shapes".into(),
            ));
        }
        Ok(Self {
            b,
            alpha,
            sigma,
            c,
            m,
            r,
            g,
        })
    }

    fn channel_control(&self, j: usize) -> usize {
        j % self.b.ncols()
    }
}

impl CoefficientFamily for BilinearFamily {
    fn name(&self) -> &str {
        "bilinear"
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.b.nrows(), self.sigma.ncols(), self.b.ncols())
    }

    fn order(&self) -> usize {
        2
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.b * u + self.alpha.component_mul(&x.map(f64::sin))
    }

    fn diffusion(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.sigma.clone();
        for j in 0..out.ncols() {
            let col = &self.c[j] * x * u[self.channel_control(j)];
            let mut dst = out.column_mut(j);
            dst += col;
        }
        out
    }

    fn running_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.m * x)) + 0.5 * u.dot(&(&self.r * u))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.g * x))
    }

    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x
    }

    fn terminal_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.g.clone())
    }

    fn jet1(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Jet1 {
        let (n, m, d) = self.dims();
        let b_x = (0..m).map(|j| &self.c[j] * u[self.channel_control(j)]).collect();
        let b_u = (0..m)
            .map(|j| {
                let mut bu = DMatrix::zeros(n, d);
                bu.set_column(self.channel_control(j), &(&self.c[j] * x));
                bu
            })
            .collect();
        Jet1 {
            a_x: DMatrix::from_diagonal(&self.alpha.component_mul(&x.map(f64::cos))),
            a_u: self.b.clone(),
            b_x,
            b_u,
            f_x: &self.m * x,
            f_u: &self.r * u,
        }
    }

    fn jet2(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>) -> Option<Jet2> {
        let (n, m, d) = self.dims();
        let a_xx = Tensor3 {
            out: n,
            rows: n,
            cols: n,
            data: (0..n)
                .map(|o| {
                    let mut h = DMatrix::zeros(n, n);
                    h[(o, o)] = -self.alpha[o] * x[o].sin();
                    h
                })
                .collect(),
        };
        let mut b_xu = Vec::with_capacity(n * m);
        for j in 0..m {
            for i in 0..n {
                let mut h = DMatrix::zeros(n, d);
                h.set_column(self.channel_control(j), &self.c[j].row(i).transpose());
                b_xu.push(h);
            }
        }
        Some(Jet2 {
            a_xx,
            a_xu: Tensor3::zeros(n, n, d),
            a_uu: Tensor3::zeros(n, d, d),
            b_xx: Tensor3::zeros(n * m, n, n),
            b_xu: Tensor3 {
                out: n * m,
                rows: n,
                cols: d,
                data: b_xu,
            },
            b_uu: Tensor3::zeros(n * m, d, d),
            f_xx: self.m.clone(),
            f_xu: DMatrix::zeros(n, d),
            f_uu: self.r.clone(),
        })
    }

    fn quadratic_in_control(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bilinear() -> BilinearFamily {
        BilinearFamily::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.8]),
            DVector::from_vec(vec![0.7, -0.4]),
            DMatrix::from_row_slice(2, 3, &[0.2, 0.0, 0.1, 0.0, 0.3, 0.1]),
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]),
                DMatrix::from_row_slice(2, 2, &[-0.2, 0.3, 0.6, 0.1]),
                DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.2, -0.5]),
            ],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn fd_x(fam: &dyn CoefficientFamily, x: &DVector<f64>, u: &DVector<f64>, col: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let h = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[col] += h;
        xm[col] -= h;
        (
            (fam.drift(0.0, &xp, u) - fam.drift(0.0, &xm, u)) / (2.0 * h),
            (fam.diffusion(0.0, &xp, u) - fam.diffusion(0.0, &xm, u)) / (2.0 * h),
            (fam.running_cost(0.0, &xp, u) - fam.running_cost(0.0, &xm, u)) / (2.0 * h),
        )
    }

    fn fd_u(fam: &dyn CoefficientFamily, x: &DVector<f64>, u: &DVector<f64>, col: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
        let h = 1e-6;
        let mut up = u.clone();
        let mut um = u.clone();
        up[col] += h;
        um[col] -= h;
        (
            (fam.drift(0.0, x, &up) - fam.drift(0.0, x, &um)) / (2.0 * h),
            (fam.diffusion(0.0, x, &up) - fam.diffusion(0.0, x, &um)) / (2.0 * h),
            (fam.running_cost(0.0, x, &up) - fam.running_cost(0.0, x, &um)) / (2.0 * h),
        )
    }

    #[test]
    fn bilinear_first_jet_matches_differences() {
        let fam = bilinear();
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let u = DVector::from_vec(vec![0.8, -0.6]);
        let jet = fam.jet1(0.0, &x, &u);
        for c in 0..2 {
            let (da, db, df) = fd_x(&fam, &x, &u, c);
            assert!((jet.a_x.column(c) - da).norm() < 1e-8);
            assert!((jet.f_x[c] - df).abs() < 1e-8);
            for j in 0..3 {
                assert!((jet.b_x[j].column(c) - db.column(j)).norm() < 1e-8);
            }
            let (da, db, df) = fd_u(&fam, &x, &u, c);
            assert!((jet.a_u.column(c) - da).norm() < 1e-8);
            assert!((jet.f_u[c] - df).abs() < 1e-8);
            for j in 0..3 {
                assert!((jet.b_u[j].column(c) - db.column(j)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn bilinear_second_jet_matches_differences() {
        let fam = bilinear();
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let u = DVector::from_vec(vec![0.8, -0.6]);
        let jet = fam.jet2(0.0, &x, &u).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let jp = fam.jet1(0.0, &xp, &u);
            let jm = fam.jet1(0.0, &xm, &u);
            let e = DVector::from_fn(2, |i, _| if i == c { 1.0 } else { 0.0 });
            for k in 0..2 {
                let ek = DVector::from_fn(2, |i, _| if i == k { 1.0 } else { 0.0 });
                let fd_axx = (jp.a_x.column(k) - jm.a_x.column(k)) / (2.0 * h);
                assert!((jet.a_xx.apply(&ek, &e) - fd_axx).norm() < 1e-7);
                for j in 0..3 {
                    let fd_bxu = (jp.b_u[j].column(k) - jm.b_u[j].column(k)) / (2.0 * h);
                    let got = jet.b_xu.apply(&e, &ek);
                    let got_col = got.rows(j * 2, 2).into_owned();
                    assert!((got_col - fd_bxu).norm() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn lq_validate_reports_shapes() {
        let mut p = LqParams::zeros(2, 1, 1);
        assert!(p.validate().is_ok());
        p.r = DMatrix::identity(2, 2);
        assert!(p.validate().unwrap_err().contains("R has shape"));
    }

    #[test]
    fn tensor_contract_and_apply_agree() {
        let t = Tensor3 {
            out: 2,
            rows: 2,
            cols: 2,
            data: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.5]),
            ],
        };
        let y = DVector::from_vec(vec![0.5, -1.0]);
        let z = DVector::from_vec(vec![2.0, 1.0]);
        let w = DVector::from_vec(vec![0.3, 0.7]);
        let lhs = w.dot(&t.apply(&y, &z));
        let rhs = y.dot(&(t.contract(&w) * &z));
        assert!((lhs - rhs).abs() < 1e-14);
        assert_eq!(Tensor3::zeros(3, 2, 2).apply(&y, &z), DVector::zeros(3));
    }
}
