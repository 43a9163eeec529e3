use nalgebra::{DMatrix, DVector};

use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldShape {
    State(usize),
    Control(usize),
    Scalar,
    /// Column-major `rows × cols` array.
    Array(usize, usize),
}

impl FieldShape {
    pub fn width(&self) -> usize {
        match *self {
            FieldShape::State(n) | FieldShape::Control(n) => n,
            FieldShape::Scalar => 1,
            FieldShape::Array(r, c) => r * c,
        }
    }
}

/// Values indexed by `(path, step)`, stored path-major.
///
/// Producers in this crate fill step `k` from increments with index `< k`,
/// deterministic data and, for feedback controls, the state at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    shape: FieldShape,
    paths: usize,
    steps: usize,
    data: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(shape: FieldShape, paths: usize, steps: usize) -> Self {
        Self {
            shape,
            paths,
            steps,
            data: vec![0.0; paths * steps * shape.width()],
        }
    }

    pub fn from_data(shape: FieldShape, paths: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        let want = paths * steps * shape.width();
        if data.len() != want {
            return Err(Error::dim("field data", want, data.len()));
        }
        Ok(Self {
            shape,
            paths,
            steps,
            data,
        })
    }

    /// Builds the field path by path; `f(p, k, out)` writes the value at `(p, k)`.
    pub fn from_fn<F>(shape: FieldShape, paths: usize, steps: usize, f: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Sync + Send,
    {
        let mut field = Self::zeros(shape, paths, steps);
        let w = shape.width();
        par::for_each_chunk(&mut field.data, steps * w, |p, chunk| {
            for (k, cell) in chunk.chunks_mut(w.max(1)).enumerate() {
                f(p, k, cell);
            }
        });
        field
    }

    /// Same values at every path.
    pub fn deterministic(shape: FieldShape, paths: usize, per_step: &[DVector<f64>]) -> Result<Self> {
        if let Some(bad) = per_step.iter().find(|v| v.len() != shape.width()) {
            return Err(Error::dim("deterministic field value", shape.width(), bad.len()));
        }
        Ok(Self::from_fn(shape, paths, per_step.len(), |_, k, out| {
            out.copy_from_slice(per_step[k].as_slice())
        }))
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.shape.width()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn path_slice(&self, p: usize) -> &[f64] {
        let w = self.steps * self.width();
        &self.data[p * w..(p + 1) * w]
    }

    pub fn get(&self, p: usize, k: usize) -> &[f64] {
        let w = self.width();
        let off = (p * self.steps + k) * w;
        &self.data[off..off + w]
    }

    pub fn get_mut(&mut self, p: usize, k: usize) -> &mut [f64] {
        let w = self.width();
        let off = (p * self.steps + k) * w;
        &mut self.data[off..off + w]
    }

    pub fn vector(&self, p: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.get(p, k))
    }

    pub fn scalar(&self, p: usize, k: usize) -> f64 {
        self.get(p, k)[0]
    }

    pub fn matrix(&self, p: usize, k: usize) -> DMatrix<f64> {
        let (r, c) = match self.shape {
            FieldShape::Array(r, c) => (r, c),
            other => (other.width(), 1),
        };
        DMatrix::from_column_slice(r, c, self.get(p, k))
    }

    pub fn set(&mut self, p: usize, k: usize, value: &[f64]) {
        self.get_mut(p, k).copy_from_slice(value);
    }

    /// Entrywise `self + α·other`.
    pub fn axpy(&self, alpha: f64, other: &AdaptedField) -> Result<AdaptedField> {
        self.same_layout(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + alpha * b).collect();
        Ok(Self { data, ..self.clone() })
    }

    pub fn scale(&self, alpha: f64) -> AdaptedField {
        Self {
            data: self.data.iter().map(|a| a * alpha).collect(),
            ..self.clone()
        }
    }

    pub fn same_layout(&self, other: &AdaptedField) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("field width", self.width(), other.width()));
        }
        if self.paths != other.paths {
            return Err(Error::dim("field paths", self.paths, other.paths));
        }
        if self.steps != other.steps {
            return Err(Error::dim("field steps", self.steps, other.steps));
        }
        Ok(())
    }

    /// `sup_k (mean_p |value(p,k)|²)^{1/2}`.
    pub fn sup_rms(&self) -> f64 {
        (0..self.steps)
            .map(|k| self.rms_at(k))
            .fold(0.0, f64::max)
    }

    /// `(mean_p |value(p,k)|²)^{1/2}`, summed in path order.
    pub fn rms_at(&self, k: usize) -> f64 {
        let mut s = 0.0;
        for p in 0..self.paths {
            s += self.get(p, k).iter().map(|v| v * v).sum::<f64>();
        }
        (s / self.paths as f64).sqrt()
    }
}

/// Monte Carlo estimate `mean ± stderr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Sample mean and standard error, accumulated in index order.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, stderr: f64::NAN };
        }
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }
}
