use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::par;
use crate::{Error, Result};

/// Brownian increments `ΔW[path][step][channel]` on a uniform grid.
///
/// Path `p` reads ChaCha8 stream `p` of `master_seed`. Each step consumes a
/// fixed number of 32-bit words, so the increment at `(p, k)` is a function of
/// `(master_seed, p, k)` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEnsemble {
    paths: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    master_seed: u64,
    increments: Vec<f64>,
}

fn words_per_step(dim: usize) -> u128 {
    4 * dim.div_ceil(2) as u128
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

fn fill_step(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    let mut j = 0;
    while j < out.len() {
        let r = (-2.0 * unit_open(rng).ln()).sqrt();
        let theta = std::f64::consts::TAU * unit_open(rng);
        out[j] = scale * r * theta.cos();
        if j + 1 < out.len() {
            out[j + 1] = scale * r * theta.sin();
        }
        j += 2;
    }
}

fn path_rng(master_seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path as u64);
    rng
}

/// Increments of one step, generated by seeking directly to its block.
pub fn increment_at(master_seed: u64, path: usize, step: usize, dim: usize, dt: f64) -> Vec<f64> {
    let mut rng = path_rng(master_seed, path);
    rng.set_word_pos(step as u128 * words_per_step(dim));
    let mut out = vec![0.0; dim];
    fill_step(&mut rng, dt.sqrt(), &mut out);
    out
}

/// Standard normal draws for test data, independent of any ensemble.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let mut pair = [0.0; 2];
        fill_step(&mut self.rng, 1.0, &mut pair);
        self.spare = Some(pair[1]);
        pair[0]
    }

    /// Uniform integer in `0..bound`.
    pub fn index(&mut self, bound: usize) -> usize {
        ((self.rng.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}

impl NoiseEnsemble {
    pub fn generate(master_seed: u64, paths: usize, steps: usize, dim: usize, horizon: f64) -> Result<Self> {
        if paths == 0 || steps == 0 || dim == 0 {
            return Err(Error::InvalidParameter(
                "noise ensemble needs positive paths, steps and dimension".into(),
            ));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon {horizon} must be positive")));
        }
        let dt = horizon / steps as f64;
        let scale = dt.sqrt();
        let mut increments = vec![0.0; paths * steps * dim];
        par::for_each_chunk(&mut increments, steps * dim, |p, chunk| {
            let mut rng = path_rng(master_seed, p);
            for step in chunk.chunks_mut(dim) {
                fill_step(&mut rng, scale, step);
            }
        });
        Ok(Self {
            paths,
            steps,
            dim,
            dt,
            master_seed,
            increments,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.steps + step) * self.dim;
        &self.increments[off..off + self.dim]
    }
}
