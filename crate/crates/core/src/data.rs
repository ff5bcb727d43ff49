//! Synthetic regression data Y = f_G*(X) + ε.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::losses::InputDistribution;
use crate::model::MixingMeasure;
use crate::seed;

/// n inputs in R^d (row-major) and their responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    pub noise_var: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>, noise_var: f64, seed: u64) -> Result<Self> {
        if dim == 0 || x.len() != dim * y.len() {
            return Err(MoeError::input(format!(
                "{} input values cannot form {} rows of dimension {dim}",
                x.len(),
                y.len()
            )));
        }
        Ok(Dataset {
            dim,
            x,
            y,
            noise_var,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks(self.dim)
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }
}

/// Draws n inputs from `input_dist` and responses per the regression model
/// with Gaussian noise of variance `noise_var`.
pub fn generate_dataset(
    gstar: &MixingMeasure,
    n: usize,
    noise_var: f64,
    input_dist: &InputDistribution,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(MoeError::input("sample size must be at least 1"));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(MoeError::input(format!("noise variance must be finite and >= 0, got {noise_var}")));
    }
    let d = gstar.dim();
    if input_dist.dim() != Some(d) {
        return Err(MoeError::input("input distribution dimension does not match the model"));
    }
    let mut rng = seed::rng(seed);
    let mut x = Vec::with_capacity(n * d);
    match input_dist {
        InputDistribution::Uniform { .. } => {
            for _ in 0..n * d {
                x.push(rng.random::<f64>());
            }
        }
        InputDistribution::Samples(pool) => {
            for _ in 0..n {
                x.extend_from_slice(&pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| MoeError::input(e.to_string()))?;
    let mut y = Vec::with_capacity(n);
    for row in x.chunks(d) {
        let eps = if noise_var > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        y.push(gstar.eval(row)? + eps);
    }
    Dataset::new(d, x, y, noise_var, seed)
}
