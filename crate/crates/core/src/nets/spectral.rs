//! Power-iteration estimate of the largest singular value.

use collage_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CollageError, Result};

/// Lower bound applied to the singular value estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Left/right singular vector estimates persisted between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalized(mut x: Vec<f64>) -> Option<Vec<f64>> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < SIGMA_FLOOR {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= n);
    Some(x)
}

/// Rows and columns of a weight viewed as `out x (everything else)`.
pub fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [] | [_] => Err(CollageError::Parameter(format!(
            "spectral normalization needs a matrix, got shape {:?}",
            w.shape()
        ))),
        [rows, ..] => Ok((*rows, w.numel() / rows)),
    }
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let draw = |n: usize, rng: &mut R| -> Vec<f64> {
            let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            normalized(x).unwrap_or_else(|| vec![1.0 / (n as f64).sqrt(); n])
        };
        let u = draw(rows, rng);
        let v = draw(cols, rng);
        SpectralState { u, v }
    }

    /// `uᵀ W v` with the current vectors, floored at [`SIGMA_FLOOR`].
    pub fn sigma(&self, w: &Tensor) -> f64 {
        let cols = self.v.len();
        let s: f64 = self
            .u
            .iter()
            .enumerate()
            .map(|(r, ur)| ur * w.data()[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        s.max(SIGMA_FLOOR)
    }

    /// Runs `iters` rounds of power iteration and returns the new estimate.
    pub fn iterate(&mut self, w: &Tensor, iters: usize) -> Result<f64> {
        let (rows, cols) = matrix_dims(w)?;
        if self.u.len() != rows || self.v.len() != cols {
            return Err(CollageError::Parameter(format!(
                "spectral state {}x{} does not match weight {rows}x{cols}",
                self.u.len(),
                self.v.len()
            )));
        }
        let d = w.data();
        for _ in 0..iters {
            let mut v = vec![0.0; cols];
            for (r, ur) in self.u.iter().enumerate() {
                for (vc, wc) in v.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                    *vc += ur * wc;
                }
            }
            if let Some(v) = normalized(v) {
                self.v = v;
            }
            let u: Vec<f64> = (0..rows)
                .map(|r| d[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum())
                .collect();
            if let Some(u) = normalized(u) {
                self.u = u;
            }
        }
        Ok(self.sigma(w))
    }
}

/// Returns `W / σ̂` after `iters` power-iteration rounds, together with `σ̂`.
/// A zero matrix is returned unchanged (σ̂ is clamped to [`SIGMA_FLOOR`]).
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralState, iters: usize) -> Result<(Tensor, f64)> {
    if iters < 1 {
        return Err(CollageError::Parameter("power iteration needs at least one round".into()));
    }
    let sigma = state.iterate(w, iters)?;
    let data = w.data().iter().map(|v| v / sigma).collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, sigma))
}
