//! Gradient-domain compositing: seamless cloning by a Poisson solve inside a
//! mask, with the conjugate-gradient method.

use collage_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CollageError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bound on `‖Ax − b‖ / ‖b‖`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tolerance: 1e-8, max_iterations: 10_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// True relative residual of the returned solution.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `Ax = b` for symmetric positive definite `A`, given as a
/// matrix-free operator writing `A·x` into its second argument.
pub fn cg_solve(apply_a: impl Fn(&[f64], &mut [f64]), b: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveReport)> {
    if !(cfg.tolerance > 0.0) {
        return Err(CollageError::Parameter("solver tolerance must be positive".into()));
    }
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((x, SolveReport { iterations: 0, residual: 0.0 }));
    }
    let mut ap = vec![0.0; n];
    let true_residual = |x: &[f64], scratch: &mut [f64]| -> (Vec<f64>, f64) {
        apply_a(x, scratch);
        let r: Vec<f64> = b.iter().zip(scratch.iter()).map(|(bi, ai)| bi - ai).collect();
        let norm = dot(&r, &r).sqrt() / b_norm;
        (r, norm)
    };
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(CollageError::Validation("operator is not positive definite".into()));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() / b_norm <= cfg.tolerance {
            let (fresh, residual) = true_residual(&x, &mut ap);
            if residual <= cfg.tolerance {
                return Ok((x, SolveReport { iterations, residual }));
            }
            // Recursive residual drifted from the true one: restart.
            r = fresh;
            p = r.clone();
            rr = dot(&r, &r);
            continue;
        }
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    let (_, residual) = true_residual(&x, &mut ap);
    if residual <= cfg.tolerance {
        return Ok((x, SolveReport { iterations, residual }));
    }
    Err(CollageError::NotConverged { iterations, residual })
}

/// Paste `source` into `destination` inside `mask`, matching source gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendProblem {
    /// `[C, H, W]`.
    pub source: Tensor,
    /// `[C, H, W]`.
    pub destination: Tensor,
    /// `[H, W]` with values in `{0, 1}`.
    pub mask: Tensor,
}

impl BlendProblem {
    fn validate(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = match *self.destination.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(CollageError::Validation("destination must be [C, H, W]".into())),
        };
        if self.source.shape() != self.destination.shape() {
            return Err(CollageError::Validation(format!(
                "source {:?} and destination {:?} differ in shape",
                self.source.shape(),
                self.destination.shape()
            )));
        }
        if self.mask.shape() != [h, w] {
            return Err(CollageError::Validation(format!("mask {:?} is not {h}x{w}", self.mask.shape())));
        }
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m != 0.0 && m != 1.0 {
                return Err(CollageError::Validation(format!("mask value {m} at {i} is not binary")));
            }
            let (y, x) = (i / w, i % w);
            if m == 1.0 && (y == 0 || x == 0 || y + 1 == h || x + 1 == w) {
                return Err(CollageError::Validation(format!("mask touches the image border at ({y}, {x})")));
            }
        }
        Ok((c, h, w))
    }
}

/// Solves `Δf = Δsource` inside the mask with `f = destination` on its
/// boundary, per channel, and clamps the result to `[0, 1]`. Pixels outside
/// the mask are copied from the destination.
pub fn poisson_blend(problem: &BlendProblem, cfg: &SolverConfig) -> Result<Tensor> {
    let (channels, h, w) = problem.validate()?;
    let mut out = problem.destination.clone();
    let interior: Vec<usize> = (0..h * w).filter(|&i| problem.mask.data()[i] == 1.0).collect();
    if interior.is_empty() {
        return Ok(out);
    }
    let mut index = vec![usize::MAX; h * w];
    for (k, &i) in interior.iter().enumerate() {
        index[i] = k;
    }
    let neighbors = |i: usize| [i - w, i + w, i - 1, i + 1];
    let apply = |x: &[f64], y: &mut [f64]| {
        for (k, &i) in interior.iter().enumerate() {
            let mut acc = 4.0 * x[k];
            for q in neighbors(i) {
                if index[q] != usize::MAX {
                    acc -= x[index[q]];
                }
            }
            y[k] = acc;
        }
    };
    for c in 0..channels {
        let src = &problem.source.data()[c * h * w..(c + 1) * h * w];
        let dst = &problem.destination.data()[c * h * w..(c + 1) * h * w];
        let b: Vec<f64> = interior
            .iter()
            .map(|&i| {
                let mut v = 4.0 * src[i];
                for q in neighbors(i) {
                    v -= src[q];
                    if index[q] == usize::MAX {
                        v += dst[q];
                    }
                }
                v
            })
            .collect();
        let (x, _) = cg_solve(apply, &b, cfg)?;
        for (k, &i) in interior.iter().enumerate() {
            out.data_mut()[c * h * w + i] = x[k].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
