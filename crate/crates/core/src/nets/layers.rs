use collage_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CollageError, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), glorot(vec![fan_out, fan_in], fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => tape.add_bias(y, p[b])?,
            None => y,
        })
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), glorot(vec![cout, cin, k, k], cin * k * k, cout * k * k, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv { w, b, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], 1, self.pad)?;
        Ok(tape.add_bias(y, p[self.b])?)
    }
}

/// Whether normalization uses batch statistics or stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Edit,
}

/// How the affine parameters of a conditional normalization are chosen.
#[derive(Clone, Copy, Debug)]
pub enum Modulation<'a> {
    /// One class per batch element.
    Classes(&'a [usize]),
    /// Per-position class mixture weights, `[K, H, W]` shared across the
    /// batch or `[N, K, H, W]`.
    Map(&'a Tensor),
}

/// Batch statistics observed by a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Conditional batch normalization: per-class tables of scale and bias plus
/// running statistics for single-image editing.
#[derive(Clone, Debug)]
pub struct CbnLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub num_classes: usize,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl CbnLayer {
    pub fn new(store: &mut ParamStore, name: &str, num_classes: usize, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![num_classes, channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![num_classes, channels]));
        CbnLayer {
            name: name.to_string(),
            gamma,
            beta,
            num_classes,
            channels,
            eps: 1e-5,
            momentum: 0.1,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for k in 0..self.channels {
            self.running_mean[k] = (1.0 - m) * self.running_mean[k] + m * stats.mean[k];
            self.running_var[k] = (1.0 - m) * self.running_var[k] + m * stats.var[k];
        }
    }

    /// Normalizes `x` per channel with batch statistics (train) or running
    /// statistics (edit).
    pub fn normalize(&self, tape: &mut Tape, x: Var, mode: NormMode) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = tape.value(x).nchw()?;
        if c != self.channels {
            return Err(CollageError::Parameter(format!(
                "{}: input has {c} channels, layer expects {}",
                self.name, self.channels
            )));
        }
        match mode {
            NormMode::Train => {
                if n * h * w < 2 {
                    return Err(CollageError::Parameter(format!(
                        "{}: training-mode statistics need at least two values per channel",
                        self.name
                    )));
                }
                let (mean, var) = tape.batch_stats(x)?;
                let stats = BatchStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                };
                Ok((tape.normalize(x, mean, var, self.eps)?, Some(stats)))
            }
            NormMode::Edit => {
                let mean = tape.constant(Tensor::from_vec(self.running_mean.clone()))?;
                let var = tape.constant(Tensor::from_vec(self.running_var.clone()))?;
                Ok((tape.normalize(x, mean, var, self.eps)?, None))
            }
        }
    }

    /// Normalization followed by the class-conditional affine transform.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, modulation: Modulation<'_>, mode: NormMode) -> Result<(Var, Option<BatchStats>)> {
        let (xhat, stats) = self.normalize(tape, x, mode)?;
        let (n, _, h, w) = tape.value(x).nchw()?;
        let (gamma, beta) = match modulation {
            Modulation::Classes(classes) => {
                if classes.len() != n {
                    return Err(CollageError::Parameter(format!(
                        "{}: {} class ids for a batch of {n}",
                        self.name,
                        classes.len()
                    )));
                }
                if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
                    return Err(CollageError::Parameter(format!(
                        "unknown class {c} (model has {})",
                        self.num_classes
                    )));
                }
                let g = tape.gather_rows(p[self.gamma], classes)?;
                let b = tape.gather_rows(p[self.beta], classes)?;
                (tape.broadcast_spatial(g, h, w)?, tape.broadcast_spatial(b, h, w)?)
            }
            Modulation::Map(map) => {
                let weights = self.expand_map(map, n, h, w)?;
                (tape.class_mix(p[self.gamma], &weights)?, tape.class_mix(p[self.beta], &weights)?)
            }
        };
        let y = tape.mul(xhat, gamma)?;
        Ok((tape.add(y, beta)?, stats))
    }

    fn expand_map(&self, map: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
        let shape = map.shape();
        let (k, mh, mw, batched) = match *shape {
            [k, mh, mw] => (k, mh, mw, false),
            [mn, k, mh, mw] if mn == n => (k, mh, mw, true),
            _ => {
                return Err(CollageError::Tensor(collage_tensor::TensorError::Dimension(format!(
                    "{}: class map shape {shape:?} does not fit a batch of {n}",
                    self.name
                ))))
            }
        };
        if (mh, mw) != (h, w) {
            return Err(CollageError::Tensor(collage_tensor::TensorError::Dimension(format!(
                "{}: class map is {mh}x{mw} but features are {h}x{w}",
                self.name
            ))));
        }
        if k != self.num_classes {
            return Err(CollageError::Tensor(collage_tensor::TensorError::Dimension(format!(
                "{}: class map has {k} classes, model has {}",
                self.name, self.num_classes
            ))));
        }
        if batched {
            return Ok(map.clone());
        }
        let mut data = Vec::with_capacity(n * map.numel());
        for _ in 0..n {
            data.extend_from_slice(map.data());
        }
        Ok(Tensor::new(vec![n, k, h, w], data)?)
    }
}
