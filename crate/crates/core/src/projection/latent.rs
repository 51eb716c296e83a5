use std::io::Write;

use collage_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aux::AuxNets;
use super::loss::Critic;
use crate::error::{CollageError, Result};
use crate::nets::{Discriminator, Encoder, Generator};
use crate::optim::{Optimizer, OptimizerKind};

/// Where latent search starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Init {
    /// `E(x)`.
    Encoder,
    /// A standard normal draw.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    /// Stop as soon as the loss reaches this value.
    pub loss_floor: f64,
    pub init: Init,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { optimizer: OptimizerKind::Adam, lr: 0.02, steps: 200, loss_floor: 0.0, init: Init::Encoder }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CollageError::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.loss_floor >= 0.0) {
            return Err(CollageError::Parameter("loss floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of a latent search.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Latent of the lowest-loss iterate.
    pub z: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Loss of every evaluated iterate; entry 0 is the starting point.
    pub losses: Vec<f64>,
}

impl Projection {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    /// Running minimum of [`Projection::losses`].
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.losses
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }

    /// First iteration whose loss is at or below `level`.
    pub fn iterations_to(&self, level: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l <= level)
    }

    /// `iteration,loss,best_loss` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "loss", "best_loss"]).map_err(csv_err)?;
        for (i, (l, b)) in self.losses.iter().zip(self.best_so_far()).enumerate() {
            out.write_record([i.to_string(), l.to_string(), b.to_string()]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> CollageError {
    CollageError::Io(std::io::Error::other(e))
}

fn batch_of_one(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(x.clone().reshape(shape)?)
}

fn start_latent(x: &Tensor, g: &Generator, e: Option<&Encoder>, init: Init) -> Result<Vec<f64>> {
    match init {
        Init::Encoder => {
            let e = e.ok_or_else(|| CollageError::Parameter("encoder initialization needs a trained encoder".into()))?;
            e.encode(x)
        }
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Tensor::randn(vec![g.config().latent_dim], 1.0, &mut rng).into_data())
        }
    }
}

/// Gradient descent on `L(G(z), x)` starting from `E(x)` or a random draw.
/// Returns the best iterate, not the last.
pub fn project_z(x: &Tensor, class: usize, g: &Generator, d: &Discriminator, e: Option<&Encoder>, cfg: &ProjectionConfig) -> Result<Projection> {
    cfg.validate()?;
    let start = start_latent(x, g, e, cfg.init)?;
    descend(x, class, g, d, None, start, cfg)
}

/// Gradient descent on `L(G(B(ζ)), x)` starting from `ζ₀ = A(z₀)`.
pub fn project_zeta(
    x: &Tensor,
    class: usize,
    g: &Generator,
    d: &Discriminator,
    e: Option<&Encoder>,
    aux: &AuxNets,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    cfg.validate()?;
    let z0 = start_latent(x, g, e, cfg.init)?;
    let n = z0.len();
    let zeta0 = aux.embed_rows(&Tensor::new(vec![1, n], z0)?)?.into_data();
    descend(x, class, g, d, Some(aux), zeta0, cfg)
}

fn descend(
    x: &Tensor,
    class: usize,
    g: &Generator,
    d: &Discriminator,
    aux: Option<&AuxNets>,
    mut var: Vec<f64>,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    let target = d.psi(&batch_of_one(x)?)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let (mut best_loss, mut best_iteration, mut best_z) = (f64::INFINITY, 0, Vec::new());
    for k in 0..=cfg.steps {
        let mut tape = Tape::new();
        let critic = Critic::bind(&mut tape, g, d)?;
        let v = tape.param(Tensor::new(vec![1, var.len()], var.clone())?)?;
        let z = match aux {
            Some(a) => {
                let ap = a.bind(&mut tape, false)?;
                a.decode(&mut tape, &ap, v)?
            }
            None => v,
        };
        let t = tape.constant(target.clone())?;
        let rows = critic.losses(&mut tape, z, &[class], t)?;
        let loss = tape.sum(rows)?;
        let value = tape.value(loss).item()?;
        losses.push(value);
        if value < best_loss {
            best_loss = value;
            best_iteration = k;
            best_z = tape.value(z).data().to_vec();
        }
        if k > 0 && value > 10.0 * losses[0] {
            return Err(CollageError::Diverged(format!(
                "loss {value:.4e} at step {k} exceeds ten times the initial {:.4e}",
                losses[0]
            )));
        }
        if k == cfg.steps || value <= cfg.loss_floor {
            break;
        }
        tape.backward(loss)?;
        let grad = tape.grad(v).expect("latent is a gradient leaf").data().to_vec();
        opt.begin_step();
        opt.update(0, &mut var, &grad);
    }
    Ok(Projection { z: best_z, best_loss, best_iteration, losses })
}
