use collage_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CollageError, Result};
use crate::nets::Linear;
use crate::optim::{step_store, GradPolicy, Optimizer};
use crate::params::{Bound, ParamId, ParamStore};

const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub latent_dim: usize,
    /// Unit counts of the three hidden layers; the middle one is ζ.
    pub hidden: [usize; 3],
}

impl AuxConfig {
    pub fn new(latent_dim: usize) -> Self {
        AuxConfig { latent_dim, hidden: [64, 512, 64] }
    }

    /// Hidden sizes scaled with the latent: `(2d, 8d, 2d)`, never narrower
    /// than the small default.
    pub fn scaled(latent_dim: usize) -> Self {
        let d = latent_dim;
        AuxConfig { latent_dim, hidden: [(2 * d).max(64), (8 * d).max(512), (2 * d).max(64)] }
    }

    pub fn zeta_dim(&self) -> usize {
        self.hidden[1]
    }
}

/// Latent expansion: `A: z → ζ` and `B: ζ → z`.
///
/// Together they form one five-layer perceptron `z → h1 → ζ → h3 → z` with
/// a learnable PReLU on every hidden layer.
#[derive(Clone, Debug)]
pub struct AuxNets {
    cfg: AuxConfig,
    params: ParamStore,
    a1: Linear,
    a2: Linear,
    b1: Linear,
    b2: Linear,
    slopes: [ParamId; 3],
}

impl AuxNets {
    pub fn new<R: Rng + ?Sized>(cfg: AuxConfig, rng: &mut R) -> Result<Self> {
        if cfg.latent_dim == 0 || cfg.hidden.contains(&0) {
            return Err(CollageError::Parameter("aux widths must be positive".into()));
        }
        let [h1, z, h3] = cfg.hidden;
        let mut params = ParamStore::new();
        let a1 = Linear::new(&mut params, "aux.a1", cfg.latent_dim, h1, true, rng);
        let a2 = Linear::new(&mut params, "aux.a2", h1, z, true, rng);
        let b1 = Linear::new(&mut params, "aux.b1", z, h3, true, rng);
        let b2 = Linear::new(&mut params, "aux.b2", h3, cfg.latent_dim, true, rng);
        let slopes = [
            params.add("aux.a1.prelu", Tensor::full(vec![h1], PRELU_INIT)),
            params.add("aux.a2.prelu", Tensor::full(vec![z], PRELU_INIT)),
            params.add("aux.b1.prelu", Tensor::full(vec![h3], PRELU_INIT)),
        ];
        Ok(AuxNets { cfg, params, a1, a2, b1, b2, slopes })
    }

    pub fn config(&self) -> &AuxConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    /// `A`: `[N, latent]` to `[N, ζ]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let h = self.a1.forward(tape, p, z)?;
        let h = tape.prelu(h, p[self.slopes[0]])?;
        let h = self.a2.forward(tape, p, h)?;
        Ok(tape.prelu(h, p[self.slopes[1]])?)
    }

    /// `B`: `[N, ζ]` to `[N, latent]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, zeta: Var) -> Result<Var> {
        let h = self.b1.forward(tape, p, zeta)?;
        let h = tape.prelu(h, p[self.slopes[2]])?;
        self.b2.forward(tape, p, h)
    }

    fn eval(&self, rows: &Tensor, f: impl Fn(&Self, &mut Tape, &Bound, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(rows.clone())?;
        let y = f(self, &mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn embed_rows(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(z, |a, t, p, x| a.embed(t, p, x))
    }

    pub fn decode_rows(&self, zeta: &Tensor) -> Result<Tensor> {
        self.eval(zeta, |a, t, p, x| a.decode(t, p, x))
    }

    /// Mean over rows of `‖B(A(z)) − z‖²`.
    pub fn reconstruction_error(&self, z: &Tensor) -> Result<f64> {
        let back = self.decode_rows(&self.embed_rows(z)?)?;
        let n = z.shape()[0] as f64;
        Ok(back.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    /// Tape expression for the mean squared reconstruction error of `z`.
    pub fn reconstruction_loss(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0] as f64;
        let zeta = self.embed(tape, p, z)?;
        let back = self.decode(tape, p, zeta)?;
        let diff = tape.sub(back, z)?;
        let sq = tape.dot(diff, diff)?;
        Ok(tape.scale(sq, 1.0 / n)?)
    }

    /// Fits `B∘A` to the identity on Gaussian latents. Returns the loss per
    /// step.
    pub fn pretrain_identity(&mut self, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Optimizer::adam(lr, 0.9, 0.999);
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            let z = Tensor::randn(vec![batch, self.cfg.latent_dim], 1.0, &mut rng);
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, true)?;
            let zv = tape.constant(z)?;
            let loss = self.reconstruction_loss(&mut tape, &p, zv)?;
            curve.push(tape.value(loss).item()?);
            tape.backward(loss)?;
            let mut grads = p.grads(&tape, &self.params);
            step_store(&mut opt, &mut self.params, &mut grads, GradPolicy::default());
        }
        Ok(curve)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("aux", serde_json::to_value(&self.cfg)?);
        for (name, t) in self.params.iter() {
            ck.arrays.push((name.to_string(), t.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("aux")?;
        let cfg: AuxConfig = serde_json::from_value(ck.config.clone())?;
        let mut a = AuxNets::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        a.params.load_from(ck.arrays.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(a)
    }
}
