use collage_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aux::AuxNets;
use super::loss::Critic;
use crate::error::{CollageError, Result};
use crate::nets::{Discriminator, Encoder, Generator, NoHooks, NormMode};
use crate::optim::{step_store, GradPolicy, Optimizer};

/// Latents, classes and the generated images `[N, C, R, R]` for them.
pub struct GeneratedBatch {
    pub z: Tensor,
    pub classes: Vec<usize>,
    pub images: Tensor,
}

/// Draws `n` standard normal latents with uniform classes and renders them.
pub fn generated_batch<R: Rng + ?Sized>(g: &Generator, n: usize, rng: &mut R) -> Result<GeneratedBatch> {
    let cfg = g.config();
    let z = Tensor::randn(vec![n, cfg.latent_dim], 1.0, rng);
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false)?;
    let zv = tape.constant(z.clone())?;
    let out = g.forward(&mut tape, &p, zv, &classes, NormMode::Edit, &NoHooks)?;
    Ok(GeneratedBatch { z, classes, images: tape.value(out.image).clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of an optional `‖E(G(z)) − z‖² / d` regression term. It is
    /// orders of magnitude larger than the cosine loss, so keep it small.
    pub latent_weight: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig { steps: 5000, batch_size: 16, lr: 2e-4, latent_weight: 0.0, seed: 1 }
    }
}

/// Trains `e` so that `G(E(G(z)))` matches `G(z)` in discriminator feature
/// space. Returns the mean cosine loss of every step's batch.
pub fn train_encoder(g: &Generator, d: &Discriminator, e: &mut Encoder, cfg: &EncoderTrainConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.latent_weight >= 0.0) {
        return Err(CollageError::Parameter("encoder training needs a positive batch size and learning rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr, 0.5, 0.999);
    let dim = g.config().latent_dim as f64;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = generated_batch(g, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let critic = Critic::bind(&mut tape, g, d)?;
        let ep = e.bind(&mut tape, true)?;
        let x = tape.constant(batch.images.clone())?;
        let target = critic.d.forward(&mut tape, &critic.dp, x, None)?.psi;
        let target = tape.constant(tape.value(target).clone())?;
        let zhat = e.forward(&mut tape, &ep, x)?;
        let rows = critic.losses(&mut tape, zhat, &batch.classes, target)?;
        let cos = tape.mean(rows)?;
        curve.push(tape.value(cos).item()?);
        let zt = tape.constant(batch.z)?;
        let diff = tape.sub(zhat, zt)?;
        let sq = tape.dot(diff, diff)?;
        let reg = tape.scale(sq, cfg.latent_weight / (dim * cfg.batch_size as f64))?;
        let loss = tape.add(cos, reg)?;
        tape.backward(loss)?;
        let mut grads = ep.grads(&tape, e.params());
        step_store(&mut opt, e.params_mut(), &mut grads, GradPolicy::default());
        if step % 100 == 0 {
            log::debug!("encoder step {step}: cosine {:.4}", curve[step]);
        }
    }
    Ok(curve)
}

/// Mean `L(G(E(x)), x)` over `n` fresh generated images.
pub fn encoder_loss(g: &Generator, d: &Discriminator, e: &Encoder, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = generated_batch(g, n, &mut rng)?;
    let mut tape = Tape::new();
    let critic = Critic::bind(&mut tape, g, d)?;
    let ep = e.bind(&mut tape, false)?;
    let x = tape.constant(batch.images)?;
    let target = critic.d.forward(&mut tape, &critic.dp, x, None)?.psi;
    let zhat = e.forward(&mut tape, &ep, x)?;
    let rows = critic.losses(&mut tape, zhat, &batch.classes, target)?;
    let m = tape.mean(rows)?;
    Ok(tape.value(m).item()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTrainConfig {
    /// Unrolled ζ updates per sample.
    pub inner_steps: usize,
    /// Loss weight of each unrolled point, `inner_steps + 1` entries.
    pub step_weights: Vec<f64>,
    /// Weight of the reconstruction penalty `‖B(A(z)) − z‖²`.
    pub lambda: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// AdaGrad rate of the unrolled ζ updates.
    pub inner_lr: f64,
    /// Adam rate of the A, B updates.
    pub outer_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Reconstruction-only warm-up steps before the unrolled objective.
    pub identity_steps: usize,
    pub seed: u64,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            inner_steps: 2,
            step_weights: vec![20.0, 2.0, 1.0],
            lambda: 100.0,
            clip_norm: 100.0,
            weight_decay: 1e-4,
            inner_lr: 0.05,
            outer_lr: 1e-4,
            batch_size: 8,
            steps: 2000,
            identity_steps: 2000,
            seed: 2,
        }
    }
}

impl AuxTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CollageError::Parameter(format!("aux training: {m}")));
        if self.step_weights.len() != self.inner_steps + 1 {
            return bad(format!("{} step weights for {} inner steps", self.step_weights.len(), self.inner_steps));
        }
        if self.step_weights.iter().any(|w| !(*w >= 0.0)) || !(self.lambda >= 0.0) {
            return bad("weights and lambda must be non-negative".into());
        }
        if self.batch_size == 0 || !(self.inner_lr > 0.0) || !(self.outer_lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("batch size, rates and clip threshold must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuxTrainLog {
    pub identity: Vec<f64>,
    /// Weighted unrolled loss per step, reconstruction term excluded.
    pub unrolled: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Trains A and B so that descent in ζ makes fast progress.
///
/// Each step draws generated targets, runs `inner_steps` AdaGrad updates of
/// ζ from `A(E(x))` with the current B, then updates A and B on
/// `Σ_j w_j L(G(B(ζ_j)), x) + λ‖B(A(z)) − z‖²`. The update offsets
/// `ζ_j − ζ_0` are held constant, so A and B receive first-order gradients
/// through every unrolled point without differentiating the inner updates.
pub fn train_aux(g: &Generator, d: &Discriminator, e: &Encoder, aux: &mut AuxNets, cfg: &AuxTrainConfig) -> Result<AuxTrainLog> {
    cfg.validate()?;
    let mut log = AuxTrainLog::default();
    if cfg.identity_steps > 0 {
        log.identity = aux.pretrain_identity(cfg.identity_steps, cfg.batch_size.max(32), 1e-3, cfg.seed ^ 0x1d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(cfg.outer_lr, 0.9, 0.999);
    let policy = GradPolicy { clip_norm: Some(cfg.clip_norm), weight_decay: cfg.weight_decay };
    let n = cfg.batch_size;
    for step in 0..cfg.steps {
        let batch = generated_batch(g, n, &mut rng)?;
        let target = d.psi(&batch.images)?;
        let z_enc = {
            let mut tape = Tape::new();
            let ep = e.bind(&mut tape, false)?;
            let x = tape.constant(batch.images.clone())?;
            let z = e.forward(&mut tape, &ep, x)?;
            tape.value(z).clone()
        };

        let zeta0 = aux.embed_rows(&z_enc)?;
        let mut zeta = zeta0.data().to_vec();
        let mut inner = Optimizer::adagrad(cfg.inner_lr);
        let mut offsets = Vec::with_capacity(cfg.inner_steps + 1);
        offsets.push(Tensor::zeros(zeta0.shape().to_vec()));
        for _ in 0..cfg.inner_steps {
            let mut tape = Tape::new();
            let critic = Critic::bind(&mut tape, g, d)?;
            let ap = aux.bind(&mut tape, false)?;
            let v = tape.param(Tensor::new(zeta0.shape().to_vec(), zeta.clone())?)?;
            let z = aux.decode(&mut tape, &ap, v)?;
            let t = tape.constant(target.clone())?;
            let rows = critic.losses(&mut tape, z, &batch.classes, t)?;
            let total = tape.sum(rows)?;
            tape.backward(total)?;
            let grad = tape.grad(v).expect("ζ is a gradient leaf").data().to_vec();
            inner.begin_step();
            inner.update(0, &mut zeta, &grad);
            let delta = zeta.iter().zip(zeta0.data()).map(|(a, b)| a - b).collect();
            offsets.push(Tensor::new(zeta0.shape().to_vec(), delta)?);
        }

        let mut tape = Tape::new();
        let critic = Critic::bind(&mut tape, g, d)?;
        let ap = aux.bind(&mut tape, true)?;
        let ze = tape.constant(z_enc)?;
        let zeta0v = aux.embed(&mut tape, &ap, ze)?;
        let t = tape.constant(target)?;
        let mut unrolled = None;
        for (w, off) in cfg.step_weights.iter().zip(offsets) {
            let off = tape.constant(off)?;
            let zj = tape.add(zeta0v, off)?;
            let z = aux.decode(&mut tape, &ap, zj)?;
            let rows = critic.losses(&mut tape, z, &batch.classes, t)?;
            let m = tape.mean(rows)?;
            let term = tape.scale(m, *w)?;
            unrolled = Some(match unrolled {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let unrolled = unrolled.expect("at least one unrolled point");
        let zt = tape.constant(batch.z)?;
        let recon = aux.reconstruction_loss(&mut tape, &ap, zt)?;
        let penalty = tape.scale(recon, cfg.lambda)?;
        let objective = tape.add(unrolled, penalty)?;
        let (u, r) = (tape.value(unrolled).item()?, tape.value(recon).item()?);
        if !u.is_finite() || !r.is_finite() {
            return Err(CollageError::Training(format!("non-finite aux objective at step {step}")));
        }
        log.unrolled.push(u);
        log.reconstruction.push(r);
        tape.backward(objective)?;
        let mut grads = ap.grads(&tape, aux.params());
        step_store(&mut opt, aux.params_mut(), &mut grads, policy);
        if step % 50 == 0 {
            log::debug!("aux step {step}: unrolled {u:.4} reconstruction {r:.3e}");
        }
    }
    Ok(log)
}
