use collage_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SyntheticDataset;
use crate::error::{CollageError, Result};
use crate::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NoHooks, NormMode};
use crate::optim::{step_store, GradPolicy, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Discriminator updates per generator update.
    pub n_dis: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig { iterations: 20_000, batch_size: 16, lr_g: 2e-4, lr_d: 2e-4, beta1: 0.0, beta2: 0.9, n_dis: 1, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// `mean(relu(1 + sign·x))`.
fn hinge(tape: &mut Tape, x: Var, sign: f64) -> Result<Var> {
    let t = tape.scale(x, sign)?;
    let t = tape.add_scalar(t, 1.0)?;
    let t = tape.relu(t)?;
    Ok(tape.mean(t)?)
}

/// Conditional GAN training with the hinge loss and Adam.
///
/// Models are initialized from `cfg.seed`, so a run is fully determined by
/// the dataset and the config.
pub fn train_gan(
    data: &SyntheticDataset,
    g_cfg: &GeneratorConfig,
    d_cfg: &DiscriminatorConfig,
    cfg: &GanTrainConfig,
    mut on_log: impl FnMut(&GanLogRow),
) -> Result<(Generator, Discriminator, Vec<GanLogRow>)> {
    if cfg.batch_size < 2 || cfg.n_dis == 0 {
        return Err(CollageError::Parameter("GAN training needs batch size >= 2 and n_dis >= 1".into()));
    }
    if g_cfg.resolution() != d_cfg.resolution || data.spec().resolution != d_cfg.resolution {
        return Err(CollageError::Parameter("generator, discriminator and dataset resolutions differ".into()));
    }
    if g_cfg.num_classes != d_cfg.num_classes || data.spec().num_classes != g_cfg.num_classes {
        return Err(CollageError::Parameter("generator, discriminator and dataset class counts differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = Generator::new(g_cfg.clone(), &mut rng)?;
    let mut d = Discriminator::new(d_cfg.clone(), &mut rng)?;
    let mut opt_g = Optimizer::adam(cfg.lr_g, cfg.beta1, cfg.beta2);
    let mut opt_d = Optimizer::adam(cfg.lr_d, cfg.beta1, cfg.beta2);
    let n = cfg.batch_size;
    let k = g_cfg.num_classes;
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let mut d_loss = 0.0;
        for _ in 0..cfg.n_dis {
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
            let (real, real_classes) = data.batch(&indices);
            let z = Tensor::randn(vec![n, g_cfg.latent_dim], 1.0, &mut rng);
            let fake_classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();

            let mut tape = Tape::new();
            let gp = g.bind(&mut tape, false)?;
            let zv = tape.constant(z)?;
            let fake = g.forward(&mut tape, &gp, zv, &fake_classes, NormMode::Train, &NoHooks)?.image;
            let fake = tape.constant(tape.value(fake).clone())?;
            let dp = d.bind_train(&mut tape)?;
            let xr = tape.constant(real)?;
            let real_logit = d.forward(&mut tape, &dp, xr, Some(&real_classes))?.logit;
            let fake_logit = d.forward(&mut tape, &dp, fake, Some(&fake_classes))?.logit;
            let lr = hinge(&mut tape, real_logit, -1.0)?;
            let lf = hinge(&mut tape, fake_logit, 1.0)?;
            let loss = tape.add(lr, lf)?;
            d_loss = tape.value(loss).item()?;
            tape.backward(loss)?;
            let mut grads = dp.grads(&tape, d.params());
            step_store(&mut opt_d, d.params_mut(), &mut grads, GradPolicy::default());
        }

        let z = Tensor::randn(vec![n, g_cfg.latent_dim], 1.0, &mut rng);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let gp = g.bind(&mut tape, true)?;
        let dp = d.bind(&mut tape, false)?;
        let zv = tape.constant(z)?;
        let out = g.forward(&mut tape, &gp, zv, &classes, NormMode::Train, &NoHooks)?;
        let logit = d.forward(&mut tape, &dp, out.image, Some(&classes))?.logit;
        let mean = tape.mean(logit)?;
        let loss = tape.scale(mean, -1.0)?;
        let g_loss = tape.value(loss).item()?;
        tape.backward(loss)?;
        let mut grads = gp.grads(&tape, g.params());
        step_store(&mut opt_g, g.params_mut(), &mut grads, GradPolicy::default());
        g.absorb_stats(&out.stats);

        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(CollageError::Training(format!("non-finite loss at iteration {it}")));
        }
        let row = GanLogRow { iteration: it, d_loss, g_loss };
        on_log(&row);
        log.push(row);
    }
    Ok((g, d, log))
}
