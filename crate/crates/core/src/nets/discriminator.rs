use collage_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Linear};
use super::spectral::{matrix_dims, SpectralState};
use crate::checkpoint::Checkpoint;
use crate::error::{CollageError, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Widths of the downsampling blocks, highest resolution first.
    pub widths: Vec<usize>,
    /// Width of the final 4x4 block; the length of the pooled feature vector.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub resolution: usize,
    pub input_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            widths: vec![32, 64, 128],
            feature_dim: 512,
            num_classes: 8,
            resolution: 32,
            input_channels: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig { widths: vec![8, 16, 32], feature_dim: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(CollageError::Parameter("discriminator widths must be positive".into()));
        }
        if self.resolution != 4 << self.widths.len() {
            return Err(CollageError::Parameter(format!(
                "{} downsampling blocks map {}x{} to {}x{}, expected 4x4",
                self.widths.len(),
                self.resolution,
                self.resolution,
                self.resolution >> self.widths.len(),
                self.resolution >> self.widths.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TowerBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Conv,
    downsample: bool,
    first: bool,
}

/// Residual feature extractor shared by the discriminator and the encoder.
#[derive(Clone, Debug)]
struct Tower {
    blocks: Vec<TowerBlock>,
    resolution: usize,
    input_channels: usize,
}

impl Tower {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &DiscriminatorConfig, rng: &mut R) -> Tower {
        let mut blocks = Vec::new();
        let mut cin = cfg.input_channels;
        let widths = cfg.widths.iter().map(|&w| (w, true)).chain(std::iter::once((cfg.feature_dim, false)));
        for (i, (w, down)) in widths.enumerate() {
            let name = format!("{prefix}.block{}", i + 1);
            blocks.push(TowerBlock {
                conv1: Conv::new(store, &format!("{name}.conv1"), cin, w, 3, rng),
                conv2: Conv::new(store, &format!("{name}.conv2"), w, w, 3, rng),
                skip: Conv::new(store, &format!("{name}.skip"), cin, w, 1, rng),
                downsample: down,
                first: i == 0,
            });
            cin = w;
        }
        Tower { blocks, resolution: cfg.resolution, input_channels: cfg.input_channels }
    }

    /// `[N, C, R, R]` image to pooled `[N, F]` features.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.input_channels || shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(CollageError::Tensor(TensorError::Dimension(format!(
                "expected images of shape [N, {}, {r}, {r}], got {shape:?}",
                self.input_channels,
                r = self.resolution
            ))));
        }
        let mut h = x;
        for b in &self.blocks {
            let mut t = if b.first { h } else { tape.relu(h)? };
            t = b.conv1.forward(tape, p, t)?;
            t = tape.relu(t)?;
            t = b.conv2.forward(tape, p, t)?;
            let mut s = h;
            if b.downsample {
                t = tape.avg_pool(t, 2)?;
                s = tape.avg_pool(s, 2)?;
            }
            s = b.skip.forward(tape, p, s)?;
            h = tape.add(t, s)?;
        }
        let h = tape.relu(h)?;
        Ok(tape.global_avg_pool(h)?)
    }

    fn kernels(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.conv1.w, b.conv2.w, b.skip.w]).collect()
    }
}

/// Output of [`Discriminator::forward`].
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// Pooled pre-head features `[N, F]`.
    pub features: Var,
    /// Unit-norm features `[N, F]`.
    pub psi: Var,
    /// Realness scores `[N]`.
    pub logit: Var,
}

/// Spectrally normalized projection discriminator.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    tower: Tower,
    head: Linear,
    embed: ParamId,
    spectral: Vec<(ParamId, SpectralState)>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(cfg: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let tower = Tower::new(&mut params, "d", &cfg, rng);
        let head = Linear::new(&mut params, "d.head", cfg.feature_dim, 1, true, rng);
        let embed = params.add("d.embed", glorot(vec![cfg.num_classes, cfg.feature_dim], cfg.num_classes, cfg.feature_dim, rng));
        let mut spectral = Vec::new();
        for id in tower.kernels().into_iter().chain([head.w, embed]) {
            let (rows, cols) = matrix_dims(params.get(id))?;
            spectral.push((id, SpectralState::new(rows, cols, rng)));
        }
        let mut d = Discriminator { cfg, params, tower, head, embed, spectral };
        // Settle the singular vector estimates before the first use.
        d.refresh_spectral(20)?;
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn spectral_states(&self) -> impl Iterator<Item = (&str, &SpectralState)> {
        self.spectral.iter().map(|(id, s)| (self.params.name(*id), s))
    }

    /// Runs `iters` power-iteration rounds on every normalized weight.
    pub fn refresh_spectral(&mut self, iters: usize) -> Result<()> {
        for (id, state) in &mut self.spectral {
            state.iterate(self.params.get(*id), iters)?;
        }
        Ok(())
    }

    /// Binds weights with spectral normalization applied using the stored
    /// singular vectors. When `trainable`, gradients reach the raw weights.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut bound = self.params.bind(tape, trainable)?;
        for (id, state) in &self.spectral {
            let raw = bound.leaves[id.index()];
            bound.vars[id.index()] = tape.spectral_normalize(raw, &state.u, &state.v)?;
        }
        Ok(bound)
    }

    /// One power-iteration round per weight, then a trainable binding.
    pub fn bind_train(&mut self, tape: &mut Tape) -> Result<Bound> {
        self.refresh_spectral(1)?;
        self.bind(tape, true)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, classes: Option<&[usize]>) -> Result<DiscOutput> {
        let features = self.tower.forward(tape, p, x)?;
        let psi = tape.normalize_rows(features)?;
        let score = self.head.forward(tape, p, features)?;
        let n = tape.shape(features)[0];
        let mut logit = tape.reshape(score, &[n])?;
        if let Some(classes) = classes {
            if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.num_classes) {
                return Err(CollageError::Parameter(format!("unknown class {c}")));
            }
            let e = tape.gather_rows(p[self.embed], classes)?;
            let proj = tape.row_dot(e, features)?;
            logit = tape.add(logit, proj)?;
        }
        Ok(DiscOutput { features, psi, logit })
    }

    /// Normalized feature vector of each image in a `[N, C, R, R]` batch.
    pub fn psi(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(images.clone())?;
        let out = self.forward(&mut tape, &p, x, None)?;
        Ok(tape.value(out.psi).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("discriminator", serde_json::to_value(&self.cfg)?);
        for (name, t) in self.params.iter() {
            ck.arrays.push((name.to_string(), t.clone()));
        }
        for (id, s) in &self.spectral {
            let name = self.params.name(*id);
            ck.running_stats.push((format!("{name}.sn_u"), Tensor::from_vec(s.u.clone())));
            ck.running_stats.push((format!("{name}.sn_v"), Tensor::from_vec(s.v.clone())));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("discriminator")?;
        let cfg: DiscriminatorConfig = serde_json::from_value(ck.config.clone())?;
        let mut d = Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        d.params.load_from(ck.arrays.iter().map(|(n, t)| (n.as_str(), t)))?;
        for (id, s) in &mut d.spectral {
            let name = d.params.name(*id).to_string();
            s.u = ck.running_stat(&format!("{name}.sn_u"), s.u.len())?;
            s.v = ck.running_stat(&format!("{name}.sn_v"), s.v.len())?;
        }
        Ok(d)
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for (_, s) in &mut self.spectral {
            s.u.iter_mut().chain(s.v.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub tower: DiscriminatorConfig,
    pub latent_dim: usize,
}

/// Image-to-latent encoder with the discriminator's architecture and a
/// latent-vector head.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: ParamStore,
    tower: Tower,
    head: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.tower.validate()?;
        if cfg.latent_dim == 0 {
            return Err(CollageError::Parameter("encoder latent_dim must be positive".into()));
        }
        let mut params = ParamStore::new();
        let tower = Tower::new(&mut params, "e", &cfg.tower, rng);
        let head = Linear::new(&mut params, "e.head", cfg.tower.feature_dim, cfg.latent_dim, true, rng);
        Ok(Encoder { cfg, params, tower, head })
    }

    pub fn config(&self) -> &EncoderConfig {
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

    /// `[N, C, R, R]` images to `[N, latent_dim]` latents.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let f = self.tower.forward(tape, p, x)?;
        self.head.forward(tape, p, f)
    }

    /// Latent code of a single `[C, R, R]` image.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = tape.constant(image.clone().reshape(shape)?)?;
        let z = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("encoder", serde_json::to_value(&self.cfg)?);
        for (name, t) in self.params.iter() {
            ck.arrays.push((name.to_string(), t.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("encoder")?;
        let cfg: EncoderConfig = serde_json::from_value(ck.config.clone())?;
        let mut e = Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        e.params.load_from(ck.arrays.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(e)
    }
}
