use collage_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::layers::{BatchStats, CbnLayer, Conv, Linear, Modulation, NormMode};
use crate::checkpoint::Checkpoint;
use crate::error::{CollageError, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_resblocks: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { latent_dim: 128, num_classes: 8, base_channels: 64, num_resblocks: 3, output_channels: 3 }
    }
}

impl GeneratorConfig {
    /// Narrow variant used for fast end-to-end training on one CPU core.
    pub fn desk() -> Self {
        GeneratorConfig { latent_dim: 32, base_channels: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CollageError::Parameter(format!("generator config: {m}")));
        if self.num_resblocks < 1 {
            return bad("at least one residual block is required");
        }
        if self.num_resblocks > 8 {
            return bad("more than 8 residual blocks is not supported");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.output_channels == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    /// Output side length, `4·2^L`.
    pub fn resolution(&self) -> usize {
        4 << self.num_resblocks
    }

    /// Number of interception points: the seed map plus one per block.
    pub fn num_layers(&self) -> usize {
        self.num_resblocks + 1
    }

    /// Side length of interception layer `layer` (1-based).
    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << (layer - 1)
    }

    /// Channel width of interception layer `layer` (1-based). Widths halve
    /// after the first block, never dropping below 8.
    pub fn layer_channels(&self, layer: usize) -> usize {
        let halvings = layer.saturating_sub(2);
        (self.base_channels >> halvings).max(self.base_channels.min(8))
    }
}

/// Per-layer edit callbacks consulted during a forward pass.
pub trait GeneratorHooks {
    /// Class mixture weights for the normalization layers operating at
    /// interception layer `layer`, or `None` to use the sample classes.
    fn class_map(&self, _layer: usize) -> Option<&Tensor> {
        None
    }

    /// Gives the caller a chance to replace the feature map at `layer`.
    fn intercept(&self, _tape: &mut Tape, _layer: usize, feature: Var) -> Result<Var> {
        Ok(feature)
    }
}

/// Hooks that leave the generator unchanged.
pub struct NoHooks;

impl GeneratorHooks for NoHooks {}

#[derive(Clone, Debug)]
struct GenBlock {
    norm1: CbnLayer,
    conv1: Conv,
    norm2: CbnLayer,
    conv2: Conv,
    skip: Conv,
}

/// Result of a generator forward pass.
#[derive(Clone, Debug)]
pub struct GenForward {
    /// `[N, C, R, R]` image in `[0, 1]`.
    pub image: Var,
    /// Interception-point features, index 0 is layer 1 (the 4x4 seed map).
    pub features: Vec<Var>,
    /// Training-mode batch statistics, in [`Generator::norm_layers`] order.
    pub stats: Vec<BatchStats>,
}

/// Class-conditional ResNet generator.
///
/// Each block is pre-activation: `CBN → relu → upsample → conv → CBN → relu
/// → conv`, plus a 1x1 skip. Every interception layer therefore feeds at
/// least one conditional normalization at its own resolution.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    seed: Linear,
    blocks: Vec<GenBlock>,
    final_norm: CbnLayer,
    to_rgb: Conv,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let c1 = cfg.layer_channels(1);
        let seed = Linear::new(&mut params, "g.seed", cfg.latent_dim, c1 * 16, true, rng);
        let mut blocks = Vec::with_capacity(cfg.num_resblocks);
        for b in 1..=cfg.num_resblocks {
            let (cin, cout) = (cfg.layer_channels(b), cfg.layer_channels(b + 1));
            let name = format!("g.block{b}");
            blocks.push(GenBlock {
                norm1: CbnLayer::new(&mut params, &format!("{name}.norm1"), cfg.num_classes, cin),
                conv1: Conv::new(&mut params, &format!("{name}.conv1"), cin, cout, 3, rng),
                norm2: CbnLayer::new(&mut params, &format!("{name}.norm2"), cfg.num_classes, cout),
                conv2: Conv::new(&mut params, &format!("{name}.conv2"), cout, cout, 3, rng),
                skip: Conv::new(&mut params, &format!("{name}.skip"), cin, cout, 1, rng),
            });
        }
        let last = cfg.layer_channels(cfg.num_layers());
        let final_norm = CbnLayer::new(&mut params, "g.final_norm", cfg.num_classes, last);
        let to_rgb = Conv::new(&mut params, "g.to_rgb", last, cfg.output_channels, 3, rng);
        Ok(Generator { cfg, params, seed, blocks, final_norm, to_rgb })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    /// Every conditional normalization in forward order, each tagged with the
    /// interception layer whose resolution it operates at.
    pub fn norm_layers(&self) -> Vec<(usize, &CbnLayer)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((i + 1, &b.norm1));
            out.push((i + 2, &b.norm2));
        }
        out.push((self.cfg.num_layers(), &self.final_norm));
        out
    }

    fn norm_layers_mut(&mut self) -> Vec<&mut CbnLayer> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.norm1);
            out.push(&mut b.norm2);
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Folds training-mode statistics from [`GenForward::stats`] into the
    /// running estimates used in edit mode.
    pub fn absorb_stats(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.norm_layers_mut().into_iter().zip(stats) {
            layer.absorb(s);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        classes: &[usize],
        mode: NormMode,
        hooks: &dyn GeneratorHooks,
    ) -> Result<GenForward> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim {
            return Err(CollageError::Tensor(collage_tensor::TensorError::Dimension(format!(
                "latent batch has shape {zs:?}, expected [N, {}]",
                self.cfg.latent_dim
            ))));
        }
        let n = zs[0];
        let mut stats = Vec::new();
        let mut features = Vec::with_capacity(self.cfg.num_layers());

        let mut norm = |tape: &mut Tape, layer: &CbnLayer, at: usize, x: Var| -> Result<Var> {
            let modulation = match hooks.class_map(at) {
                Some(map) => Modulation::Map(map),
                None => Modulation::Classes(classes),
            };
            let (y, s) = layer.forward(tape, p, x, modulation, mode)?;
            stats.extend(s);
            Ok(y)
        };

        let h = self.seed.forward(tape, p, z)?;
        let h = tape.reshape(h, &[n, self.cfg.layer_channels(1), 4, 4])?;
        let mut h = hooks.intercept(tape, 1, h)?;
        features.push(h);

        for (i, b) in self.blocks.iter().enumerate() {
            let (at_in, at_out) = (i + 1, i + 2);
            let t = norm(tape, &b.norm1, at_in, h)?;
            let t = tape.relu(t)?;
            let t = tape.upsample_nearest(t, 2)?;
            let t = b.conv1.forward(tape, p, t)?;
            let t = norm(tape, &b.norm2, at_out, t)?;
            let t = tape.relu(t)?;
            let t = b.conv2.forward(tape, p, t)?;
            let s = b.skip.forward(tape, p, h)?;
            let s = tape.upsample_nearest(s, 2)?;
            let out = tape.add(t, s)?;
            h = hooks.intercept(tape, at_out, out)?;
            features.push(h);
        }

        let t = norm(tape, &self.final_norm, self.cfg.num_layers(), h)?;
        let t = tape.relu(t)?;
        let t = self.to_rgb.forward(tape, p, t)?;
        let t = tape.tanh(t)?;
        let t = tape.scale(t, 0.5)?;
        let image = tape.add_scalar(t, 0.5)?;
        Ok(GenForward { image, features, stats })
    }

    /// Renders one image `[C, R, R]` in edit mode.
    pub fn generate(&self, z: &[f64], class: usize, hooks: &dyn GeneratorHooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?)?;
        let out = self.forward(&mut tape, &p, zv, &[class], NormMode::Edit, hooks)?;
        let r = self.cfg.resolution();
        Ok(tape.value(out.image).clone().reshape(vec![self.cfg.output_channels, r, r])?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("generator", serde_json::to_value(&self.cfg)?);
        for (name, t) in self.params.iter() {
            ck.arrays.push((name.to_string(), t.clone()));
        }
        for (_, layer) in self.norm_layers() {
            ck.running_stats.push((format!("{}.running_mean", layer.name), Tensor::from_vec(layer.running_mean.clone())));
            ck.running_stats.push((format!("{}.running_var", layer.name), Tensor::from_vec(layer.running_var.clone())));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("generator")?;
        let cfg: GeneratorConfig = serde_json::from_value(ck.config.clone())?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::new(cfg, &mut rng)?;
        g.params.load_from(ck.arrays.iter().map(|(n, t)| (n.as_str(), t)))?;
        for layer in g.norm_layers_mut() {
            layer.running_mean = ck.running_stat(&format!("{}.running_mean", layer.name), layer.channels)?;
            layer.running_var = ck.running_stat(&format!("{}.running_var", layer.name), layer.channels)?;
            if layer.running_var.iter().any(|v| *v < 0.0) {
                return Err(CollageError::Format(format!("{}: negative running variance", layer.name)));
            }
        }
        Ok(g)
    }

    /// Rounds weights and running statistics to checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for layer in self.norm_layers_mut() {
            layer.running_mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
            layer.running_var.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
