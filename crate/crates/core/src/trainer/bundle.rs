use std::fs::File;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{SyntheticDataset, SyntheticDatasetSpec};
use super::gan::{train_gan, GanTrainConfig};
use crate::checkpoint::Checkpoint;
use crate::collage::ModelInfo;
use crate::error::{CollageError, Result};
use crate::nets::{Discriminator, DiscriminatorConfig, Encoder, EncoderConfig, Generator, GeneratorConfig};
use crate::projection::{csv_err, encoder_loss, train_aux, train_encoder, AuxConfig, AuxNets, AuxTrainConfig, EncoderTrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const GENERATOR_FILE: &str = "generator.ncol";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ncol";
pub const ENCODER_FILE: &str = "encoder.ncol";
pub const AUX_FILE: &str = "aux.ncol";

/// Training stages in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gan,
    Encoder,
    Aux,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Gan, Stage::Encoder, Stage::Aux];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Encoder => "encoder",
            Stage::Aux => "aux",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainAllConfig {
    pub dataset: SyntheticDatasetSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub aux_net: AuxConfig,
    pub gan: GanTrainConfig,
    pub encoder: EncoderTrainConfig,
    pub aux: AuxTrainConfig,
}

impl Default for TrainAllConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        TrainAllConfig {
            dataset: SyntheticDatasetSpec::default(),
            aux_net: AuxConfig::scaled(generator.latent_dim),
            generator,
            discriminator: DiscriminatorConfig::default(),
            gan: GanTrainConfig::default(),
            encoder: EncoderTrainConfig::default(),
            aux: AuxTrainConfig::default(),
        }
    }
}

impl TrainAllConfig {
    /// Narrow models and short budgets that train on one CPU core in
    /// minutes.
    pub fn desk() -> Self {
        let generator = GeneratorConfig::desk();
        TrainAllConfig {
            dataset: SyntheticDatasetSpec { samples: 20_000, ..SyntheticDatasetSpec::default() },
            aux_net: AuxConfig::new(generator.latent_dim),
            generator,
            discriminator: DiscriminatorConfig::desk(),
            gan: GanTrainConfig { iterations: 3000, ..GanTrainConfig::default() },
            encoder: EncoderTrainConfig { steps: 1500, batch_size: 8, lr: 5e-4, ..EncoderTrainConfig::default() },
            aux: AuxTrainConfig { steps: 300, batch_size: 4, identity_steps: 1500, ..AuxTrainConfig::default() },
        }
    }

    /// 8x8, four-class models trained for a few dozen steps. Seconds on one
    /// core; for pipeline tests, not for editing quality.
    pub fn tiny() -> Self {
        let generator = GeneratorConfig { latent_dim: 8, num_classes: 4, base_channels: 8, num_resblocks: 1, output_channels: 3 };
        TrainAllConfig {
            dataset: SyntheticDatasetSpec { resolution: 8, num_classes: 4, samples: 256, seed: 0 },
            aux_net: AuxConfig { latent_dim: 8, hidden: [16, 64, 16] },
            discriminator: DiscriminatorConfig { widths: vec![8], feature_dim: 16, num_classes: 4, resolution: 8, input_channels: 3 },
            generator,
            gan: GanTrainConfig { iterations: 20, batch_size: 4, ..GanTrainConfig::default() },
            encoder: EncoderTrainConfig { steps: 10, batch_size: 4, lr: 1e-3, ..EncoderTrainConfig::default() },
            aux: AuxTrainConfig { steps: 3, batch_size: 2, identity_steps: 10, ..AuxTrainConfig::default() },
        }
    }

    /// Reseeds every stage from one number.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.gan.seed = seed.wrapping_mul(3).wrapping_add(1);
        self.encoder.seed = seed.wrapping_mul(3).wrapping_add(2);
        self.aux.seed = seed.wrapping_mul(3).wrapping_add(3);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainAllConfig,
    /// Completed stages, in order.
    pub stages: Vec<Stage>,
    /// Mean encoder loss on fresh samples before and after training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_baseline: Option<(f64, f64)>,
}

/// Trained models loaded from a bundle directory.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: Option<Encoder>,
    pub aux: Option<AuxNets>,
    pub manifest: Manifest,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?
            .ok_or_else(|| CollageError::Format(format!("{} has no {MANIFEST}", dir.display())))?;
        if !manifest.stages.contains(&Stage::Gan) {
            return Err(CollageError::Format("bundle has no trained generator".into()));
        }
        let load = |f: &str| Checkpoint::load(&dir.join(f));
        let encoder = if manifest.stages.contains(&Stage::Encoder) { Some(Encoder::from_checkpoint(&load(ENCODER_FILE)?)?) } else { None };
        let aux = if manifest.stages.contains(&Stage::Aux) { Some(AuxNets::from_checkpoint(&load(AUX_FILE)?)?) } else { None };
        Ok(Bundle {
            generator: Generator::from_checkpoint(&load(GENERATOR_FILE)?)?,
            discriminator: Discriminator::from_checkpoint(&load(DISCRIMINATOR_FILE)?)?,
            encoder,
            aux,
            manifest,
        })
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo::of(self.generator.config())
    }
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(File::open(path)?)?))
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(m)?)?;
    std::fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}

fn write_csv<const N: usize>(path: PathBuf, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Progress notifications from [`train_all`].
#[derive(Clone, Debug, PartialEq)]
pub enum StageEvent {
    Started(Stage),
    Skipped(Stage),
    Finished(Stage),
}

/// Runs the GAN, encoder and aux stages in order, writing each stage's
/// checkpoints to `dir` before the next starts. Stages already recorded in
/// the manifest are loaded instead of retrained. Later stages only read
/// earlier models, and every model is rounded to checkpoint precision when
/// its stage completes, so a resumed run matches an uninterrupted one.
pub fn train_all(cfg: &TrainAllConfig, dir: &Path, mut events: impl FnMut(StageEvent)) -> Result<Bundle> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = match read_manifest(dir)? {
        Some(m) if m.config != *cfg => {
            return Err(CollageError::Parameter(format!("{} was trained with a different configuration", dir.display())))
        }
        Some(m) => m,
        None => Manifest { config: cfg.clone(), stages: Vec::new(), encoder_baseline: None },
    };
    let done = |m: &Manifest, s: Stage| m.stages.contains(&s);

    let (generator, discriminator) = if done(&manifest, Stage::Gan) {
        events(StageEvent::Skipped(Stage::Gan));
        (
            Generator::from_checkpoint(&Checkpoint::load(&dir.join(GENERATOR_FILE))?)?,
            Discriminator::from_checkpoint(&Checkpoint::load(&dir.join(DISCRIMINATOR_FILE))?)?,
        )
    } else {
        events(StageEvent::Started(Stage::Gan));
        let data = SyntheticDataset::new(cfg.dataset.clone())?;
        let (mut g, mut d, log) = train_gan(&data, &cfg.generator, &cfg.discriminator, &cfg.gan, |row| {
            if row.iteration % 100 == 0 {
                log::info!("gan {}: d {:.4} g {:.4}", row.iteration, row.d_loss, row.g_loss);
            }
        })?;
        g.round_to_f32();
        d.round_to_f32();
        g.to_checkpoint()?.save(&dir.join(GENERATOR_FILE))?;
        d.to_checkpoint()?.save(&dir.join(DISCRIMINATOR_FILE))?;
        write_csv(dir.join("gan_log.csv"), ["iteration", "d_loss", "g_loss"], log.iter().map(|r| {
            [r.iteration.to_string(), r.d_loss.to_string(), r.g_loss.to_string()]
        }))?;
        manifest.stages.push(Stage::Gan);
        write_manifest(dir, &manifest)?;
        events(StageEvent::Finished(Stage::Gan));
        (g, d)
    };

    let encoder = if done(&manifest, Stage::Encoder) {
        events(StageEvent::Skipped(Stage::Encoder));
        Encoder::from_checkpoint(&Checkpoint::load(&dir.join(ENCODER_FILE))?)?
    } else {
        events(StageEvent::Started(Stage::Encoder));
        let ecfg = EncoderConfig { tower: cfg.discriminator.clone(), latent_dim: cfg.generator.latent_dim };
        let mut e = Encoder::new(ecfg, &mut ChaCha8Rng::seed_from_u64(cfg.encoder.seed))?;
        let eval_seed = cfg.encoder.seed ^ 0xe7a1;
        let before = encoder_loss(&generator, &discriminator, &e, 64, eval_seed)?;
        let curve = train_encoder(&generator, &discriminator, &mut e, &cfg.encoder)?;
        e.params_mut().round_to_f32();
        let after = encoder_loss(&generator, &discriminator, &e, 64, eval_seed)?;
        log::info!("encoder loss on fresh samples: {before:.4} -> {after:.4}");
        e.to_checkpoint()?.save(&dir.join(ENCODER_FILE))?;
        write_csv(dir.join("encoder_log.csv"), ["step", "loss"], curve.iter().enumerate().map(|(i, l)| [i.to_string(), l.to_string()]))?;
        manifest.stages.push(Stage::Encoder);
        manifest.encoder_baseline = Some((before, after));
        write_manifest(dir, &manifest)?;
        events(StageEvent::Finished(Stage::Encoder));
        e
    };

    let aux = if done(&manifest, Stage::Aux) {
        events(StageEvent::Skipped(Stage::Aux));
        AuxNets::from_checkpoint(&Checkpoint::load(&dir.join(AUX_FILE))?)?
    } else {
        events(StageEvent::Started(Stage::Aux));
        let mut aux = AuxNets::new(cfg.aux_net.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.aux.seed))?;
        let log = train_aux(&generator, &discriminator, &encoder, &mut aux, &cfg.aux)?;
        aux.params_mut().round_to_f32();
        aux.to_checkpoint()?.save(&dir.join(AUX_FILE))?;
        write_csv(
            dir.join("aux_log.csv"),
            ["step", "unrolled", "reconstruction"],
            log.unrolled.iter().zip(&log.reconstruction).enumerate().map(|(i, (u, r))| [i.to_string(), u.to_string(), r.to_string()]),
        )?;
        manifest.stages.push(Stage::Aux);
        write_manifest(dir, &manifest)?;
        events(StageEvent::Finished(Stage::Aux));
        aux
    };

    Ok(Bundle { generator, discriminator, encoder: Some(encoder), aux: Some(aux), manifest })
}
