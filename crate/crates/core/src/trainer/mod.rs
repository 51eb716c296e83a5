//! Desk-scale training: the synthetic shapes dataset, conditional GAN
//! training and the staged pipeline that produces a model bundle.

mod bundle;
mod dataset;
mod gan;

pub use bundle::{
    train_all, Bundle, Manifest, Stage, StageEvent, TrainAllConfig, AUX_FILE, DISCRIMINATOR_FILE, ENCODER_FILE, GENERATOR_FILE,
    MANIFEST,
};
pub use dataset::{channel_mean, hsv_to_rgb, rgb_to_hsv, Shape, SyntheticDataset, SyntheticDatasetSpec};
pub use gan::{train_gan, GanLogRow, GanTrainConfig};
