//! Semantic image collaging in the feature space of a class-conditional GAN.

pub mod checkpoint;
pub mod collage;
pub mod compositor;
pub mod error;
pub mod image;
pub mod nets;
pub mod optim;
pub mod params;
pub mod projection;
pub mod trainer;

pub use error::{CollageError, Diagnostic, Result};
