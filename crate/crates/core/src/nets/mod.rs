//! Conditional GAN generator, spectrally normalized discriminator and the
//! projection encoder.

mod discriminator;
mod generator;
mod layers;
pub mod spectral;

pub use discriminator::{DiscOutput, Discriminator, DiscriminatorConfig, Encoder, EncoderConfig};
pub use generator::{GenForward, Generator, GeneratorConfig, GeneratorHooks, NoHooks};
pub use layers::{BatchStats, CbnLayer, Conv, Linear, Modulation, NormMode};
pub use spectral::{spectral_normalize, SpectralState};

use collage_tensor::{Tape, Var};

use crate::error::Result;
use crate::params::Bound;

/// Conditional batch normalization of `x` with one class per batch element.
pub fn cbn_forward(
    tape: &mut Tape,
    p: &Bound,
    layer: &CbnLayer,
    x: Var,
    classes: &[usize],
    mode: NormMode,
) -> Result<(Var, Option<BatchStats>)> {
    layer.forward(tape, p, x, Modulation::Classes(classes), mode)
}
