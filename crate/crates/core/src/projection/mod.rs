//! Manifold projection: recovering a latent whose rendering matches a given
//! image in discriminator feature space, optionally through an expanded
//! latent space learned by auxiliary networks.

mod aux;
mod latent;
mod loss;
mod train;

pub use aux::{AuxConfig, AuxNets};
pub use latent::{project_z, project_zeta, Init, Projection, ProjectionConfig};
pub use loss::{cosine_rows, loss_cosine};
pub use train::{
    encoder_loss, generated_batch, train_aux, train_encoder, AuxTrainConfig, AuxTrainLog, EncoderTrainConfig, GeneratedBatch,
};
pub(crate) use latent::csv_err;
