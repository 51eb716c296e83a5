//! Rendering and projection shared by the CLI and the HTTP API, so both
//! produce the same bytes for the same request.

use std::time::Instant;

use collage_core::collage::{render, EditRecipe, LayerDiagnostic, ModelInfo};
use collage_core::compositor::{poisson_blend, BlendProblem, SolverConfig};
use collage_core::image::{decode_mask, decode_png, encode_png, ImageSource};
use collage_core::nets::NoHooks;
use collage_core::projection::{project_z, project_zeta, Init, Projection, ProjectionConfig};
use collage_core::trainer::Bundle;
use collage_core::{CollageError, Result};
use collage_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Latent space searched by projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Z,
    Zeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectOptions {
    pub space: Space,
    pub steps: usize,
    /// Seeds the starting latent when the bundle has no encoder.
    pub seed: u64,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        ProjectOptions { space: Space::Z, steps: ProjectionConfig::default().steps, seed: 0 }
    }
}

/// Projects a `[3, R, R]` image onto the generator manifold.
pub fn project_image(bundle: &Bundle, image: &Tensor, class: usize, opts: &ProjectOptions) -> Result<Projection> {
    let info = bundle.info();
    let r = info.resolution;
    if image.shape() != [3, r, r] {
        return Err(CollageError::Validation(format!("image is {:?}, the model renders 3x{r}x{r}", image.shape())));
    }
    if class >= info.num_classes {
        return Err(CollageError::Validation(format!("class {class} is out of range (model has {})", info.num_classes)));
    }
    let init = if bundle.encoder.is_some() { Init::Encoder } else { Init::Random { seed: opts.seed } };
    let cfg = ProjectionConfig { steps: opts.steps, init, ..ProjectionConfig::default() };
    let (g, d, e) = (&bundle.generator, &bundle.discriminator, bundle.encoder.as_ref());
    match opts.space {
        Space::Z => project_z(image, class, g, d, e, &cfg),
        Space::Zeta => {
            let aux = bundle.aux.as_ref().ok_or_else(|| CollageError::Parameter("bundle has no trained aux networks".into()))?;
            project_zeta(image, class, g, d, e, aux, &cfg)
        }
    }
}

/// Hex SHA-256 of image bytes; the key under which projections are cached.
pub fn image_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Bytes of the recipe's real base image, when it has one and no latent.
pub fn base_image_bytes(recipe: &EditRecipe, images: &dyn ImageSource) -> Option<Result<Vec<u8>>> {
    if !recipe.needs_projection() {
        return None;
    }
    recipe.base.image_ref.as_deref().map(|r| images.fetch(r))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub resolve_ms: f64,
    pub render_ms: f64,
    pub encode_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub png: Vec<u8>,
    pub image: Tensor,
    pub layers: Vec<LayerDiagnostic>,
    pub timing: Timing,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Validates, resolves and renders a recipe. `base_latent` supplies the
/// projected latent of a real base image; without it such recipes fail
/// with a validation error.
pub fn render_recipe(bundle: &Bundle, recipe: &EditRecipe, images: &dyn ImageSource, base_latent: Option<&[f64]>) -> Result<RenderOutput> {
    let start = Instant::now();
    let info = bundle.info();
    let problems = recipe.check(&info);
    if !problems.is_empty() {
        return Err(CollageError::InvalidRecipe(problems));
    }
    let mut resolved = recipe.resolve(&info, images)?;
    if resolved.base_z.is_none() {
        resolved.base_z = base_latent.map(<[f64]>::to_vec);
    }
    if resolved.base_z.is_none() {
        return Err(CollageError::Validation("the base image has not been projected".into()));
    }
    let resolve_ms = ms(start);
    let t = Instant::now();
    let out = render(&bundle.generator, &resolved, &SolverConfig::default())?;
    let render_ms = ms(t);
    let t = Instant::now();
    let png = encode_png(&out.image)?;
    let encode_ms = ms(t);
    Ok(RenderOutput {
        png,
        image: out.image,
        layers: out.layers,
        timing: Timing { resolve_ms, render_ms, encode_ms, total_ms: ms(start) },
    })
}

/// Layer prefixes `{1}, {1,2}, …, {1..L}` used by the layer ablation.
pub fn layer_prefixes(info: &ModelInfo) -> Vec<Vec<usize>> {
    (1..=info.layers).map(|n| (1..=n).collect()).collect()
}

/// The recipe with every edit applied at exactly `layers`.
pub fn restrict_layers(recipe: &EditRecipe, layers: &[usize]) -> EditRecipe {
    let mut out = recipe.clone();
    for e in &mut out.label_edits {
        e.layers = layers.to_vec();
    }
    for e in &mut out.feature_edits {
        e.layers = layers.to_vec();
    }
    out
}

/// Horizontal strip of equally sized `[3, R, R]` images separated by white
/// columns.
pub fn side_by_side(images: &[Tensor], gap: usize) -> Result<Tensor> {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let total = images.len() * w + gap * images.len().saturating_sub(1);
    let mut out = Tensor::full(vec![3, h, total], 1.0);
    for (k, img) in images.iter().enumerate() {
        if img.shape() != [3, h, w] {
            return Err(CollageError::Validation("strip images differ in shape".into()));
        }
        let x0 = k * (w + gap);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[c, y, x0 + x], img.get(&[c, y, x]));
                }
            }
        }
    }
    Ok(out)
}

/// Naive pixel paste, the same paste after Poisson blending, and the
/// feature-space collage, left to right. The paste uses the first blend of
/// the first feature edit: its reference render is copied into the base
/// render inside its mask.
pub fn pixel_vs_internal(bundle: &Bundle, recipe: &EditRecipe, images: &dyn ImageSource, base_latent: Option<&[f64]>) -> Result<Tensor> {
    let internal = render_recipe(bundle, recipe, images, base_latent)?;
    let blend = recipe
        .feature_edits
        .first()
        .and_then(|e| e.blends.first())
        .ok_or_else(|| CollageError::InvalidRecipe(vec![collage_core::Diagnostic::new("/feature_edits", "the comparison needs at least one blend")]))?;
    let g = &bundle.generator;
    let reference = &recipe.references[blend.reference];
    let ref_img = g.generate(&reference.z, reference.class.unwrap_or(recipe.base.class), &NoHooks)?;
    let base = match &recipe.base.z {
        Some(z) => g.generate(z, recipe.base.class, &NoHooks)?,
        None => decode_png(&base_image_bytes(recipe, images).expect("recipe has a real base")?)?,
    };
    let mask = decode_mask(&images.fetch(&blend.mask)?)?;
    if mask.shape() != &base.shape()[1..] {
        return Err(CollageError::Validation(format!("mask {:?} does not match the image", mask.shape())));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut binary = Tensor::zeros(vec![h, w]);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if mask.get(&[y, x]) >= 0.5 {
                binary.set(&[y, x], 1.0);
            }
        }
    }
    let mut pasted = base.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if mask.get(&[y, x]) >= 0.5 {
                    pasted.set(&[c, y, x], ref_img.get(&[c, y, x]));
                }
            }
        }
    }
    let poisson = poisson_blend(&BlendProblem { source: ref_img, destination: base, mask: binary }, &SolverConfig::default())?;
    side_by_side(&[pasted, poisson, internal.image], 2)
}
