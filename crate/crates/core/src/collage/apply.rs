use collage_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::blend::{blend_features, BlendSpec, BlendTerm};
use super::recipe::{FeatureBlend, ResolvedRecipe};
use crate::compositor::{poisson_blend, BlendProblem, SolverConfig};
use crate::error::{CollageError, Result};
use crate::nets::{Generator, GeneratorHooks, NoHooks, NormMode};

/// What happened at one interception layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub resolution: usize,
    pub label_edit: bool,
    pub feature_edit: bool,
}

#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[3, R, R]` in `[0, 1]`.
    pub image: Tensor,
    /// Base feature maps after editing, `[C, h, w]` per interception layer.
    pub features: Vec<Tensor>,
    pub layers: Vec<LayerDiagnostic>,
}

struct RecipeHooks {
    maps: Vec<Option<Tensor>>,
    blends: Vec<Option<(BlendSpec, Vec<Tensor>)>>,
}

impl GeneratorHooks for RecipeHooks {
    fn class_map(&self, layer: usize) -> Option<&Tensor> {
        self.maps.get(layer - 1).and_then(Option::as_ref)
    }

    fn intercept(&self, tape: &mut Tape, layer: usize, feature: Var) -> Result<Var> {
        let Some(Some((spec, refs))) = self.blends.get(layer - 1) else {
            return Ok(feature);
        };
        let mut features = vec![feature];
        for r in refs {
            features.push(tape.constant(r.clone())?);
        }
        blend_features(tape, &features, spec)
    }
}

/// Unedited render that also returns every interception feature map.
pub fn render_with_features(g: &Generator, z: &[f64], class: usize, hooks: &dyn GeneratorHooks) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false)?;
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?)?;
    let out = g.forward(&mut tape, &p, zv, &[class], NormMode::Edit, hooks)?;
    let r = g.config().resolution();
    let image = tape.value(out.image).clone().reshape(vec![g.config().output_channels, r, r])?;
    let feats = out.features.iter().map(|&f| tape.value(f).clone()).collect();
    Ok((image, feats))
}

fn layer_spec(blend: &FeatureBlend, size: usize, channels: usize) -> Result<BlendSpec> {
    let spatial = blend.spec.resample(size)?;
    let terms = spatial
        .terms
        .into_iter()
        .zip(&blend.channels)
        .map(|(t, subset)| {
            let Some(subset) = subset else { return Ok(t) };
            let mut mask = Tensor::zeros(vec![channels, size, size]);
            for &c in subset {
                if c >= channels {
                    return Err(CollageError::Validation(format!("channel {c} out of range for a {channels}-channel layer")));
                }
                mask.data_mut()[c * size * size..(c + 1) * size * size].copy_from_slice(t.mask.data());
            }
            Ok(BlendTerm { mask, ..t })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlendSpec::new(terms))
}

/// Renders a recipe: one unedited pass per reference latent, then one edited
/// pass of the base latent. Label edits replace the class conditioning of
/// every normalization at the edited layer's resolution; feature edits
/// replace the layer's output before the next block runs.
pub fn apply_recipe(g: &Generator, recipe: &ResolvedRecipe) -> Result<Rendered> {
    let cfg = g.config();
    let depth = cfg.num_layers();
    let z = recipe
        .base_z
        .as_deref()
        .ok_or_else(|| CollageError::Validation("the base latent is missing; project the base image first".into()))?;

    let mut maps: Vec<Option<Tensor>> = vec![None; depth];
    for e in &recipe.label_edits {
        for &l in &e.layers {
            if l == 0 || l > depth {
                return Err(CollageError::Validation(format!("layer {l} out of range 1..={depth}")));
            }
            maps[l - 1] = Some(e.edit.resample(cfg.layer_resolution(l))?.weights().clone());
        }
    }

    let mut ref_features: Vec<Option<Vec<Tensor>>> = vec![None; recipe.references.len()];
    let mut blends: Vec<Option<(BlendSpec, Vec<Tensor>)>> = vec![None; depth];
    for e in &recipe.feature_edits {
        for term in &e.edit.spec.terms {
            let i = term.source - 1;
            if ref_features[i].is_none() {
                let (zr, cr) = &recipe.references[i];
                ref_features[i] = Some(render_with_features(g, zr, *cr, &NoHooks)?.1);
            }
        }
        for &l in &e.layers {
            if l == 0 || l > depth {
                return Err(CollageError::Validation(format!("layer {l} out of range 1..={depth}")));
            }
            let size = cfg.layer_resolution(l);
            let spec = layer_spec(&e.edit, size, cfg.layer_channels(l))?;
            let refs = ref_features
                .iter()
                .map(|feats| match feats {
                    Some(f) => f[l - 1].clone(),
                    None => Tensor::zeros(vec![1, cfg.layer_channels(l), size, size]),
                })
                .collect();
            blends[l - 1] = Some((spec, refs));
        }
    }

    let layers = (1..=depth)
        .filter(|l| maps[l - 1].is_some() || blends[l - 1].is_some())
        .map(|l| LayerDiagnostic {
            layer: l,
            resolution: cfg.layer_resolution(l),
            label_edit: maps[l - 1].is_some(),
            feature_edit: blends[l - 1].is_some(),
        })
        .collect();
    let hooks = RecipeHooks { maps, blends };
    let (image, feats) = render_with_features(g, z, recipe.base_class, &hooks)?;
    let features = feats
        .into_iter()
        .map(|f| {
            let s = f.shape()[1..].to_vec();
            f.reshape(s)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Rendered { image, features, layers })
}

/// [`apply_recipe`] followed by the optional Poisson post-process. The
/// edited render is pasted into the real base image when there is one, and
/// into the unedited render otherwise.
pub fn render(g: &Generator, recipe: &ResolvedRecipe, solver: &SolverConfig) -> Result<Rendered> {
    let mut out = apply_recipe(g, recipe)?;
    if let Some(mask) = &recipe.poisson_mask {
        let destination = match &recipe.base_image {
            Some(img) => img.clone(),
            None => g.generate(recipe.base_z.as_deref().unwrap_or_default(), recipe.base_class, &NoHooks)?,
        };
        let binary = Tensor::new(mask.shape().to_vec(), mask.data().iter().map(|&m| if m >= 0.5 { 1.0 } else { 0.0 }).collect())?;
        out.image = poisson_blend(&BlendProblem { source: out.image, destination, mask: binary }, solver)?;
    }
    Ok(out)
}
