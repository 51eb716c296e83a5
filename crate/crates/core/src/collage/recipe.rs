//! Declarative edit recipes: the JSON document shared by the CLI, the HTTP
//! service and the studio, and its validated in-memory form.

use collage_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::blend::{BlendSpec, BlendTerm, MASK_TOL};
use super::class_map::{make_class_map, ClassMap, Region};
use crate::error::{CollageError, Diagnostic, Result};
use crate::image::{decode_mask, decode_png, ImageSource};
use crate::nets::GeneratorConfig;

/// Shape facts about a generator that recipes are validated against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub layers: usize,
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub resolution: usize,
}

impl ModelInfo {
    pub fn of(cfg: &GeneratorConfig) -> Self {
        let layers = cfg.num_layers();
        ModelInfo {
            layers,
            resolutions: (1..=layers).map(|l| cfg.layer_resolution(l)).collect(),
            channels: (1..=layers).map(|l| cfg.layer_channels(l)).collect(),
            num_classes: cfg.num_classes,
            latent_dim: cfg.latent_dim,
            resolution: cfg.resolution(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRecipe {
    pub base: BaseSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<ReferenceLatent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_edits: Vec<LabelEdit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_edits: Vec<FeatureEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postprocess: Option<PostProcess>,
}

/// Either a latent to render or a real image to project first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLatent {
    pub z: Vec<f64>,
    /// Class used to render the reference; defaults to the base class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEdit {
    pub layers: Vec<usize>,
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
    pub base_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub mask: String,
    pub class: usize,
    #[serde(default = "full_intensity")]
    pub intensity: f64,
}

fn full_intensity() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEdit {
    pub layers: Vec<usize>,
    pub blends: Vec<BlendRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendRef {
    /// Index into `references`.
    #[serde(rename = "ref")]
    pub reference: usize,
    pub mask: String,
    /// `[dy, dx]` in output pixels.
    #[serde(default)]
    pub shift: [i64; 2],
    /// Restricts the mask to these channels; all channels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostProcess {
    pub poisson: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl EditRecipe {
    /// Parses JSON, reporting schema errors with the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_from_path(&e.path().to_string());
            CollageError::InvalidRecipe(vec![Diagnostic { pointer, message: e.inner().to_string() }])
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// True when the base is a real image that still needs projecting.
    pub fn needs_projection(&self) -> bool {
        self.base.z.is_none() && self.base.image_ref.is_some()
    }

    /// Every interception layer the recipe touches, ascending.
    pub fn touched_layers(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .label_edits
            .iter()
            .flat_map(|e| e.layers.iter().copied())
            .chain(self.feature_edits.iter().flat_map(|e| e.layers.iter().copied()))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Structural checks that need no image data.
    pub fn check(&self, info: &ModelInfo) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |pointer: String, message: String| out.push(Diagnostic { pointer, message });
        let k = info.num_classes;
        match (&self.base.z, &self.base.image_ref) {
            (Some(z), _) if z.len() != info.latent_dim => {
                err("/base/z".into(), format!("latent has {} values, model expects {}", z.len(), info.latent_dim))
            }
            (None, None) => err("/base".into(), "base needs a latent `z` or an `image_ref`".into()),
            _ => {}
        }
        if let Some(i) = self.base.z.as_ref().and_then(|z| z.iter().position(|v| !v.is_finite())) {
            err(format!("/base/z/{i}"), "latent values must be finite".into());
        }
        if self.base.class >= k {
            err("/base/class".into(), format!("class {} out of range 0..{k}", self.base.class));
        }
        for (i, r) in self.references.iter().enumerate() {
            if r.z.len() != info.latent_dim {
                err(format!("/references/{i}/z"), format!("latent has {} values, model expects {}", r.z.len(), info.latent_dim));
            }
            if let Some(j) = r.z.iter().position(|v| !v.is_finite()) {
                err(format!("/references/{i}/z/{j}"), "latent values must be finite".into());
            }
            if let Some(c) = r.class.filter(|&c| c >= k) {
                err(format!("/references/{i}/class"), format!("class {c} out of range 0..{k}"));
            }
        }
        let mut label_owner = vec![None; info.layers + 1];
        for (i, e) in self.label_edits.iter().enumerate() {
            let at = format!("/label_edits/{i}");
            check_layers(&e.layers, info.layers, i, &at, &mut label_owner, &mut err);
            if e.base_class >= k {
                err(format!("{at}/base_class"), format!("class {} out of range 0..{k}", e.base_class));
            }
            for (j, r) in e.regions.iter().enumerate() {
                if r.class >= k {
                    err(format!("{at}/regions/{j}/class"), format!("class {} out of range 0..{k}", r.class));
                }
                if !(0.0..=1.0).contains(&r.intensity) {
                    err(format!("{at}/regions/{j}/intensity"), format!("intensity {} outside [0, 1]", r.intensity));
                }
            }
        }
        let mut feature_owner = vec![None; info.layers + 1];
        for (i, e) in self.feature_edits.iter().enumerate() {
            let at = format!("/feature_edits/{i}");
            check_layers(&e.layers, info.layers, i, &at, &mut feature_owner, &mut err);
            for (j, b) in e.blends.iter().enumerate() {
                if b.reference >= self.references.len() {
                    err(format!("{at}/blends/{j}/ref"), format!("no reference latent {}", b.reference));
                }
                if let Some(ch) = &b.channels {
                    let narrowest = e.layers.iter().filter(|&&l| (1..=info.layers).contains(&l)).map(|&l| info.channels[l - 1]).min();
                    if let (Some(n), Some(m)) = (narrowest, ch.iter().position(|&c| Some(c) >= narrowest)) {
                        err(format!("{at}/blends/{j}/channels/{m}"), format!("channel {} out of range for a {n}-channel layer", ch[m]));
                    }
                }
            }
        }
        if let Some(pp) = &self.postprocess {
            if pp.poisson && pp.mask.is_none() {
                err("/postprocess/mask".into(), "Poisson blending needs a mask".into());
            }
        }
        out
    }

    /// Validates the recipe and decodes every mask and image it references.
    pub fn resolve(&self, info: &ModelInfo, images: &dyn ImageSource) -> Result<ResolvedRecipe> {
        let mut diags = self.check(info);
        if !diags.is_empty() {
            return Err(CollageError::InvalidRecipe(diags));
        }
        let r = info.resolution;
        let mask = |pointer: String, reference: &str, diags: &mut Vec<Diagnostic>| -> Option<Tensor> {
            match images.fetch(reference).and_then(|b| decode_mask(&b)) {
                Ok(m) if m.shape() == [r, r] => Some(m),
                Ok(m) => {
                    diags.push(Diagnostic { pointer, message: format!("mask is {:?}, expected {r}x{r}", m.shape()) });
                    None
                }
                Err(e) => {
                    diags.push(Diagnostic { pointer, message: e.to_string() });
                    None
                }
            }
        };

        let base_image = match (&self.base.z, &self.base.image_ref) {
            (None, Some(reference)) => match images.fetch(reference).and_then(|b| decode_png(&b)) {
                Ok(img) if img.shape() == [3, r, r] => Some(img),
                Ok(img) => {
                    diags.push(Diagnostic { pointer: "/base/image_ref".into(), message: format!("image is {:?}, expected 3x{r}x{r}", img.shape()) });
                    None
                }
                Err(e) => {
                    diags.push(Diagnostic { pointer: "/base/image_ref".into(), message: e.to_string() });
                    None
                }
            },
            _ => None,
        };

        let mut label_edits = Vec::new();
        for (i, e) in self.label_edits.iter().enumerate() {
            let mut regions = Vec::new();
            for (j, reg) in e.regions.iter().enumerate() {
                if let Some(m) = mask(format!("/label_edits/{i}/regions/{j}/mask"), &reg.mask, &mut diags) {
                    regions.push(Region { mask: m, class: reg.class, intensity: reg.intensity });
                }
            }
            if regions.len() == e.regions.len() {
                match make_class_map(&regions, e.base_class, info.num_classes, (r, r)) {
                    Ok(map) => label_edits.push(LayerEdit { layers: e.layers.clone(), edit: map }),
                    Err(err) => diags.push(Diagnostic { pointer: format!("/label_edits/{i}"), message: err.to_string() }),
                }
            }
        }

        let mut feature_edits = Vec::new();
        for (i, e) in self.feature_edits.iter().enumerate() {
            let mut terms = Vec::new();
            for (j, b) in e.blends.iter().enumerate() {
                if let Some(m) = mask(format!("/feature_edits/{i}/blends/{j}/mask"), &b.mask, &mut diags) {
                    terms.push(BlendTerm { source: b.reference + 1, mask: m, shift: (b.shift[0] as isize, b.shift[1] as isize) });
                }
            }
            if terms.len() != e.blends.len() {
                continue;
            }
            let mut total = vec![0.0; r * r];
            for t in &terms {
                total.iter_mut().zip(t.mask.data()).for_each(|(a, m)| *a += m);
            }
            if let Some(v) = total.iter().find(|v| **v > 1.0 + MASK_TOL) {
                diags.push(Diagnostic { pointer: format!("/feature_edits/{i}/blends"), message: format!("masks sum to {v} at some pixel, at most 1 allowed") });
                continue;
            }
            let channels = e.blends.iter().map(|b| b.channels.clone()).collect();
            feature_edits.push(LayerEdit { layers: e.layers.clone(), edit: FeatureBlend { spec: BlendSpec::new(terms), channels } });
        }

        let poisson_mask = match &self.postprocess {
            Some(PostProcess { poisson: true, mask: Some(reference) }) => mask("/postprocess/mask".into(), reference, &mut diags),
            _ => None,
        };
        if let Some(m) = &poisson_mask {
            let on_border = |i: usize| {
                let (y, x) = (i / r, i % r);
                y == 0 || x == 0 || y == r - 1 || x == r - 1
            };
            if (0..r * r).any(|i| on_border(i) && m.data()[i] >= 0.5) {
                diags.push(Diagnostic { pointer: "/postprocess/mask".into(), message: "Poisson mask must stay off the image border".into() });
            }
        }

        if !diags.is_empty() {
            return Err(CollageError::InvalidRecipe(diags));
        }
        Ok(ResolvedRecipe {
            base_z: self.base.z.clone(),
            base_image,
            base_class: self.base.class,
            references: self.references.iter().map(|r| (r.z.clone(), r.class.unwrap_or(self.base.class))).collect(),
            label_edits,
            feature_edits,
            poisson_mask,
        })
    }
}

fn check_layers(
    layers: &[usize],
    depth: usize,
    edit: usize,
    at: &str,
    owner: &mut [Option<usize>],
    err: &mut impl FnMut(String, String),
) {
    if layers.is_empty() {
        err(format!("{at}/layers"), "at least one layer is required".into());
    }
    for (j, &l) in layers.iter().enumerate() {
        if l == 0 || l > depth {
            err(format!("{at}/layers/{j}"), format!("layer {l} out of range 1..={depth}"));
        } else if let Some(prev) = owner[l] {
            if prev == edit {
                err(format!("{at}/layers/{j}"), format!("layer {l} listed twice"));
            } else {
                err(format!("{at}/layers/{j}"), format!("layer {l} is already edited by entry {prev}"));
            }
        } else {
            owner[l] = Some(edit);
        }
    }
}

/// `a.b[2].c` style paths to JSON pointers.
pub fn pointer_from_path(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for seg in path.split('.') {
        let mut rest = seg;
        while let Some(open) = rest.find('[') {
            let (name, tail) = rest.split_at(open);
            if !name.is_empty() {
                out.push('/');
                out.push_str(name);
            }
            let close = tail.find(']').unwrap_or(tail.len());
            out.push('/');
            out.push_str(&tail[1..close]);
            rest = &tail[(close + 1).min(tail.len())..];
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// An edit and the interception layers it applies to.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEdit<T> {
    pub layers: Vec<usize>,
    pub edit: T,
}

/// Pixel-resolution blend masks and the optional per-term channel subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlend {
    pub spec: BlendSpec,
    pub channels: Vec<Option<Vec<usize>>>,
}

/// A validated recipe with every image reference decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRecipe {
    pub base_z: Option<Vec<f64>>,
    pub base_image: Option<Tensor>,
    pub base_class: usize,
    /// `(z, class)` per reference latent.
    pub references: Vec<(Vec<f64>, usize)>,
    pub label_edits: Vec<LayerEdit<ClassMap>>,
    pub feature_edits: Vec<LayerEdit<FeatureBlend>>,
    pub poisson_mask: Option<Tensor>,
}
