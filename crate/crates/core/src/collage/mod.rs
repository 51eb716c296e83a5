//! Label collaging through spatially mixed conditional normalization and
//! feature collaging through masked blending of intermediate feature maps.

mod apply;
mod blend;
mod class_map;
mod recipe;

pub use apply::{apply_recipe, render, render_with_features, LayerDiagnostic, Rendered};
pub use blend::{blend_features, BlendSpec, BlendTerm, MASK_TOL};
pub use class_map::{area_downsample, make_class_map, scbn_forward, ClassMap, Region, SIMPLEX_TOL};
pub use recipe::{
    pointer_from_path, BaseSource, BlendRef, EditRecipe, FeatureBlend, FeatureEdit, LabelEdit, LayerEdit, ModelInfo, PostProcess,
    ReferenceLatent, RegionSpec, ResolvedRecipe,
};
