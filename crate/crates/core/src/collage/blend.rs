use collage_tensor::{Tape, Tensor, TensorError, Var};

use super::class_map::area_downsample;
use crate::error::{CollageError, Result};

/// Tolerance on the implicit base mask `1 − Σ M_i` going negative.
pub const MASK_TOL: f64 = 1e-6;

/// One reference contribution to a blended feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendTerm {
    /// Index into the feature list passed to [`blend_features`]; 0 is the base.
    pub source: usize,
    /// `[H, W]` or per-channel `[C, H, W]` weights in `[0, 1]`.
    pub mask: Tensor,
    /// Integer translation `(dy, dx)` applied to the source before masking.
    pub shift: (isize, isize),
}

/// Blending masks for one layer. The base map receives `1 − Σ M_i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlendSpec {
    pub terms: Vec<BlendTerm>,
}

impl BlendSpec {
    pub fn new(terms: Vec<BlendTerm>) -> Self {
        BlendSpec { terms }
    }

    /// Checks masks against a `[C, H, W]` feature layout and returns the
    /// implicit base mask.
    pub fn base_mask(&self, channels: usize, h: usize, w: usize) -> Result<Tensor> {
        let per_channel = self.terms.iter().any(|t| t.mask.ndim() == 3);
        let shape = if per_channel { vec![channels, h, w] } else { vec![h, w] };
        let mut base = Tensor::full(shape.clone(), 1.0);
        for (i, t) in self.terms.iter().enumerate() {
            let ok = match t.mask.shape() {
                [mh, mw] => (*mh, *mw) == (h, w),
                [mc, mh, mw] => (*mc, *mh, *mw) == (channels, h, w),
                _ => false,
            };
            if !ok {
                return Err(TensorError::Dimension(format!(
                    "blend term {i}: mask {:?} does not fit features [{channels}, {h}, {w}]",
                    t.mask.shape()
                ))
                .into());
            }
            if let Some(v) = t.mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CollageError::Validation(format!("blend term {i}: mask value {v} outside [0, 1]")));
            }
            let reps = base.numel() / t.mask.numel();
            let plane = t.mask.numel();
            for r in 0..reps {
                for (j, m) in t.mask.data().iter().enumerate() {
                    base.data_mut()[r * plane + j] -= m;
                }
            }
        }
        if let Some(v) = base.data().iter().find(|v| **v < -MASK_TOL) {
            return Err(CollageError::Validation(format!("blend masks sum to {} at some position", 1.0 - v)));
        }
        base.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(base)
    }

    /// Area-averages every mask to `size x size` and scales shifts by the
    /// same factor, rounding to whole cells.
    pub fn resample(&self, size: usize) -> Result<BlendSpec> {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let from = *t.mask.shape().last().unwrap_or(&size);
                let ratio = size as f64 / from as f64;
                let scale = |d: isize| (d as f64 * ratio).round() as isize;
                Ok(BlendTerm {
                    source: t.source,
                    mask: area_downsample(&t.mask, size)?,
                    shift: (scale(t.shift.0), scale(t.shift.1)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlendSpec { terms })
    }
}

/// `M_0 ⊙ F_0 + Σ_i M_i ⊙ U_i(F_i)` with zero fill at vacated cells.
pub fn blend_features(tape: &mut Tape, features: &[Var], spec: &BlendSpec) -> Result<Var> {
    let base = *features.first().ok_or_else(|| CollageError::Parameter("blend needs a base feature map".into()))?;
    if spec.terms.is_empty() {
        return Ok(base);
    }
    let (_, c, h, w) = tape.value(base).nchw()?;
    for (i, &f) in features.iter().enumerate() {
        if tape.shape(f) != tape.shape(base) {
            return Err(TensorError::Dimension(format!(
                "feature {i} has shape {:?}, base has {:?}",
                tape.shape(f),
                tape.shape(base)
            ))
            .into());
        }
    }
    let base_mask = spec.base_mask(c, h, w)?;
    let mut out = tape.mask_mul(base, &base_mask)?;
    for (i, t) in spec.terms.iter().enumerate() {
        let f = *features
            .get(t.source)
            .ok_or_else(|| CollageError::Parameter(format!("blend term {i} names missing feature {}", t.source)))?;
        let shifted = if t.shift == (0, 0) { f } else { tape.translate(f, t.shift.0, t.shift.1)? };
        let term = tape.mask_mul(shifted, &t.mask)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}
