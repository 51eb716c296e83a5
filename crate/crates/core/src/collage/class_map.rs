use collage_tensor::{Tape, Tensor, TensorError, Var};

use crate::error::{CollageError, Result};
use crate::nets::{BatchStats, CbnLayer, Modulation, NormMode};
use crate::params::Bound;

/// Tolerance on the per-position sum of class weights.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-position mixture of class weights, stored as `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    weights: Tensor,
}

impl ClassMap {
    /// Wraps `[K, H, W]` weights after checking they lie on the simplex.
    pub fn new(weights: Tensor) -> Result<Self> {
        let (k, h, w) = match *weights.shape() {
            [k, h, w] => (k, h, w),
            _ => return Err(TensorError::Dimension(format!("class map must be [K, H, W], got {:?}", weights.shape())).into()),
        };
        for p in 0..h * w {
            let mut total = 0.0;
            for c in 0..k {
                let v = weights.data()[c * h * w + p];
                if v < 0.0 {
                    return Err(CollageError::Validation(format!("negative class weight {v} at position {p}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(CollageError::Validation(format!("class weights sum to {total} at position {p}")));
            }
        }
        Ok(ClassMap { weights })
    }

    pub fn one_hot(num_classes: usize, class: usize, h: usize, w: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(CollageError::Parameter(format!("class {class} out of range for {num_classes} classes")));
        }
        let mut t = Tensor::zeros(vec![num_classes, h, w]);
        t.data_mut()[class * h * w..(class + 1) * h * w].iter_mut().for_each(|v| *v = 1.0);
        Ok(ClassMap { weights: t })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.weights.shape()[1], self.weights.shape()[2])
    }

    /// Area-average downsampling to `size x size`.
    pub fn resample(&self, size: usize) -> Result<ClassMap> {
        Ok(ClassMap { weights: area_downsample(&self.weights, size)? })
    }

    /// Spatially varying affine parameters `Σ_c W[c, h, w] · table[c, k]`
    /// as `[C, H, W]`.
    pub fn mix(&self, table: &Tensor) -> Result<Tensor> {
        let (k, ch) = match *table.shape() {
            [k, ch] => (k, ch),
            _ => return Err(TensorError::Dimension("parameter table must be [K, C]".into()).into()),
        };
        if k != self.num_classes() {
            return Err(TensorError::Dimension(format!("table has {k} classes, map has {}", self.num_classes())).into());
        }
        let (h, w) = self.resolution();
        let mut out = Tensor::zeros(vec![ch, h, w]);
        for c in 0..ch {
            for cls in 0..k {
                let t = table.data()[cls * ch + c];
                for p in 0..h * w {
                    out.data_mut()[c * h * w + p] += self.weights.data()[cls * h * w + p] * t;
                }
            }
        }
        Ok(out)
    }
}

/// A painted region: where a class should appear and how strongly.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// `[H, W]` coverage in `[0, 1]`.
    pub mask: Tensor,
    pub class: usize,
    pub intensity: f64,
}

/// Builds a class map from painted regions over a base class.
///
/// Each region contributes `intensity · mask` to its class and the base
/// class takes the remainder. Where contributions exceed one they are scaled
/// proportionally onto the simplex.
pub fn make_class_map(regions: &[Region], base_class: usize, num_classes: usize, resolution: (usize, usize)) -> Result<ClassMap> {
    let (h, w) = resolution;
    if base_class >= num_classes {
        return Err(CollageError::Parameter(format!("base class {base_class} out of range")));
    }
    for (i, r) in regions.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.intensity) {
            return Err(CollageError::Parameter(format!("region {i}: intensity {} outside [0, 1]", r.intensity)));
        }
        if r.class >= num_classes {
            return Err(CollageError::Parameter(format!("region {i}: class {} out of range", r.class)));
        }
        if r.mask.shape() != [h, w] {
            return Err(TensorError::Dimension(format!("region {i}: mask {:?} is not {h}x{w}", r.mask.shape())).into());
        }
        if r.mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CollageError::Parameter(format!("region {i}: mask values must lie in [0, 1]")));
        }
    }
    let mut weights = Tensor::zeros(vec![num_classes, h, w]);
    for p in 0..h * w {
        let total: f64 = regions.iter().map(|r| r.intensity * r.mask.data()[p]).sum();
        let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
        for r in regions {
            weights.data_mut()[r.class * h * w + p] += scale * r.intensity * r.mask.data()[p];
        }
        weights.data_mut()[base_class * h * w + p] += (1.0 - total * scale).max(0.0);
    }
    ClassMap::new(weights)
}

/// Area-average downsampling of the trailing two axes of `[.., H, W]` to
/// `size x size`. The source size must be an integer multiple of `size`.
pub fn area_downsample(t: &Tensor, size: usize) -> Result<Tensor> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(TensorError::Dimension("map must have at least two axes".into()).into());
    }
    let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    if size == 0 || h % size != 0 || w % size != 0 || h != w {
        return Err(CollageError::Parameter(format!("cannot resample a {h}x{w} map to {size}x{size}")));
    }
    let f = h / size;
    if f == 1 {
        return Ok(t.clone());
    }
    let planes = t.numel() / (h * w);
    let area = (f * f) as f64;
    let mut out = vec![0.0; planes * size * size];
    for pl in 0..planes {
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += t.data()[pl * h * w + (y * f + dy) * w + x * f + dx];
                    }
                }
                out[(pl * size + y) * size + x] = acc / area;
            }
        }
    }
    let mut shape = t.shape()[..nd - 2].to_vec();
    shape.extend([size, size]);
    Ok(Tensor::new(shape, out)?)
}

/// Spatial conditional batch normalization: statistics as in the plain
/// layer, affine parameters mixed per position by `map`.
pub fn scbn_forward(tape: &mut Tape, p: &Bound, layer: &CbnLayer, x: Var, map: &ClassMap, mode: NormMode) -> Result<(Var, Option<BatchStats>)> {
    layer.forward(tape, p, x, Modulation::Map(map.weights()), mode)
}
