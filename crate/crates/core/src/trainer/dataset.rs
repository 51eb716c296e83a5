use collage_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CollageError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub resolution: usize,
    pub num_classes: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec { resolution: 32, num_classes: 8, samples: 50_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
}

/// Procedural colored shapes on a textured gray background. Class `c` has
/// hue `c / K` and is a disc for even `c`, a square for odd `c`.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    spec: SyntheticDatasetSpec,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticDatasetSpec) -> Result<Self> {
        if spec.resolution < 8 || spec.num_classes < 2 || spec.samples == 0 {
            return Err(CollageError::Parameter("dataset needs resolution >= 8, two classes and one sample".into()));
        }
        Ok(SyntheticDataset { spec })
    }

    pub fn spec(&self) -> &SyntheticDatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.samples
    }

    pub fn is_empty(&self) -> bool {
        self.spec.samples == 0
    }

    pub fn class_of(&self, index: usize) -> usize {
        index % self.spec.num_classes
    }

    pub fn class_hue(&self, class: usize) -> f64 {
        class as f64 / self.spec.num_classes as f64
    }

    pub fn class_shape(&self, class: usize) -> Shape {
        if class % 2 == 0 {
            Shape::Disc
        } else {
            Shape::Square
        }
    }

    /// Sample `index` as a `[3, R, R]` image in `[0, 1]` and its class.
    pub fn sample(&self, index: usize) -> (Tensor, usize) {
        let r = self.spec.resolution;
        let class = self.class_of(index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64);

        let level = rng.random_range(0.3..0.6);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
        let waves: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                let fx = rng.random_range(1..=4) as f64;
                let fy = rng.random_range(0..=4) as f64;
                (fx, fy, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();

        let hue = (self.class_hue(class) + rng.random_range(-0.02..0.02)).rem_euclid(1.0);
        let color = hsv_to_rgb(hue, rng.random_range(0.7..0.95), rng.random_range(0.75..0.95));
        let rf = r as f64;
        let (cy, cx) = (rng.random_range(0.3 * rf..0.7 * rf), rng.random_range(0.3 * rf..0.7 * rf));
        let half = rng.random_range(0.2 * rf..0.32 * rf);
        let shape = self.class_shape(class);

        let mut data = vec![0.0; 3 * r * r];
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let texture: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph)| 0.05 * (std::f64::consts::TAU * (fx * px + fy * py) / rf + ph).sin())
                    .sum();
                let (dx, dy) = (px - cx, py - cy);
                let dist = match shape {
                    Shape::Disc => (dx * dx + dy * dy).sqrt(),
                    Shape::Square => dx.abs().max(dy.abs()),
                };
                let alpha = (half - dist + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    let bg = level + tint[c] + texture;
                    data[c * r * r + y * r + x] = (alpha * color[c] + (1.0 - alpha) * bg).clamp(0.0, 1.0);
                }
            }
        }
        (Tensor::new(vec![3, r, r], data).expect("shape matches"), class)
    }

    /// Stacks samples into `[N, 3, R, R]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let r = self.spec.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut classes = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, c) = self.sample(i);
            data.extend_from_slice(img.data());
            classes.push(c);
        }
        (Tensor::new(vec![indices.len(), 3, r, r], data).expect("shape matches"), classes)
    }

    /// Mean RGB of the first `n` samples of `class`.
    pub fn class_mean_color(&self, class: usize, n: usize) -> [f64; 3] {
        let k = self.spec.num_classes;
        let mut acc = [0.0; 3];
        for j in 0..n {
            let (img, _) = self.sample(class + j * k);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += channel_mean(&img, c);
            }
        }
        acc.map(|a| a / n as f64)
    }
}

/// Mean of channel `c` of a `[C, H, W]` image.
pub fn channel_mean(img: &Tensor, c: usize) -> f64 {
    let plane = img.shape()[1] * img.shape()[2];
    img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `(hue, saturation, value)` with hue in `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}
