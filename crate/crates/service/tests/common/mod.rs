#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use collage_core::image::{data_uri, encode_png};
use collage_core::nets::NoHooks;
use collage_core::trainer::{train_all, Bundle, TrainAllConfig};
use collage_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A tiny bundle trained once per test binary.
pub fn tiny_bundle_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        train_all(&TrainAllConfig::tiny(), dir.path(), |_| {}).unwrap();
        dir
    })
    .path()
}

pub fn tiny_bundle() -> Bundle {
    Bundle::load(tiny_bundle_dir()).unwrap()
}

pub fn latent(dim: usize, seed: u64) -> Vec<f64> {
    Tensor::randn(vec![dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
}

pub fn generated_png(bundle: &Bundle, z: &[f64], class: usize) -> Vec<u8> {
    encode_png(&bundle.generator.generate(z, class, &NoHooks).unwrap()).unwrap()
}

/// `[r, r]` mask that is 1 on columns `x0..x1` and 0 elsewhere.
pub fn column_mask(r: usize, x0: usize, x1: usize) -> Vec<u8> {
    let mut m = Tensor::zeros(vec![r, r]);
    for y in 0..r {
        for x in x0..x1 {
            m.set(&[y, x], 1.0);
        }
    }
    encode_png(&m).unwrap()
}

/// `[r, r]` mask that is 1 on the rectangle `y0..y1, x0..x1`.
pub fn box_mask(r: usize, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> Vec<u8> {
    let mut m = Tensor::zeros(vec![r, r]);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(&[y, x], 1.0);
        }
    }
    encode_png(&m).unwrap()
}

/// Recipe with a latent base, one reference and a feature blend plus a
/// label edit, all using inline masks.
pub fn edit_recipe(bundle: &Bundle) -> serde_json::Value {
    let info = bundle.info();
    let r = info.resolution;
    serde_json::json!({
        "base": { "z": latent(info.latent_dim, 1), "class": 0 },
        "references": [{ "z": latent(info.latent_dim, 2), "class": 1 }],
        "label_edits": [{
            "layers": [1],
            "regions": [{ "mask": data_uri(&column_mask(r, 0, r / 2)), "class": 2, "intensity": 1.0 }],
            "base_class": 0
        }],
        "feature_edits": [{
            "layers": [2],
            "blends": [{ "ref": 0, "mask": data_uri(&column_mask(r, r / 2, r)), "shift": [0, 0] }]
        }]
    })
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}
