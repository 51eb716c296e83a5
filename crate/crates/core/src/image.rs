//! PNG encoding of images and masks, and resolution of image references.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use collage_tensor::Tensor;

use crate::error::{CollageError, Result};

const DATA_URI_PREFIX: &str = "data:image/png;base64,";

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds an image to the 8-bit grid it would occupy after PNG encoding.
pub fn quantize(img: &Tensor) -> Tensor {
    let data = img.data().iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
    Tensor::new(img.shape().to_vec(), data).expect("shape unchanged")
}

/// Encodes `[3, H, W]` as 8-bit RGB or `[H, W]` / `[1, H, W]` as grayscale.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (channels, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(CollageError::Image(format!("cannot encode shape {:?} as PNG", img.shape()))),
    };
    let mut raw = Vec::with_capacity(channels * h * w);
    for p in 0..h * w {
        for c in 0..channels {
            raw.push(to_u8(img.data()[c * h * w + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CollageError::Image(e.to_string()))?;
        writer.write_image_data(&raw).map_err(|e| CollageError::Image(e.to_string()))?;
        writer.finish().map_err(|e| CollageError::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decoded pixels as `[C, H, W]` in `[0, 1]`, alpha dropped.
fn decode_planes(bytes: &[u8]) -> Result<Tensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| CollageError::Image(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| CollageError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| CollageError::Image(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(CollageError::Image(format!("unsupported PNG color type {other:?}"))),
    };
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] = row[x * stride + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

/// Decodes a PNG to `[3, H, W]`; grayscale input is replicated.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let t = decode_planes(bytes)?;
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if c == 3 {
        return Ok(t);
    }
    let data = t.data().repeat(3);
    debug_assert_eq!(data.len(), 3 * h * w);
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Decodes a mask PNG to `[H, W]` in `[0, 1]`. Color input is averaged.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let t = decode_planes(bytes)?;
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = (0..h * w).map(|p| (0..c).map(|ch| t.data()[ch * h * w + p]).sum::<f64>() / c as f64).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

pub fn data_uri(png: &[u8]) -> String {
    format!("{DATA_URI_PREFIX}{}", base64::engine::general_purpose::STANDARD.encode(png))
}

pub fn decode_base64(s: &str) -> Result<Vec<u8>> {
    let body = s.strip_prefix(DATA_URI_PREFIX).unwrap_or(s);
    base64::engine::general_purpose::STANDARD
        .decode(body.trim())
        .map_err(|e| CollageError::Image(format!("invalid base64: {e}")))
}

/// Turns the image references found in recipes into PNG bytes.
pub trait ImageSource {
    fn fetch(&self, reference: &str) -> Result<Vec<u8>>;
}

/// Accepts `data:image/png;base64,` URIs and, when a directory is set, file
/// paths relative to it.
#[derive(Clone, Debug, Default)]
pub struct RefResolver {
    root: Option<PathBuf>,
}

impl RefResolver {
    /// Only inline data URIs.
    pub fn inline_only() -> Self {
        RefResolver { root: None }
    }

    pub fn with_root(root: impl AsRef<Path>) -> Self {
        RefResolver { root: Some(root.as_ref().to_path_buf()) }
    }
}

impl ImageSource for RefResolver {
    fn fetch(&self, reference: &str) -> Result<Vec<u8>> {
        if reference.starts_with("data:") {
            if !reference.starts_with(DATA_URI_PREFIX) {
                return Err(CollageError::Image("only data:image/png;base64 URIs are supported".into()));
            }
            return decode_base64(reference);
        }
        match &self.root {
            Some(root) => {
                let path = root.join(reference);
                std::fs::read(&path).map_err(|e| CollageError::Image(format!("{}: {e}", path.display())))
            }
            None => Err(CollageError::Image("file references are not accepted here".into())),
        }
    }
}
