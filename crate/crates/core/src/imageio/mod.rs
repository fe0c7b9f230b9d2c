//! Image ingestion and the 64×64 model format.
//!
//! Files are decoded to [`RawImage`] (8-bit, 1 or 3 channels), resized so
//! the smallest edge is [`MODEL_SIZE`] with half-pixel-centred bilinear
//! interpolation, center-cropped to a square and promoted to three
//! channels. Batches live in [`ImageTensor`], tagged with their value range.

mod manifest;
mod procedural;

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{build_split, DatasetManifest, Label, ManifestRecord, Provenance, SplitSpec};
pub use procedural::{generate_procedural_corpus, render_style, ClassStyle};

/// Edge length of standardized images.
pub const MODEL_SIZE: usize = 64;

/// Decoded 8-bit image, interleaved `H × W × C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!("image must be at least 1x1, got {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("channel count must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Sample at `(x, y)` for channel `c`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Reads an 8-bit grayscale or RGB PNG/TIFF.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => RawImage::new(w, h, 1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => RawImage::new(w, h, 3, buf.into_raw()),
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!(
                "unsupported pixel format {:?}; expected 8-bit grayscale or RGB",
                other.color()
            ),
        }),
    }
}

/// Writes an 8-bit PNG.
pub fn save_png(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Encode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Value range tag of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`, the diffusion model input convention
    Model,
}

impl ValueRange {
    fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Model => (-1.0, 1.0),
        }
    }
}

/// `N × C × H × W` image batch with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        data.dims4()?;
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.data().iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Range(format!("value {bad} outside {range:?} range [{lo}, {hi}]")));
        }
        Ok(Self { data, range })
    }

    /// Clamps into the declared range before tagging.
    pub fn new_clamped(data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        let data = data.map(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) });
        Self::new(data, range)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        Ok(Self { data: self.data.slice_batch(i, 1)?, range: self.range })
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<ImageTensor> {
        Ok(Self { data: self.data.slice_batch(start, len)?, range: self.range })
    }

    pub fn concat(items: &[ImageTensor]) -> Result<ImageTensor> {
        let range = items
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero image batches".into()))?
            .range;
        if items.iter().any(|i| i.range != range) {
            return Err(Error::Range("cannot concatenate batches with different ranges".into()));
        }
        let parts: Vec<Tensor<f32>> = items.iter().map(|i| i.data.clone()).collect();
        Ok(Self { data: Tensor::stack(&parts, true)?, range })
    }

    /// `x ↦ 2x − 1`
    pub fn to_model_range(&self) -> Result<ImageTensor> {
        if self.range != ValueRange::Unit {
            return Err(Error::Range("to_model_range expects a unit-range tensor".into()));
        }
        let data = self.data.map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0));
        Ok(Self { data, range: ValueRange::Model })
    }

    /// `x ↦ (x + 1) / 2`
    pub fn from_model_range(&self) -> Result<ImageTensor> {
        if self.range != ValueRange::Model {
            return Err(Error::Range("from_model_range expects a model-range tensor".into()));
        }
        let data = self.data.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
        Ok(Self { data, range: ValueRange::Unit })
    }

    /// Bilinear resize of every image to `size × size` (no cropping).
    pub fn resized(&self, size: usize) -> Result<ImageTensor> {
        let (c, h, w) = self.image_dims();
        if (h, w) == (size, size) {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(self.len() * c * size * size);
        for img in self.data.data().chunks(c * h * w) {
            out.extend(resize_bilinear(img, c, h, w, size, size));
        }
        let data = Tensor::from_vec(&[self.len(), c, size, size], out)?;
        Self::new_clamped(data, self.range)
    }

    /// Converts image `i` to 8-bit RGB for writing.
    pub fn to_raw(&self, i: usize) -> Result<RawImage> {
        let unit = match self.range {
            ValueRange::Unit => self.image(i)?,
            ValueRange::Model => self.image(i)?.from_model_range()?,
        };
        let (c, h, w) = unit.image_dims();
        let plane = h * w;
        let d = unit.data.data();
        let mut pixels = Vec::with_capacity(h * w * 3);
        for p in 0..plane {
            for ch in 0..3 {
                let v = d[ch.min(c - 1) * plane + p];
                pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        RawImage::new(w, h, 3, pixels)
    }
}

/// Bilinear resampling of planar `C × H × W` data with half-pixel centres:
/// output pixel `o` samples source coordinate `(o + 0.5)·in/out − 0.5`,
/// clamped to the valid range.
pub fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, nh);
    let xs = taps(w, nw);
    let mut out = Vec::with_capacity(c * nh * nw);
    for plane in src.chunks(h * w).take(c) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Output dimensions `(width, height)` after scaling the smallest edge to `target`.
pub fn smallest_edge_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    if width <= height {
        let nh = (height as f64 * target as f64 / width as f64).round() as usize;
        (target, nh.max(target))
    } else {
        let nw = (width as f64 * target as f64 / height as f64).round() as usize;
        (nw.max(target), target)
    }
}

/// Resizes the smallest edge to 64, center-crops to 64×64, replicates
/// grayscale into three channels and scales to `[0, 1]`.
pub fn standardize(img: &RawImage) -> ImageTensor {
    standardize_to(img, MODEL_SIZE)
}

pub fn standardize_to(img: &RawImage, size: usize) -> ImageTensor {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut planar = vec![0f32; c * h * w];
    for (i, &p) in img.pixels.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        planar[ch * h * w + pix] = p as f32;
    }
    let (nw, nh) = smallest_edge_dims(w, h, size);
    let resized = resize_bilinear(&planar, c, h, w, nh, nw);
    let (oy, ox) = ((nh - size) / 2, (nw - size) / 2);
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        let plane = &resized[ch.min(c - 1) * nh * nw..(ch.min(c - 1) + 1) * nh * nw];
        for y in 0..size {
            let row = &plane[(y + oy) * nw + ox..(y + oy) * nw + ox + size];
            out.extend(row.iter().map(|v| (v / 255.0).clamp(0.0, 1.0)));
        }
    }
    let data = Tensor::from_vec(&[1, 3, size, size], out).expect("standardized shape");
    ImageTensor::new(data, ValueRange::Unit).expect("values clamped into unit range")
}

/// Loads and standardizes a list of files in parallel, preserving order.
pub fn load_standardized(paths: &[PathBuf], size: usize) -> Result<ImageTensor> {
    if paths.is_empty() {
        return Err(Error::Param("no images to load".into()));
    }
    let images: Vec<ImageTensor> = paths
        .par_iter()
        .map(|p| load_image(p).map(|raw| standardize_to(&raw, size)))
        .collect::<Result<_>>()?;
    ImageTensor::concat(&images)
}

/// Image files (`.png`, `.tif`, `.tiff`) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Tiles images into a grid PNG, `cols` per row, with a 2-pixel gutter.
pub fn save_grid(path: impl AsRef<Path>, images: &[RawImage], cols: usize) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::Param("empty grid".into()))?;
    let (w, h) = (first.width, first.height);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let gap = 2;
    let gw = cols * w + (cols - 1) * gap;
    let gh = rows * h + (rows - 1) * gap;
    let mut pixels = vec![255u8; gw * gh * 3];
    for (i, img) in images.iter().enumerate() {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape("grid images must share dimensions".into()));
        }
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = img.get(x, y, ch.min(img.channels - 1));
                    let (gx, gy) = (c * (w + gap) + x, r * (h + gap) + y);
                    pixels[(gy * gw + gx) * 3 + ch] = v;
                }
            }
        }
    }
    save_png(path, &RawImage::new(gw, gh, 3, pixels)?)
}
