//! Procedural stand-in for flow-imaging particle micrographs.
//!
//! Three parametric styles, one per class: dark anti-aliased rings (air
//! bubbles), shaded discs with a specular highlight (silicone oil) and
//! irregular random-walk aggregates (protein). Each image is rendered from
//! its own seeded stream, so any single file can be regenerated in isolation.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Label, ManifestRecord, Provenance};
use super::{save_png, RawImage, MODEL_SIZE};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const BACKGROUND: f64 = 200.0;
const NOISE_STD: f64 = 4.0;
const CENTER_JITTER: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum ClassStyle {
    /// Thin dark ring of radius `~N(radius_mean, radius_std)` pixels.
    Ring { radius_mean: f64, radius_std: f64 },
    /// Filled disc with soft edge and an offset bright highlight.
    Disc { radius_mean: f64, radius_std: f64 },
    /// Union of Gaussian splats placed along a random walk.
    Blob { steps: usize, spread: f64 },
}

impl ClassStyle {
    pub fn label(&self) -> Label {
        match self {
            ClassStyle::Ring { .. } => Label::AirBubble,
            ClassStyle::Disc { .. } => Label::SiliconeOil,
            ClassStyle::Blob { .. } => Label::Protein,
        }
    }

    pub fn default_for(label: Label) -> Self {
        match label {
            Label::AirBubble => ClassStyle::Ring { radius_mean: 16.0, radius_std: 3.0 },
            Label::SiliconeOil => ClassStyle::Disc { radius_mean: 10.0, radius_std: 2.5 },
            Label::Protein => ClassStyle::Blob { steps: 14, spread: 3.0 },
        }
    }

    pub fn defaults() -> Vec<ClassStyle> {
        Label::ALL.into_iter().map(Self::default_for).collect()
    }
}

fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders one `size × size` grayscale particle image.
pub fn render_style(style: &ClassStyle, rng: &mut Rng, size: usize) -> RawImage {
    let half = size as f64 / 2.0;
    let cx = half - 0.5 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    let cy = half - 0.5 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    let radius = |mean: f64, std: f64, rng: &mut Rng| -> f64 {
        let r = if std > 0.0 {
            Normal::new(mean, std).expect("positive std").sample(rng)
        } else {
            mean
        };
        r.clamp(3.0, half - 2.0)
    };
    let intensity: Box<dyn Fn(f64, f64) -> f64> = match *style {
        ClassStyle::Ring { radius_mean, radius_std } => {
            let r0 = radius(radius_mean, radius_std, rng);
            let width = rng.random_range(1.0..1.5);
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let inside = if r < r0 { 8.0 } else { 0.0 };
                BACKGROUND + inside - 130.0 * gaussian((r - r0).powi(2), width)
            })
        }
        ClassStyle::Disc { radius_mean, radius_std } => {
            let r0 = radius(radius_mean, radius_std, rng);
            let (hx, hy) = (cx - r0 / 3.0, cy - r0 / 3.0);
            let hs = (r0 / 5.0).max(1.0);
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let body = sigmoid((r0 - r) / 0.8);
                let spot = gaussian((x - hx).powi(2) + (y - hy).powi(2), hs);
                BACKGROUND - 110.0 * body + 90.0 * spot * body
            })
        }
        ClassStyle::Blob { steps, spread } => {
            let step = Normal::new(0.0, spread).expect("positive spread");
            let mut splats = Vec::with_capacity(steps);
            let (mut px, mut py) = (cx, cy);
            for _ in 0..steps.max(1) {
                splats.push((px, py, rng.random_range(2.5..5.0)));
                px = (px + step.sample(rng)).clamp(6.0, size as f64 - 7.0);
                py = (py + step.sample(rng)).clamp(6.0, size as f64 - 7.0);
            }
            let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-12.0..12.0)).collect();
            Box::new(move |x, y| {
                let d: f64 = splats
                    .iter()
                    .map(|&(sx, sy, s)| gaussian((x - sx).powi(2) + (y - sy).powi(2), s))
                    .sum();
                let cover = d.min(1.0);
                let g = grain[(y as usize) * size + x as usize];
                BACKGROUND - cover * (120.0 + g)
            })
        }
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = intensity(x as f64, y as f64) + noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage::new(size, size, 1, pixels).expect("valid dimensions")
}

/// Writes `n_per_class` 64×64 PNGs per style under `out_dir/<label>/` and
/// returns a manifest of real-provenance records.
pub fn generate_procedural_corpus(
    class_styles: &[ClassStyle],
    n_per_class: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::Param("n_per_class must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    let mut records = Vec::with_capacity(class_styles.len() * n_per_class);
    for style in class_styles {
        let label = style.label();
        let dir = out_dir.join(label.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n_per_class {
            let mut stream = rng::stream(seed, &format!("procedural/{label}"), i as u64);
            let img = render_style(style, &mut stream, MODEL_SIZE);
            let path = dir.join(format!("{label}_{i:05}.png"));
            save_png(&path, &img)?;
            records.push(ManifestRecord {
                path: path.to_string_lossy().into_owned(),
                label,
                provenance: Provenance::Real,
            });
        }
    }
    DatasetManifest::new("procedural", records)
}
