//! Fréchet distance between Gaussian fits of image feature sets.
//!
//! All statistics and matrix functions run in 64-bit precision. The
//! covariance uses the unbiased `n − 1` divisor.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::imageio::{list_images, load_standardized, resize_bilinear, DatasetManifest, ImageTensor, ValueRange, MODEL_SIZE};
use crate::rng;
use crate::tensor::Tensor;

/// Eigenvalues below `−PSD_TOL · max(1, λ_max)` mark a matrix as not
/// positive semi-definite; smaller negative values are rounding noise and
/// are clamped to zero.
pub const PSD_TOL: f64 = 1e-8;

const PIXEL_SIDE: usize = 16;
const CNN_INPUT: usize = 32;
const CNN_SEED: u64 = 0x5eed_f1d0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    PixelStats,
    SmallCnn,
    ImportedEmbeddings,
}

/// Fixed random-weight convolutional embedding: three stride-2 3×3
/// convolutions with ReLU (3→16→32→64) and global average pooling.
#[derive(Clone, Debug)]
struct SmallCnn {
    weights: Vec<(Arc<Tensor<f32>>, Arc<Tensor<f32>>)>,
}

impl SmallCnn {
    fn new() -> Self {
        let mut r = rng::stream(CNN_SEED, "frechet/small_cnn", 1);
        let weights = [(3, 16), (16, 32), (32, 64)]
            .iter()
            .map(|&(cin, cout)| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| r.random_range(-bound..bound) as f32);
                let b = Tensor::from_fn(&[cout], |_| r.random_range(-0.1..0.1) as f32);
                (Arc::new(w), Arc::new(b))
            })
            .collect();
        Self { weights }
    }

    fn embed(&self, batch: Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::inference();
        let mut h = g.constant(batch);
        for (w, b) in &self.weights {
            let (w, b) = (g.param(w.clone()), g.param(b.clone()));
            h = g.relu(g.conv2d(h, w, Some(b), 2, 1)?);
        }
        let pooled = g.global_avg_pool(h)?;
        Ok((*g.value(pooled)).clone())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    name: String,
    dim: usize,
    cnn: Option<SmallCnn>,
}

impl FeatureExtractor {
    pub const NAMES: [&'static str; 3] = ["pixel_stats", "small_cnn", "imported"];

    /// 16×16 bilinear thumbnail, flattened, standardized as `(x − 0.5) / 0.25`.
    pub fn pixel_stats() -> Self {
        Self { kind: ExtractorKind::PixelStats, name: "pixel_stats-v1".into(), dim: 3 * PIXEL_SIDE * PIXEL_SIDE, cnn: None }
    }

    pub fn small_cnn() -> Self {
        Self { kind: ExtractorKind::SmallCnn, name: "small_cnn-v1".into(), dim: 64, cnn: Some(SmallCnn::new()) }
    }

    /// Placeholder for externally computed embeddings of dimension `dim`.
    pub fn imported(name: impl Into<String>, dim: usize) -> Self {
        Self { kind: ExtractorKind::ImportedEmbeddings, name: name.into(), dim, cnn: None }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pixel_stats" => Ok(Self::pixel_stats()),
            "small_cnn" => Ok(Self::small_cnn()),
            _ => Err(Error::UnknownPreset { name: name.into(), valid: "pixel_stats, small_cnn".into() }),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature matrix `n × dim` of a unit-range image batch.
    pub fn extract(&self, images: &ImageTensor) -> Result<DMatrix<f64>> {
        if images.is_empty() {
            return Err(Error::Param("feature extraction needs at least one image".into()));
        }
        let images = match images.range() {
            ValueRange::Unit => images.clone(),
            ValueRange::Model => images.from_model_range()?,
        };
        let (c, h, w) = images.image_dims();
        if c != 3 {
            return Err(Error::Shape(format!("feature extractors expect 3 channels, got {c}")));
        }
        let n = images.len();
        let rows: Vec<Vec<f64>> = match self.kind {
            ExtractorKind::PixelStats => images
                .tensor()
                .data()
                .par_chunks(c * h * w)
                .map(|img| {
                    resize_bilinear(img, c, h, w, PIXEL_SIDE, PIXEL_SIDE)
                        .into_iter()
                        .map(|v| (v as f64 - 0.5) / 0.25)
                        .collect()
                })
                .collect(),
            ExtractorKind::SmallCnn => {
                let cnn = self.cnn.as_ref().expect("small_cnn extractor carries weights");
                let small = images.resized(CNN_INPUT)?;
                let emb = cnn.embed(small.into_tensor())?;
                emb.data().chunks(self.dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
            }
            ExtractorKind::ImportedEmbeddings => {
                return Err(Error::Param(
                    "imported embeddings are read from a feature file, not computed from images".into(),
                ))
            }
        };
        Ok(DMatrix::from_fn(n, self.dim, |i, j| rows[i][j]))
    }
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

pub fn gaussian_stats(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::Param(format!("need at least 2 feature rows, got {n}")));
    }
    let mu = DVector::from_fn(d, |j, _| features.column(j).sum() / n as f64);
    let mut centered = features.clone();
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).apply(|v| *v -= m);
    }
    let a = centered.transpose() * &centered / (n as f64 - 1.0);
    let sigma = (&a + a.transpose()) * 0.5;
    Ok(FeatureStats { mu, sigma, n })
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{what} is not square")));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-8 * m.amax().max(1.0) {
        return Err(Error::LinAlg(format!("{what} is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric PSD matrix with rounding-level
/// negative eigenvalues clamped to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::LinAlg(format!("eigendecomposition of {what} did not converge")))?;
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(Error::LinAlg(format!("{what} is not positive semi-definite (eigenvalue {min:e})")));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

fn spectral(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    &scaled * vecs.transpose()
}

/// `A·Σ₂·A` with `A = Σ₁^{1/2}`, plus `A` itself and its pseudo-inverse.
fn inner_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    check_symmetric(s1, "sigma1")?;
    check_symmetric(s2, "sigma2")?;
    if s1.shape() != s2.shape() {
        return Err(Error::FeatureDim { expected: s1.nrows(), actual: s2.nrows() });
    }
    psd_eigen(s2, "sigma2")?;
    let (vals, vecs) = psd_eigen(s1, "sigma1")?;
    let cutoff = vals.amax() * 1e-12;
    let root = spectral(&vals, &vecs, f64::sqrt);
    let root_pinv = spectral(&vals, &vecs, |v| if v > cutoff { 1.0 / v.sqrt() } else { 0.0 });
    let m = &root * s2 * &root;
    Ok(((&m + m.transpose()) * 0.5, root, root_pinv))
}

/// `(Σ₁Σ₂)^{1/2}` computed as `Σ₁^{1/2}·(Σ₁^{1/2}Σ₂Σ₁^{1/2})^{1/2}·Σ₁^{−1/2}`,
/// with the inner root from a symmetric eigendecomposition.
pub fn sqrtm_product(sigma1: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, root, root_pinv) = inner_product(sigma1, sigma2)?;
    let (vals, vecs) = psd_eigen(&m, "inner product")?;
    Ok(root * spectral(&vals, &vecs, f64::sqrt) * root_pinv)
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_aΣ_b)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::FeatureDim { expected: a.mu.len(), actual: b.mu.len() });
    }
    if a == b {
        return Ok(0.0);
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    // the trace of the root equals that of the symmetric inner root
    let (m, _, _) = inner_product(&a.sigma, &b.sigma)?;
    let (vals, _) = psd_eigen(&m, "inner product")?;
    let tr_root: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let d = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_root;
    if d < -1e-6 {
        return Err(Error::LinAlg(format!("negative Fréchet distance {d:e}")));
    }
    Ok(d.max(0.0))
}

/// Imported embedding matrix and the name of the model that produced it.
#[derive(Clone, Debug)]
pub struct ImportedFeatures {
    pub extractor_name: String,
    pub features: DMatrix<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    dim: usize,
    extractor_name: String,
}

/// Sidecar describing a raw feature file: `feats.bin` → `feats.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads precomputed features: a headerless CSV of numbers (`.csv`, sidecar
/// optional), or a raw little-endian f32 row-major matrix with a JSON
/// sidecar `{n, dim, extractor_name}`.
pub fn read_imported_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<ImportedFeatures> {
    let path = path.as_ref();
    let is_csv = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (name, rows, dim, values) = if is_csv {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut values = Vec::new();
        let (mut rows, mut dim) = (0, None);
        for rec in reader.records() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Decode { path: path.into(), reason: format!("row {}: {e}", rows + 1) })?;
            if *dim.get_or_insert(row.len()) != row.len() {
                return Err(Error::Decode { path: path.into(), reason: format!("row {} has {} columns", rows + 1, row.len()) });
            }
            values.extend(row);
            rows += 1;
        }
        // a CSV carries no model name unless a sidecar sits next to it
        let side = sidecar_path(path);
        let name = match fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str::<Sidecar>(&text)?.extractor_name,
            Err(_) => "imported".to_string(),
        };
        (name, rows, dim.unwrap_or(0), values)
    } else {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * meta.n * meta.dim {
            return Err(Error::Decode {
                path: path.into(),
                reason: format!("{} bytes for a {}×{} f32 matrix", bytes.len(), meta.n, meta.dim),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        (meta.extractor_name, meta.n, meta.dim, values)
    };
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::FeatureDim { expected, actual: dim });
        }
    }
    Ok(ImportedFeatures { extractor_name: name, features: DMatrix::from_row_slice(rows, dim, &values) })
}

/// Writes features in the raw f32 format with its sidecar.
pub fn write_imported_features(path: impl AsRef<Path>, features: &DMatrix<f64>, extractor_name: &str) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(4 * features.len());
    for i in 0..features.nrows() {
        for j in 0..features.ncols() {
            bytes.extend_from_slice(&(features[(i, j)] as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = Sidecar { n: features.nrows(), dim: features.ncols(), extractor_name: extractor_name.into() };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub extractor: String,
    pub n_real: usize,
    pub n_gen: usize,
    pub fid: f64,
}

impl FidReport {
    pub const CSV_HEADER: &'static str = "extractor,n_real,n_gen,fid";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.extractor, self.n_real, self.n_gen, self.fid)
    }
}

/// FID of the first `n_gen` images (by file name) in `generated_dir`
/// against every image of `real`, whose paths resolve against `root`.
pub fn fid_protocol(
    real: &DatasetManifest,
    root: &Path,
    generated_dir: &Path,
    extractor: &FeatureExtractor,
    n_gen: usize,
) -> Result<FidReport> {
    if n_gen < 2 {
        return Err(Error::Param(format!("FID needs at least 2 generated images, got {n_gen}")));
    }
    if real.is_empty() {
        return Err(Error::Param("real manifest is empty".into()));
    }
    let gen_paths = list_images(generated_dir)?;
    if gen_paths.len() < n_gen {
        return Err(Error::Param(format!(
            "{} holds {} images, {n_gen} requested",
            generated_dir.display(),
            gen_paths.len()
        )));
    }
    let real_paths: Vec<PathBuf> = real.records.iter().map(|r| root.join(&r.path)).collect();
    let real_feats = extractor.extract(&load_standardized(&real_paths, MODEL_SIZE)?)?;
    let gen_feats = extractor.extract(&load_standardized(&gen_paths[..n_gen], MODEL_SIZE)?)?;
    let fid = frechet_distance(&gaussian_stats(&real_feats)?, &gaussian_stats(&gen_feats)?)?;
    Ok(FidReport { extractor: extractor.name().into(), n_real: real_paths.len(), n_gen, fid })
}

/// FID between two image sets held in memory.
pub fn fid_between(a: &ImageTensor, b: &ImageTensor, extractor: &FeatureExtractor) -> Result<f64> {
    let sa = gaussian_stats(&extractor.extract(a)?)?;
    let sb = gaussian_stats(&extractor.extract(b)?)?;
    frechet_distance(&sa, &sb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_covariance() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mu, DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(s.sigma, DMatrix::from_element(2, 2, 2.0));
        assert!(gaussian_stats(&DMatrix::zeros(1, 2)).is_err());
        let c = gaussian_stats(&DMatrix::from_element(5, 3, 7.0)).unwrap();
        assert_eq!(c.sigma, DMatrix::zeros(3, 3));
    }

    #[test]
    fn scalar_roots() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_product(&i3, &i3).unwrap() - &i3).amax() < 1e-12);
        let s = sqrtm_product(&(&i3 * 4.0), &(&i3 * 9.0)).unwrap();
        assert!((s - &i3 * 6.0).amax() < 1e-12);
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 1.0]));
        assert!(sqrtm_product(&neg, &i3).is_err());
    }

    #[test]
    fn closed_form_distances() {
        let one = |m: f64, v: f64| FeatureStats {
            mu: DVector::from_vec(vec![m]),
            sigma: DMatrix::from_element(1, 1, v),
            n: 10,
        };
        assert_eq!(frechet_distance(&one(0.0, 1.0), &one(0.0, 1.0)).unwrap(), 0.0);
        assert!((frechet_distance(&one(0.0, 1.0), &one(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let a = FeatureStats { mu: DVector::zeros(2), sigma: DMatrix::identity(2, 2), n: 10 };
        let b = FeatureStats { mu: DVector::from_vec(vec![3.0, 4.0]), sigma: DMatrix::identity(2, 2) * 4.0, n: 10 };
        assert!((frechet_distance(&a, &b).unwrap() - 27.0).abs() < 1e-12);
        let c = FeatureStats { mu: DVector::zeros(3), sigma: DMatrix::identity(3, 3), n: 10 };
        assert!(matches!(frechet_distance(&a, &c), Err(Error::FeatureDim { .. })));
    }

    #[test]
    fn extractor_dims_and_determinism() {
        let data = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 7919) % 256) as f32 / 255.0);
        let imgs = ImageTensor::new(data, ValueRange::Unit).unwrap();
        for ex in [FeatureExtractor::pixel_stats(), FeatureExtractor::small_cnn()] {
            let f = ex.extract(&imgs).unwrap();
            assert_eq!(f.shape(), (2, ex.dim()));
            assert_eq!(f, ex.extract(&imgs).unwrap());
        }
        assert_eq!(FeatureExtractor::pixel_stats().dim(), 768);
        assert!(FeatureExtractor::imported("x", 4).extract(&imgs).is_err());
    }
}
