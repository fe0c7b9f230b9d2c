use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use svpgen::error::Error;
use svpgen::frechet::{
    fid_protocol, frechet_distance, gaussian_stats, read_imported_features, sqrtm_product, write_imported_features,
    FeatureExtractor, FeatureStats,
};
use svpgen::imageio::{
    generate_procedural_corpus, list_images, save_png, ClassStyle, DatasetManifest, Label, ManifestRecord, Provenance,
    RawImage,
};
use svpgen::rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "frechet-test", 0);
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-2.0..3.0))
}

fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let b = random_matrix(dim, dim, seed);
    &b * b.transpose() + DMatrix::identity(dim, dim) * 0.5
}

#[test]
fn covariance_matches_brute_force_loops() {
    let f = random_matrix(100, 5, 1);
    let s = gaussian_stats(&f).unwrap();
    for j in 0..5 {
        let mut mean = 0.0;
        for i in 0..100 {
            mean += f[(i, j)];
        }
        mean /= 100.0;
        assert!((s.mu[j] - mean).abs() < 1e-10);
    }
    for a in 0..5 {
        for b in 0..5 {
            let mut acc = 0.0;
            for i in 0..100 {
                acc += (f[(i, a)] - s.mu[a]) * (f[(i, b)] - s.mu[b]);
            }
            assert!((s.sigma[(a, b)] - acc / 99.0).abs() < 1e-10);
        }
    }
}

#[test]
fn diagonal_gaussians_match_closed_form() {
    let mut r = rng::stream(2, "diag", 0);
    for _ in 0..20 {
        let d = r.random_range(1..8);
        let va: Vec<f64> = (0..d).map(|_| r.random_range(0.1..5.0)).collect();
        let vb: Vec<f64> = (0..d).map(|_| r.random_range(0.1..5.0)).collect();
        let ma: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let mb: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let want: f64 = (0..d)
            .map(|i| (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt())
            .sum();
        let a = FeatureStats { mu: DVector::from_vec(ma), sigma: DMatrix::from_diagonal(&DVector::from_vec(va)), n: 5 };
        let b = FeatureStats { mu: DVector::from_vec(mb), sigma: DMatrix::from_diagonal(&DVector::from_vec(vb)), n: 5 };
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn distance_is_symmetric_and_zero_on_identical_stats() {
    for seed in 0..10 {
        let a = gaussian_stats(&random_matrix(40, 6, seed)).unwrap();
        let b = gaussian_stats(&random_matrix(40, 6, seed + 100)).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
        assert_eq!(frechet_distance(&a, &a.clone()).unwrap(), 0.0);
    }
}

#[test]
fn rank_deficient_covariances_are_supported() {
    // fewer samples than dimensions, as with 100 images and 768 features
    let a = gaussian_stats(&random_matrix(10, 30, 5)).unwrap();
    let b = gaussian_stats(&random_matrix(10, 30, 6)).unwrap();
    let d = frechet_distance(&a, &b).unwrap();
    assert!(d.is_finite() && d > 0.0);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn sqrtm_residual_is_small(dim in 2usize..=32, seed in any::<u64>()) {
            let s1 = random_spd(dim, seed);
            let s2 = random_spd(dim, seed ^ 0xabcdef);
            let root = sqrtm_product(&s1, &s2).unwrap();
            let m = &s1 * &s2;
            let residual = (&root * &root - &m).norm() / m.norm();
            prop_assert!(residual < 1e-8, "dim {} residual {}", dim, residual);
        }
    }
}

#[test]
fn imported_features_round_trip_and_dimension_check() {
    let dir = tempfile::tempdir().unwrap();
    let f = random_matrix(7, 4, 3).map(|v| (v as f32) as f64);
    let bin = dir.path().join("feats.bin");
    write_imported_features(&bin, &f, "inception-pool3").unwrap();
    let back = read_imported_features(&bin, Some(4)).unwrap();
    assert_eq!(back.extractor_name, "inception-pool3");
    assert_eq!(back.features, f);

    let err = read_imported_features(&bin, Some(2048)).unwrap_err();
    assert!(matches!(err, Error::FeatureDim { expected: 2048, actual: 4 }));
    let msg = err.to_string();
    assert!(msg.contains("2048") && msg.contains('4'), "{msg}");

    let csv = dir.path().join("feats.csv");
    std::fs::write(&csv, "1,2,3\n4,5,6\n").unwrap();
    let c = read_imported_features(&csv, None).unwrap();
    assert_eq!(c.features, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
}

fn manifest_of(dir: &Path, label: Label) -> DatasetManifest {
    let records = list_images(dir)
        .unwrap()
        .into_iter()
        .map(|p| ManifestRecord { path: p.to_string_lossy().into_owned(), label, provenance: Provenance::Real })
        .collect();
    DatasetManifest::new("real", records).unwrap()
}

#[test]
fn fid_protocol_orders_copies_subsets_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let style = ClassStyle::default_for(Label::AirBubble);
    generate_procedural_corpus(&[style], 40, 9, dir.path()).unwrap();
    let real_dir = dir.path().join(Label::AirBubble.as_str());
    let real = manifest_of(&real_dir, Label::AirBubble);
    let ex = FeatureExtractor::pixel_stats();

    let copy = fid_protocol(&real, Path::new(""), &real_dir, &ex, 40).unwrap();
    assert!(copy.fid < 1e-6, "copy FID {}", copy.fid);
    assert_eq!((copy.n_real, copy.n_gen), (40, 40));
    assert_eq!(copy.extractor, ex.name());

    let subset = fid_protocol(&real, Path::new(""), &real_dir, &ex, 20).unwrap();

    let noise_dir = dir.path().join("noise");
    std::fs::create_dir_all(&noise_dir).unwrap();
    let mut r = rng::stream(10, "noise", 0);
    for i in 0..20 {
        let px: Vec<u8> = (0..64 * 64 * 3).map(|_| r.random()).collect();
        save_png(noise_dir.join(format!("{i:03}.png")), &RawImage::new(64, 64, 3, px).unwrap()).unwrap();
    }
    let noise = fid_protocol(&real, Path::new(""), &noise_dir, &ex, 20).unwrap();
    assert!(noise.fid > subset.fid, "noise {} vs subset {}", noise.fid, subset.fid);

    assert!(fid_protocol(&real, Path::new(""), &noise_dir, &ex, 21).is_err());
    assert!(fid_protocol(&real, Path::new(""), &dir.path().join("missing"), &ex, 2).is_err());
}
