use image::{ImageBuffer, Luma, Rgb};
use svpgen::imageio::{
    load_image, render_style, standardize, ClassStyle, RawImage, MODEL_SIZE,
};
use svpgen::rng;

fn ramp_rgb(w: u32, h: u32) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    ImageBuffer::from_fn(w, h, |x, y| {
        Rgb([(x * 255 / (w - 1)) as u8, (y * 255 / (h - 1)) as u8, ((x + y) % 256) as u8])
    })
}

#[test]
fn png_dimensions_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    ramp_rgb(128, 96).save(&path).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (128, 96, 3));
}

#[test]
fn missing_file_error_names_path() {
    let err = load_image("/definitely/not/here.png").unwrap_err().to_string();
    assert!(err.contains("/definitely/not/here.png"), "{err}");
}

#[test]
fn sixteen_bit_tiff_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.tif");
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(8, 8, |x, _| Luma([x as u16 * 1000]));
    buf.save(&path).unwrap();
    let err = load_image(&path).unwrap_err().to_string();
    assert!(err.contains("deep.tif") && err.contains("unsupported"), "{err}");
}

#[test]
fn eight_bit_gray_tiff_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gray.tiff");
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(10, 7, |x, y| Luma([(x * 10 + y) as u8]));
    buf.save(&path).unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (10, 7, 1));
    assert_eq!(img.get(3, 2, 0), 32);
}

/// Reference resampler: explicit tent-kernel weight matrices applied
/// separably, `out = Ry · I · Rxᵀ`.
fn reference_resize(img: &RawImage, c: usize, nw: usize, nh: usize) -> Vec<Vec<f64>> {
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<f64>> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                (0..n_in).map(|i| (1.0 - (s - i as f64).abs()).max(0.0)).collect()
            })
            .collect()
    };
    let ry = weights(img.height(), nh);
    let rx = weights(img.width(), nw);
    let mut out = vec![vec![0.0; nw]; nh];
    for (oy, wy) in ry.iter().enumerate() {
        for (ox, wx) in rx.iter().enumerate() {
            let mut acc = 0.0;
            for (iy, &a) in wy.iter().enumerate().filter(|(_, a)| **a > 0.0) {
                for (ix, &b) in wx.iter().enumerate().filter(|(_, b)| **b > 0.0) {
                    acc += a * b * img.get(ix, iy, c) as f64;
                }
            }
            out[oy][ox] = acc / 255.0;
        }
    }
    out
}

#[test]
fn downscale_then_center_crop_matches_reference_resampler() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tall.png");
    ramp_rgb(128, 256).save(&path).unwrap();
    let raw = load_image(&path).unwrap();
    let t = standardize(&raw);
    assert_eq!(t.tensor().shape(), &[1, 3, 64, 64]);
    let mut max_diff: f64 = 0.0;
    for c in 0..3 {
        let reference = reference_resize(&raw, c, 64, 128);
        for y in 0..64 {
            for x in 0..64 {
                let got = t.tensor().data()[c * 4096 + y * 64 + x] as f64;
                max_diff = max_diff.max((got - reference[y + 32][x]).abs());
            }
        }
    }
    assert!(max_diff < 2.0 / 255.0, "max diff {max_diff}");
}

#[test]
fn wide_input_with_model_height_is_only_cropped() {
    let img = RawImage::new(96, 64, 1, (0..96 * 64).map(|i| (i % 96) as u8).collect()).unwrap();
    let t = standardize(&img);
    for x in 0..64 {
        assert_eq!(t.tensor().data()[x], (x + 16) as f32 / 255.0);
    }
}

/// Darkness-weighted centroid, then the radius bin with the largest mean
/// darkness.
fn measure_ring_radius(img: &RawImage) -> f64 {
    let n = img.width();
    let dark = |x: usize, y: usize| (200.0 - img.get(x, y, 0) as f64).max(0.0);
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..n {
        for x in 0..n {
            let w = dark(x, y);
            if w > 40.0 {
                sx += w * x as f64;
                sy += w * y as f64;
                sw += w;
            }
        }
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let bins = n;
    let mut total = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for y in 0..n {
        for x in 0..n {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let b = r.round() as usize;
            if b < bins {
                total[b] += dark(x, y);
                count[b] += 1;
            }
        }
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .max_by(|&a, &b| (total[a] / count[a] as f64).total_cmp(&(total[b] / count[b] as f64)))
        .unwrap() as f64
}

#[test]
fn ring_radius_matches_style_parameter() {
    let style = ClassStyle::Ring { radius_mean: 20.0, radius_std: 0.0 };
    for i in 0..10 {
        let img = render_style(&style, &mut rng::stream(5, "ring", i), MODEL_SIZE);
        let r = measure_ring_radius(&img);
        assert!((r - 20.0).abs() <= 1.0, "image {i}: measured {r}");
    }
    let jittered = ClassStyle::Ring { radius_mean: 20.0, radius_std: 1.5 };
    let mean: f64 = (0..40)
        .map(|i| measure_ring_radius(&render_style(&jittered, &mut rng::stream(6, "ring", i), MODEL_SIZE)))
        .sum::<f64>()
        / 40.0;
    assert!((mean - 20.0).abs() <= 1.0, "mean measured radius {mean}");
}

mod properties {
    use proptest::prelude::*;
    use svpgen::imageio::{
        build_split, smallest_edge_dims, standardize, DatasetManifest, Label, ManifestRecord,
        Provenance, RawImage, SplitSpec,
    };

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn standardize_always_yields_model_format(
            w in 1usize..160, h in 1usize..160, gray in any::<bool>(), seed in any::<u8>()
        ) {
            let c = if gray { 1 } else { 3 };
            let px: Vec<u8> = (0..w * h * c).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let t = standardize(&RawImage::new(w, h, c, px).unwrap());
            prop_assert_eq!(t.tensor().shape(), &[1, 3, 64, 64]);
            prop_assert!(t.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn aspect_ratio_kept_within_rounding(w in 1usize..2000, h in 1usize..2000) {
            let (nw, nh) = smallest_edge_dims(w, h, 64);
            prop_assert_eq!(nw.min(nh), 64);
            // the long edge is the exactly scaled long edge, rounded
            let exact = w.max(h) as f64 * 64.0 / w.min(h) as f64;
            prop_assert!((nw.max(nh) as f64 - exact).abs() <= 1.0);
        }

        #[test]
        fn manifest_csv_round_trip(entries in proptest::collection::btree_map("[a-z0-9_/]{1,12}", (0usize..3, any::<bool>()), 0..20)) {
            let records: Vec<ManifestRecord> = entries
                .into_iter()
                .map(|(path, (l, g))| ManifestRecord {
                    path: format!("{path}.png"),
                    label: Label::from_index(l).unwrap(),
                    provenance: if g { Provenance::Generated } else { Provenance::Real },
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let m = DatasetManifest::new("rt", records).unwrap();
            let p = dir.path().join("rt.csv");
            m.write_csv(&p).unwrap();
            prop_assert_eq!(DatasetManifest::read_csv(&p).unwrap(), m);
        }
    }

    #[test]
    fn every_preset_builds_exactly() {
        let mut real = Vec::new();
        let mut gen = Vec::new();
        for label in Label::ALL {
            let n_real = if label == Label::Protein { 20_000 } else { 1_000 };
            for i in 0..n_real {
                real.push(ManifestRecord { path: format!("r/{label}/{i}"), label, provenance: Provenance::Real });
            }
            if label != Label::Protein {
                for i in 0..19_000 {
                    gen.push(ManifestRecord { path: format!("g/{label}/{i}"), label, provenance: Provenance::Generated });
                }
            }
        }
        let real = DatasetManifest::new("real", real).unwrap();
        let gen = DatasetManifest::new("gen", gen).unwrap();
        for name in SplitSpec::PRESETS {
            let spec = SplitSpec::preset(name).unwrap();
            let m = build_split(&spec, &real, &gen, 1).unwrap();
            let c = m.counts();
            for l in Label::ALL {
                assert_eq!(c[l.index()], [spec.real[l.index()], spec.generated[l.index()]], "{name} {l}");
            }
        }
    }
}
