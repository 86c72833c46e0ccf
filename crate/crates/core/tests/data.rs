use std::fs;

use debias::data::{
    draw_augmentation, load_dataset, preprocess, render_digits, save_dataset, synth_biased_pair, BiasSpec,
    DomainDataset, LabeledImage, ROTATION_DEGREES,
};
use debias::{Error, RngState, Tensor};

fn write_labels(dir: &std::path::Path, rows: &[(&str, &str)]) {
    let mut s = String::from("filename,label\n");
    for (f, l) in rows {
        s.push_str(&format!("{f},{l}\n"));
    }
    fs::write(dir.join("labels.csv"), s).unwrap();
}

#[test]
fn empty_labels_give_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(dir.path(), &[]);
    assert!(load_dataset(dir.path()).unwrap().is_empty());
    fs::write(dir.path().join("labels.csv"), "").unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn save_then_load_is_exact_and_ordered() {
    let ds = render_digits(1, 16, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    assert_eq!(back.images, ds.images);
    let ids: Vec<_> = back.images.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(ids[..3], ["00000.ppm", "00001.ppm", "00002.ppm"]);
}

#[test]
fn loader_errors_name_the_row() {
    let ds = render_digits(1, 8, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();

    write_labels(dir.path(), &[("00000.ppm", "0"), ("missing.ppm", "1")]);
    match load_dataset(dir.path()) {
        Err(Error::MissingFile { row, file }) => {
            assert_eq!(row, 2);
            assert!(file.ends_with("missing.ppm"));
        }
        other => panic!("{other:?}"),
    }
    write_labels(dir.path(), &[("00000.ppm", "zero")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::BadLabel { row: 1, .. })));
    fs::write(dir.path().join("images/bad.ppm"), b"P6 garbage").unwrap();
    write_labels(dir.path(), &[("00000.ppm", "0"), ("bad.ppm", "1")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::UnreadableImage { row: 2, .. })));
}

fn mean_hue_shift(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    // independent RGB -> hue, via the atan2 form of the hexcone angle
    let hue = |r: f64, g: f64, bl: f64| {
        let h = (3f64.sqrt() * (g - bl)).atan2(2.0 * r - g - bl).to_degrees();
        h.rem_euclid(360.0)
    };
    let plane = a.len() / 3;
    let (da, db) = (a.data(), b.data());
    (0..plane)
        .filter(|&p| da[p].max(da[plane + p]).max(da[2 * plane + p]) > 150.0)
        .map(|p| {
            let h0 = hue(da[p].into(), da[plane + p].into(), da[2 * plane + p].into());
            let h1 = hue(db[p].into(), db[plane + p].into(), db[2 * plane + p].into());
            (h1 - h0).rem_euclid(360.0)
        })
        .collect()
}

#[test]
fn hue_shift_moves_every_inked_pixel() {
    let base = render_digits(4, 32, 5).unwrap();
    let target: BiasSpec = "hue=60".parse().unwrap();
    let pair = synth_biased_pair(&base, &BiasSpec::default(), &target, 1).unwrap();
    let mut checked = 0;
    for img in &pair.y.images {
        let orig = base.images.iter().find(|b| b.id == img.id).unwrap();
        for d in mean_hue_shift(&orig.pixels, &img.pixels) {
            // one quantization step at value 150 moves hue by under 0.5 degrees
            assert!((d - 60.0).abs() < 0.5, "{d}");
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn identity_specs_only_split() {
    let base = render_digits(3, 16, 5).unwrap();
    let id = BiasSpec::default();
    let pair = synth_biased_pair(&base, &id, &id, 9).unwrap();
    assert_eq!(pair.x.len() + pair.y.len(), base.len());
    for img in pair.x.images.iter().chain(&pair.y.images) {
        let orig = base.images.iter().find(|b| b.id == img.id).unwrap();
        assert_eq!(orig, img);
    }
    let xi: std::collections::HashSet<_> = pair.x.images.iter().map(|i| &i.id).collect();
    assert!(pair.y.images.iter().all(|i| !xi.contains(&i.id)));
    assert_eq!(pair.correspondence.len(), base.len());
}

#[test]
fn split_preserves_label_histogram_and_is_reproducible() {
    let base = render_digits(5, 16, 6).unwrap();
    let s: BiasSpec = "noise=5,bg=stripes,contrast=0.9".parse().unwrap();
    let t: BiasSpec = "hue=200,bg=grain,seed=4".parse().unwrap();
    let a = synth_biased_pair(&base, &s, &t, 2).unwrap();
    let b = synth_biased_pair(&base, &s, &t, 2).unwrap();
    assert_eq!(a, b);
    let hx = a.x.histogram();
    let hy = a.y.histogram();
    let sum: Vec<usize> = hx.iter().zip(&hy).map(|(p, q)| p + q).collect();
    assert_eq!(sum, base.histogram());
    assert_eq!(hx, vec![3; 10]);
    for img in a.x.images.iter().chain(&a.y.images) {
        let orig = base.images.iter().find(|o| o.id == img.id).unwrap();
        assert_eq!(img.label, orig.label);
        assert!(img.pixels.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }
}

#[test]
fn too_small_class_is_rejected() {
    let img = |id: &str, label| LabeledImage {
        id: id.into(),
        label,
        pixels: Tensor::zeros(&[3, 4, 4]),
    };
    let ds = DomainDataset::new("d", vec![img("a", 0), img("b", 0), img("c", 1)], 2).unwrap();
    let id = BiasSpec::default();
    assert!(matches!(synth_biased_pair(&ds, &id, &id, 0), Err(Error::DatasetTooSmall(_))));
}

#[test]
fn rotation_angles_are_uniform() {
    let mut rng = RngState::new(11);
    let n = 10_000;
    let mut angles: Vec<f64> = (0..n).map(|_| draw_augmentation(&mut rng).0).collect();
    angles.sort_by(f64::total_cmp);
    let span = 2.0 * ROTATION_DEGREES;
    let d = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = (a + ROTATION_DEGREES) / span;
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // Kolmogorov-Smirnov critical value at p = 0.01
    assert!(d < 1.628 / (n as f64).sqrt(), "D = {d}");
    assert!(angles[0] >= -ROTATION_DEGREES && angles[n - 1] <= ROTATION_DEGREES);
}

#[test]
fn preprocess_never_changes_labels() {
    let ds = render_digits(2, 28, 3).unwrap();
    let mut rng = RngState::new(4);
    for img in &ds.images {
        for train in [false, true] {
            let out = preprocess(img, 32, train, &mut rng);
            assert_eq!(out.label, img.label);
            assert_eq!(out.pixels.shape(), &[3, 32, 32]);
        }
    }
}
