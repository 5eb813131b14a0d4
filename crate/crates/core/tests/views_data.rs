//! Augmentations and the synthetic generator against independent oracles:
//! a from-scratch bilinear resampler and nearest-centroid classifiers.

use cmssl_core::dataset::Dataset;
use cmssl_core::synth::{class_prototypes, generate_synthetic, labeled_latents, SynthSpec};
use cmssl_core::views::{make_views, random_resized_crop, resized_crop, AugmentationConfig};
use cmssl_core::{rng, Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear resample of one channel: output pixel `i` reads the crop at
/// `top + (i + ½)·crop/n − ½`, clamped to the image, interpolating between
/// the two neighbouring pixels.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, top: f64, left: f64, ch: f64, cw: f64) -> Vec<f64> {
    let at = |y: usize, x: usize| src[y * w + x];
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (top + (i as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..w {
            let x = (left + (j as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            out.push(v);
        }
    }
    out
}

#[test]
fn resized_crop_matches_bilinear_oracle_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let values: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
    let img = Tensor::new(vec![1, 8, 8], values.clone()).unwrap();
    for (top, left, side) in [(0.37, 0.21, 7.3), (0.0, 0.5, 7.5), (0.1, 0.0, 7.9)] {
        let got = resized_crop(&img, top, left, side, side).unwrap();
        let want = bilinear_oracle(&values, 8, 8, top, left, side, side);
        for (g, w) in got.values().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn random_resized_crop_is_seeded_and_shape_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::new(vec![2, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = random_resized_crop(&img, 0.9, 1.0, &mut rng::stream(5, "crop", &[])).unwrap();
    let b = random_resized_crop(&img, 0.9, 1.0, &mut rng::stream(5, "crop", &[])).unwrap();
    assert_eq!(a.shape(), img.shape());
    assert_eq!(a, b);
    assert_ne!(a, img);
    let tiny = Tensor::zeros(vec![1, 3, 3]);
    assert!(matches!(random_resized_crop(&tiny, 0.9, 1.0, &mut rng::stream(5, "crop", &[])), Err(Error::Contract(_))));
}

#[test]
fn make_views_counts_and_star_rule() {
    let ds = generate_synthetic(&SynthSpec { samples_per_class: 2, negative_samples: 2, ..SynthSpec::default() }, 3).unwrap();
    let s = &ds.samples[0];
    let mut r = rng::stream(0, "views", &[]);
    let views = make_views(s, &[0, 1, 2], &AugmentationConfig::default(), &mut r).unwrap();
    assert_eq!(views.len(), 6);
    assert!(views.iter().all(|v| v.augmented));
    let views = make_views(s, &[0, 2], &AugmentationConfig::disabled(), &mut r).unwrap();
    assert_eq!(views.len(), 2);
    assert!(views.iter().all(|v| !v.augmented));
    assert_eq!(views[1].image, s.images[2]);
    assert!(matches!(make_views(s, &[1], &AugmentationConfig::disabled(), &mut r), Err(Error::Config(_))));
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (y - x)).sum::<f64>().abs()
}

fn nearest(point: &[f64], centres: &[Vec<f64>]) -> usize {
    (0..centres.len()).min_by(|&a, &b| sq_dist(point, &centres[a]).total_cmp(&sq_dist(point, &centres[b]))).unwrap()
}

/// Pixel-space nearest-centroid accuracy on one modality: centroids from the
/// training split, accuracy on the validation split.
fn pixel_centroid_accuracy(ds: &Dataset, modality: usize) -> f64 {
    let split = ds.split();
    let k = ds.num_classes();
    let dim = ds.modalities[modality].pixels();
    let mut centres = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for &i in &split.train {
        let c = ds.samples[i].label.class().unwrap();
        counts[c] += 1;
        for (acc, v) in centres[c].iter_mut().zip(ds.samples[i].images[modality].values()) {
            *acc += v;
        }
    }
    for (centre, n) in centres.iter_mut().zip(&counts) {
        centre.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = split
        .val
        .iter()
        .filter(|&&i| nearest(ds.samples[i].images[modality].values(), &centres) == ds.samples[i].label.class().unwrap())
        .count();
    correct as f64 / split.val.len() as f64
}

#[test]
fn default_data_is_learnable_but_not_trivial() {
    let spec = SynthSpec::default();
    let ds = generate_synthetic(&spec, 0).unwrap();
    assert_eq!(ds.samples.len(), 600);
    assert_eq!(ds.class_counts(), vec![75, 75, 75, 75, 75, 75, 150]);

    let prototypes = class_prototypes(&spec, 0);
    let latents = labeled_latents(&spec, 0);
    let correct = latents.iter().enumerate().filter(|(id, z)| nearest(z, &prototypes) == id % 6).count();
    assert_eq!(correct, latents.len(), "latent nearest-prototype accuracy");

    let acc = pixel_centroid_accuracy(&ds, 0);
    assert!(acc > 0.4, "pixel nearest-centroid accuracy on modality 0: {acc}");
    assert!(acc < 1.0, "modality 0 should not be trivially separable: {acc}");
}

#[test]
fn more_pixel_noise_lowers_centroid_accuracy() {
    let accuracies: Vec<f64> = [0.5, 2.0, 6.0]
        .iter()
        .map(|&noise| {
            let mut spec = SynthSpec::default();
            spec.modalities[0].noise_std = noise;
            pixel_centroid_accuracy(&generate_synthetic(&spec, 0).unwrap(), 0)
        })
        .collect();
    assert!(accuracies[0] > accuracies[1] && accuracies[1] > accuracies[2], "{accuracies:?}");
}

#[test]
fn generator_is_deterministic_per_seed() {
    let spec = SynthSpec { samples_per_class: 5, negative_samples: 6, ..SynthSpec::default() };
    let a = generate_synthetic(&spec, 9).unwrap();
    let b = generate_synthetic(&spec, 9).unwrap();
    let bits = |d: &Dataset| -> Vec<u64> {
        d.samples.iter().flat_map(|s| s.images.iter().flat_map(|t| t.values().iter().map(|v| v.to_bits()))).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
}
