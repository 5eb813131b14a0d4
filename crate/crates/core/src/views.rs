//! View generation: random flips, conservative resized crops, and the
//! per-sample view sets used by pre-training.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub views_per_modality: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            crop_scale_min: 0.9,
            crop_scale_max: 1.0,
            views_per_modality: 2,
        }
    }
}

impl AugmentationConfig {
    /// One raw view per modality.
    pub fn disabled() -> Self {
        AugmentationConfig { enabled: false, views_per_modality: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.flip_h_prob) || !p_ok(self.flip_v_prob) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scales must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if self.views_per_modality == 0 {
            return Err(Error::Config("views_per_modality must be at least 1".into()));
        }
        if !self.enabled && self.views_per_modality != 1 {
            return Err(Error::Config("without augmentations each modality yields exactly one view".into()));
        }
        Ok(())
    }
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Dimension(format!("expected a c×h×w image, got {s:?}"))),
    }
}

/// Reverse the width axis (`horizontal`) or the height axis.
pub fn flip(image: &Tensor, horizontal: bool) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    let src = image.values();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = if horizontal { y } else { h - 1 - y };
            let row = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            if horizontal {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Flip with probability `prob`. One draw from `rng` regardless of outcome.
pub fn random_flip<R: Rng + ?Sized>(image: &Tensor, horizontal: bool, prob: f64, rng: &mut R) -> Result<Tensor> {
    if rng.random_bool(prob) {
        flip(image, horizontal)
    } else {
        Ok(image.clone())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Crop the window `[top, top + crop_h) × [left, left + crop_w)` (fractional
/// pixel units) and resample it bilinearly to the original size.
pub fn resized_crop(image: &Tensor, top: f64, left: f64, crop_h: f64, crop_w: f64) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if !(crop_h >= 1.0 && crop_w >= 1.0) {
        return Err(Error::Contract(format!("crop {crop_h}×{crop_w} is smaller than one pixel")));
    }
    if top < 0.0 || left < 0.0 || top + crop_h > h as f64 + 1e-9 || left + crop_w > w as f64 + 1e-9 {
        return Err(Error::Contract("crop window leaves the image".into()));
    }
    let coords = |n: usize, start: f64, len: f64| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let p = (start + (i as f64 + 0.5) * (len / n as f64) - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = libm::floor(p) as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, top, crop_h);
    let xs = coords(w, left, crop_w);
    let src = image.values();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top_v = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bot_v = if ty == 0.0 { top_v } else { lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx) };
                out.push(lerp(top_v, bot_v, ty));
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Area fraction drawn uniformly from `[scale_min, scale_max]`, aspect ratio
/// kept, offset uniform over valid positions, resized back bilinearly.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Tensor,
    scale_min: f64,
    scale_max: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let (_, h, w) = chw(image)?;
    if h < 4 || w < 4 {
        return Err(Error::Contract(format!("random_resized_crop needs at least 4×4 pixels, got {h}×{w}")));
    }
    if !(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0) {
        return Err(Error::Config(format!("invalid crop scale range [{scale_min}, {scale_max}]")));
    }
    let s = rng.random_range(scale_min..=scale_max);
    let r = libm::sqrt(s);
    let (ch, cw) = (h as f64 * r, w as f64 * r);
    if ch < 1.0 || cw < 1.0 {
        return Err(Error::Contract("crop smaller than one pixel".into()));
    }
    let top = rng.random_range(0.0..=(h as f64 - ch));
    let left = rng.random_range(0.0..=(w as f64 - cw));
    resized_crop(image, top, left, ch, cw)
}

/// Horizontal flip, vertical flip, then resized crop.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, cfg: &AugmentationConfig, rng: &mut R) -> Result<Tensor> {
    let x = random_flip(image, true, cfg.flip_h_prob, rng)?;
    let x = random_flip(&x, false, cfg.flip_v_prob, rng)?;
    random_resized_crop(&x, cfg.crop_scale_min, cfg.crop_scale_max, rng)
}

/// A view of one sample in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub sample_id: usize,
    pub modality_id: usize,
    pub augmented: bool,
    pub is_negative_class: bool,
    pub image: Tensor,
}

pub const SINGLE_MODALITY_WITHOUT_AUGMENTATION: &str =
    "pre-training without augmentations needs at least 2 modalities: with one unaugmented view per modality, a single modality leaves every view without a positive";

/// Views of `sample` for the given modalities, grouped by modality in the
/// order given.
pub fn make_views<R: Rng + ?Sized>(
    sample: &Sample,
    modalities: &[usize],
    aug: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<View>> {
    aug.validate()?;
    if modalities.is_empty() {
        return Err(Error::Config("no modalities selected".into()));
    }
    if !aug.enabled && modalities.len() < 2 {
        return Err(Error::Config(SINGLE_MODALITY_WITHOUT_AUGMENTATION.into()));
    }
    let mut views = Vec::with_capacity(modalities.len() * aug.views_per_modality);
    for &m in modalities {
        let image = sample.images.get(m).ok_or(Error::UnknownModality(m))?;
        for _ in 0..aug.views_per_modality {
            let image = if aug.enabled { augment(image, aug, rng)? } else { image.clone() };
            views.push(View {
                sample_id: sample.sample_id,
                modality_id: m,
                augmented: aug.enabled,
                is_negative_class: sample.label.is_negative(),
                image,
            });
        }
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::rng;
    use alloc::vec;

    fn img(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| libm::sin(i as f64 * 0.7) * 3.0).collect()).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let x = img(2, 5, 6);
        for horizontal in [true, false] {
            let y = flip(&x, horizontal).unwrap();
            assert_ne!(y, x);
            assert_eq!(flip(&y, horizontal).unwrap(), x);
        }
        let f = flip(&img(1, 1, 3), true).unwrap();
        assert_eq!(f.values(), &[img(1, 1, 3).values()[2], img(1, 1, 3).values()[1], img(1, 1, 3).values()[0]]);
    }

    #[test]
    fn zero_probability_flip_is_identity() {
        let x = img(2, 4, 4);
        let mut r = rng::stream(1, "t", &[]);
        for _ in 0..20 {
            assert_eq!(random_flip(&x, true, 0.0, &mut r).unwrap(), x);
        }
    }

    #[test]
    fn flip_decisions_are_seeded() {
        let x = img(1, 4, 4);
        let run = |seed| {
            let mut r = rng::stream(seed, "t", &[]);
            (0..16).map(|_| random_flip(&x, false, 0.5, &mut r).unwrap() != x).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn full_scale_crop_is_identity() {
        let x = img(3, 16, 16);
        let mut r = rng::stream(2, "t", &[]);
        let y = random_resized_crop(&x, 1.0, 1.0, &mut r).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn crop_preserves_constants_and_shape() {
        let x = Tensor::new(vec![2, 8, 12], vec![-1.25; 192]).unwrap();
        let mut r = rng::stream(4, "t", &[]);
        for _ in 0..10 {
            let y = random_resized_crop(&x, 0.5, 1.0, &mut r).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.values().iter().all(|&v| v == -1.25));
        }
    }

    #[test]
    fn crop_size_limits() {
        let mut r = rng::stream(4, "t", &[]);
        assert!(matches!(random_resized_crop(&img(1, 3, 8), 0.9, 1.0, &mut r), Err(Error::Contract(_))));
        assert!(matches!(resized_crop(&img(1, 8, 8), 0.0, 0.0, 0.5, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn disabled_config_is_bitwise_identity_pipeline() {
        let cfg = AugmentationConfig { flip_h_prob: 0.0, flip_v_prob: 0.0, crop_scale_min: 1.0, crop_scale_max: 1.0, ..Default::default() };
        let x = img(2, 16, 16);
        let mut r = rng::stream(9, "t", &[]);
        assert_eq!(augment(&x, &cfg, &mut r).unwrap(), x);
    }

    fn sample(k: usize) -> Sample {
        Sample { sample_id: 7, label: Label::Class(1), images: (0..k).map(|_| img(2, 8, 8)).collect() }
    }

    #[test]
    fn view_counts_and_flags() {
        let mut r = rng::stream(1, "t", &[]);
        let v = make_views(&sample(3), &[0, 1, 2], &AugmentationConfig::default(), &mut r).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.iter().all(|v| v.augmented && v.sample_id == 7));
        let v = make_views(&sample(3), &[0, 2], &AugmentationConfig::disabled(), &mut r).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|v| !v.augmented));
        let err = make_views(&sample(3), &[1], &AugmentationConfig::disabled(), &mut r).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("at least 2 modalities")));
    }
}
