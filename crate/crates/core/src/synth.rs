//! Synthetic multi-modal scenes driven by a shared latent factor.
//!
//! Every sample draws a class latent `z = z_class + N(0, σ_within²)`. Each
//! modality renders `z` through its own fixed random map into smooth spatial
//! patterns, adds modality-private nuisance patterns, optionally takes the
//! magnitude (a SAR-like nonlinearity) and finally adds pixel noise. Only
//! `z` is shared between modalities, so cross-modal agreement isolates the
//! class-relevant signal from the private nuisance.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, Sample};
use crate::encoders::ModalitySpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModality {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Scale of the modality-private nuisance patterns.
    pub nuisance_std: f64,
    /// Render through `|·|` before adding noise.
    pub nonlinear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub samples_per_class: usize,
    pub within_class_std: f64,
    pub negative_samples: usize,
    pub negative_prototypes: usize,
    /// Standard deviation of negative-class prototypes (class prototypes use 1).
    pub negative_prototype_std: f64,
    pub nuisance_dim: usize,
    /// Cosine frequencies per axis used to build the smooth patterns.
    pub pattern_frequencies: usize,
    pub modalities: Vec<SynthModality>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let m = |name: &str, channels, size, noise_std, nuisance_std, nonlinear| SynthModality {
            name: name.to_string(),
            channels,
            height: size,
            width: size,
            noise_std,
            nuisance_std,
            nonlinear,
        };
        SynthSpec {
            num_classes: 6,
            latent_dim: 8,
            samples_per_class: 75,
            within_class_std: 0.4,
            negative_samples: 150,
            negative_prototypes: 12,
            negative_prototype_std: 1.5,
            nuisance_dim: 6,
            pattern_frequencies: 4,
            modalities: vec![
                m("S1", 2, 16, 1.5, 1.5, true),
                m("S2", 2, 16, 2.0, 1.5, false),
                m("NAIP", 4, 32, 1.5, 3.5, false),
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_classes == 0 || self.latent_dim == 0 || self.samples_per_class == 0 {
            return bad("num_classes, latent_dim and samples_per_class must be positive");
        }
        if self.negative_samples > 0 && self.negative_prototypes == 0 {
            return bad("negative samples need at least one negative prototype");
        }
        if !(self.within_class_std >= 0.0 && self.negative_prototype_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        if self.pattern_frequencies == 0 {
            return bad("pattern_frequencies must be positive");
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required");
        }
        for m in &self.modalities {
            if m.channels == 0 || m.height == 0 || m.width == 0 {
                return bad("modality shapes must be positive");
            }
            if !(m.noise_std >= 0.0 && m.nuisance_std >= 0.0) {
                return bad("noise_std and nuisance_std must be non-negative");
            }
        }
        Ok(())
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        self.modalities
            .iter()
            .enumerate()
            .map(|(i, m)| ModalitySpec::new(i, &m.name, m.channels, m.height, m.width))
            .collect()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Smooth unit-RMS patterns, `factors` of them, each `channels × h × w`,
/// built from cosines of frequency `step · a` per axis for `a < freqs`.
/// With `step = 2` every pattern is mirror-symmetric, so flips leave it unchanged.
fn render_patterns<R: Rng + ?Sized>(m: &SynthModality, factors: usize, freqs: usize, step: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let (h, w) = (m.height, m.width);
    let basis = |n: usize, f: usize, i: usize| libm::cos(core::f64::consts::PI * f as f64 * (i as f64 + 0.5) / n as f64);
    (0..factors)
        .map(|_| {
            let mut p = Vec::with_capacity(m.channels * h * w);
            for _ in 0..m.channels {
                let coef: Vec<f64> = (0..freqs * freqs).map(|_| normal(rng)).collect();
                for y in 0..h {
                    for x in 0..w {
                        let mut v = 0.0;
                        for a in 0..freqs {
                            for b in 0..freqs {
                                v += coef[a * freqs + b] * basis(h, step * a, y) * basis(w, step * b, x);
                            }
                        }
                        p.push(v);
                    }
                }
            }
            let rms = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64);
            if rms > 0.0 {
                p.iter_mut().for_each(|v| *v /= rms);
            }
            p
        })
        .collect()
}

struct Renderer {
    signal: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
}

/// Generate the dataset: labeled samples first (class = id mod classes), then negatives.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::stream(seed, "synth/prototypes", &[]);
    let prototypes: Vec<Vec<f64>> =
        (0..spec.num_classes).map(|_| (0..spec.latent_dim).map(|_| normal(&mut r)).collect()).collect();
    let mut r = rng::stream(seed, "synth/negative-prototypes", &[]);
    let neg_prototypes: Vec<Vec<f64>> = (0..spec.negative_prototypes)
        .map(|_| (0..spec.latent_dim).map(|_| spec.negative_prototype_std * normal(&mut r)).collect())
        .collect();
    let renderers: Vec<Renderer> = spec
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r = rng::stream(seed, "synth/render", &[i as u64]);
            Renderer {
                signal: render_patterns(m, spec.latent_dim, spec.pattern_frequencies, 2, &mut r),
                nuisance: render_patterns(m, spec.nuisance_dim, spec.pattern_frequencies, 1, &mut r),
            }
        })
        .collect();

    let labeled = spec.num_classes * spec.samples_per_class;
    let total = labeled + spec.negative_samples;
    let mut samples = Vec::with_capacity(total);
    for id in 0..total {
        let (label, proto) = if id < labeled {
            let c = id % spec.num_classes;
            (Label::Class(c), &prototypes[c])
        } else {
            (Label::Negative, &neg_prototypes[(id - labeled) % spec.negative_prototypes])
        };
        let mut r = rng::stream(seed, "synth/sample", &[id as u64]);
        let z = draw_latent(spec, proto, &mut r);
        let mut images = Vec::with_capacity(spec.modalities.len());
        for (m, rend) in spec.modalities.iter().zip(&renderers) {
            let n = m.channels * m.height * m.width;
            let mut x = vec![0.0; n];
            let zs = 1.0 / libm::sqrt(spec.latent_dim as f64);
            for (zk, pat) in z.iter().zip(&rend.signal) {
                for (xi, pv) in x.iter_mut().zip(pat) {
                    *xi += zk * zs * pv;
                }
            }
            if m.nuisance_std > 0.0 && spec.nuisance_dim > 0 {
                let us = m.nuisance_std / libm::sqrt(spec.nuisance_dim as f64);
                for pat in &rend.nuisance {
                    let u = normal(&mut r);
                    for (xi, pv) in x.iter_mut().zip(pat) {
                        *xi += u * us * pv;
                    }
                }
            }
            if m.nonlinear {
                x.iter_mut().for_each(|v| *v = v.abs());
            }
            if m.noise_std > 0.0 {
                x.iter_mut().for_each(|v| *v += m.noise_std * normal(&mut r));
            }
            images.push(Tensor::new(vec![m.channels, m.height, m.width], x)?);
        }
        samples.push(Sample { sample_id: id, label, images });
    }
    let ds = Dataset { modalities: spec.modality_specs(), class_names: default_names(spec.num_classes), samples };
    ds.validate()?;
    Ok(ds)
}

fn draw_latent<R: Rng + ?Sized>(spec: &SynthSpec, proto: &[f64], r: &mut R) -> Vec<f64> {
    proto
        .iter()
        .map(|&p| if spec.within_class_std > 0.0 { p + spec.within_class_std * normal(r) } else { p })
        .collect()
}

/// Latent vector of every labeled sample, in sample order (for oracle checks).
pub fn labeled_latents(spec: &SynthSpec, seed: u64) -> Vec<Vec<f64>> {
    let prototypes = class_prototypes(spec, seed);
    (0..spec.num_classes * spec.samples_per_class)
        .map(|id| draw_latent(spec, &prototypes[id % spec.num_classes], &mut rng::stream(seed, "synth/sample", &[id as u64])))
        .collect()
}

fn default_names(k: usize) -> Vec<String> {
    let names = Dataset::default_class_names();
    (0..k).map(|i| names.get(i).cloned().unwrap_or_else(|| alloc::format!("class{i}"))).collect()
}

/// Class prototypes as used by the generator (for oracle checks).
pub fn class_prototypes(spec: &SynthSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "synth/prototypes", &[]);
    (0..spec.num_classes).map(|_| (0..spec.latent_dim).map(|_| normal(&mut r)).collect()).collect()
}
