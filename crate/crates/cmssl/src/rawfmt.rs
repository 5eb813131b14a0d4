//! On-disk datasets: a JSON manifest plus one CMRW file per sample and modality.
//!
//! CMRW layout (all little-endian): the magic bytes `CMRW`, then `u32`
//! channels, height and width (16 header bytes in total), then
//! `channels × height × width` `f32` values in row-major `[c][y][x]` order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cmssl_core::dataset::{Dataset, Label, Sample, NEGATIVE_CLASS_NAME};
use cmssl_core::encoders::ModalitySpec;
use cmssl_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CMRW";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;

/// Encode one `[c, h, w]` image.
pub fn encode_cmrw(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(CliError::Config(format!("CMRW images are [c, h, w], got {:?}", image.shape())));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * image.len());
    out.extend_from_slice(MAGIC);
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| CliError::Config(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in image.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decode CMRW bytes; `path` is only used in error messages.
pub fn decode_cmrw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::format(path, format!("file is {} bytes, shorter than the CMRW header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::format(path, format!("bad magic {:?}, expected \"CMRW\"", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(CliError::format(
            path,
            format!("header shape {shape:?} needs {} data bytes, found {}", 4 * n, body.len()),
        ));
    }
    let values = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    Tensor::new(shape, values).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_cmrw(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_cmrw(image)?).map_err(|e| CliError::io(path, e))
}

pub fn read_cmrw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_cmrw(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub sample_id: usize,
    /// A class name, or `Negative`.
    pub label: String,
    /// Modality name to CMRW path, relative to the manifest.
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub class_names: Vec<String>,
    pub modalities: Vec<ModalitySpec>,
    pub samples: Vec<ManifestSample>,
}

fn file_name(sample_id: usize, modality: &str) -> PathBuf {
    PathBuf::from("data").join(format!("{sample_id:06}_{modality}.cmrw"))
}

/// Write `manifest.json` and the CMRW files under `dir`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, config_fingerprint: Option<&str>) -> Result<PathBuf> {
    let data = dir.join("data");
    fs::create_dir_all(&data).map_err(|e| CliError::io(&data, e))?;
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let label = match s.label {
            Label::Class(c) => dataset.class_names[c].clone(),
            Label::Negative => NEGATIVE_CLASS_NAME.to_string(),
        };
        let mut files = BTreeMap::new();
        for (m, img) in dataset.modalities.iter().zip(&s.images) {
            let rel = file_name(s.sample_id, &m.name);
            write_cmrw(&dir.join(&rel), img)?;
            files.insert(m.name.clone(), rel);
        }
        samples.push(ManifestSample { sample_id: s.sample_id, label, files });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config_fingerprint: config_fingerprint.map(str::to_string),
        class_names: dataset.class_names.clone(),
        modalities: dataset.modalities.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from its manifest, converting values to `f64`.
pub fn load_raw_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::format(manifest_path, format!("at `{}`: {}", e.path(), e.inner())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(CliError::format(manifest_path, format!("unsupported format_version {}", manifest.format_version)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for ms in &manifest.samples {
        let label = if ms.label == NEGATIVE_CLASS_NAME {
            Label::Negative
        } else {
            let c = manifest.class_names.iter().position(|n| *n == ms.label).ok_or_else(|| {
                CliError::format(manifest_path, format!("sample {} has unknown class {:?}", ms.sample_id, ms.label))
            })?;
            Label::Class(c)
        };
        if let Some(extra) = ms.files.keys().find(|k| !manifest.modalities.iter().any(|m| &m.name == *k)) {
            return Err(CliError::format(manifest_path, format!("sample {} lists unknown modality {extra}", ms.sample_id)));
        }
        let mut images = Vec::with_capacity(manifest.modalities.len());
        for m in &manifest.modalities {
            let rel = ms.files.get(&m.name).ok_or_else(|| {
                CliError::format(manifest_path, format!("sample {} has no file for modality {}", ms.sample_id, m.name))
            })?;
            let path = dir.join(rel);
            let img = read_cmrw(&path)?;
            if img.shape() != m.image_shape() {
                return Err(CliError::format(
                    &path,
                    format!("shape {:?} does not match manifest modality {} {:?}", img.shape(), m.name, m.image_shape()),
                ));
            }
            images.push(img);
        }
        samples.push(Sample { sample_id: ms.sample_id, label, images });
    }
    let dataset = Dataset { modalities: manifest.modalities, class_names: manifest.class_names, samples };
    dataset.validate().map_err(|e| CliError::format(manifest_path, e.to_string()))?;
    Ok(dataset)
}
