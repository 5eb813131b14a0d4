//! The experiment config: one JSON file drives every subcommand.
//!
//! A config file only needs the keys it changes; it is merged over
//! [`ExperimentConfig::default`] before strict parsing, so unknown keys are
//! still rejected with their full key path.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use cmssl_core::contrastive::ContrastiveConfig;
use cmssl_core::dataset::Dataset;
use cmssl_core::downstream::FinetuneConfig;
use cmssl_core::encoders::{default_encoder_spec, Encoder, EncoderSpec};
use cmssl_core::grid::{GridConfig, GridRow, GridSpec};
use cmssl_core::optim::OptimizerConfig;
use cmssl_core::synth::{generate_synthetic, SynthSpec};
use cmssl_core::views::AugmentationConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::rawfmt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic { seed: u64, spec: SynthSpec },
    /// Manifest path; relative paths resolve against the config file's directory.
    Manifest(PathBuf),
}

/// One grid row, with modalities named.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    /// `null` is the randomly initialized baseline.
    pub pretrain: Option<Vec<String>>,
    #[serde(default)]
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// `null` selects every subset layout (the three-modality table for the default data).
    pub rows: Option<Vec<RowConfig>>,
    pub columns: Option<Vec<Vec<String>>>,
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { rows: None, columns: None, seeds: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Encoder per modality name; missing modalities get the default backbone.
    pub modalities: BTreeMap<String, EncoderSpec>,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationConfig,
    pub pretrain: OptimizerConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic { seed: 0, spec: SynthSpec::default() },
            modalities: BTreeMap::new(),
            contrastive: ContrastiveConfig::default(),
            augmentation: AugmentationConfig::default(),
            pretrain: OptimizerConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: GridSection::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Overlay `user` onto `base`. Objects merge key by key; anything else
/// replaces. A single-key object replacing a different single-key object is
/// an enum variant switch and replaces wholesale.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let switch = b.len() == 1 && u.len() == 1 && b.keys().next() != u.keys().next();
            if switch {
                *b = u;
                return;
            }
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

impl ExperimentConfig {
    /// Parse config text; `base_dir` anchors a relative manifest path.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(ExperimentConfig::default()).expect("default config serializes");
        merge(&mut merged, user);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged)
            .map_err(|e| CliError::ConfigKey { path: e.path().to_string(), message: e.inner().to_string() })?;
        if let (DatasetSource::Manifest(p), Some(dir)) = (&mut cfg.dataset, base_dir) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => {
                let cfg = ExperimentConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, p.parent())
            }
        }
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        self.contrastive.validate()?;
        self.augmentation.validate()?;
        self.pretrain.validate()?;
        self.finetune.optimizer.validate()?;
        if self.grid.seeds.is_empty() {
            return Err(CliError::Config("grid.seeds must list at least one seed".into()));
        }
        let unique: BTreeSet<u64> = self.grid.seeds.iter().copied().collect();
        if unique.len() != self.grid.seeds.len() {
            return Err(CliError::Config("grid.seeds must not repeat".into()));
        }
        Ok(())
    }

    /// Sorted-key JSON of everything that influences results (the output
    /// directory is excluded).
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        // `Value` maps are ordered by key, so this is canonical.
        v.to_string()
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic { seed, spec } => Ok(generate_synthetic(spec, *seed)?),
            DatasetSource::Manifest(path) => rawfmt::load_raw_dataset(path),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A config bound to its data: everything a subcommand needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub dataset: Dataset,
    /// One per dataset modality, in modality-id order.
    pub encoders: Vec<Encoder>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.load_dataset()?;
        dataset.validate()?;
        let names: BTreeSet<&str> = dataset.modalities.iter().map(|m| m.name.as_str()).collect();
        if let Some(unknown) = config.modalities.keys().find(|k| !names.contains(k.as_str())) {
            return Err(CliError::ConfigKey {
                path: format!("modalities.{unknown}"),
                message: format!("dataset has no modality named {unknown}"),
            });
        }
        let top = dataset.modalities.iter().map(|m| m.pixels()).max().unwrap_or(0);
        let encoders = dataset
            .modalities
            .iter()
            .map(|m| {
                let spec = config.modalities.get(&m.name).cloned().unwrap_or_else(|| default_encoder_spec(m.pixels() == top));
                Encoder::new(m.clone(), spec)
            })
            .collect::<cmssl_core::Result<Vec<_>>>()?;
        if let Some(first) = encoders.first() {
            let width = first.spec.embedding_dim();
            if let Some(e) = encoders.iter().find(|e| e.spec.embedding_dim() != width) {
                return Err(CliError::Config(format!(
                    "all modalities need the same embedding width; {} has {}, {} has {width}",
                    e.modality.name,
                    e.spec.embedding_dim(),
                    first.modality.name
                )));
            }
        }
        let fingerprint = config.fingerprint();
        let exp = Experiment { config, fingerprint, dataset, encoders };
        exp.grid_spec()?;
        Ok(exp)
    }

    /// Modality ids for names, sorted; rejects duplicates and unknown names.
    pub fn modality_ids<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        let mut ids = names.iter().map(|n| self.dataset.modality_id(n.as_ref())).collect::<cmssl_core::Result<Vec<_>>>()?;
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(CliError::Config("at least one modality is required".into()));
        }
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("a modality is listed twice".into()));
        }
        Ok(ids)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let full = GridSpec::full_layout(self.dataset.modalities.len());
        let rows = match &self.config.grid.rows {
            None => full.rows,
            Some(rows) => rows
                .iter()
                .map(|r| {
                    Ok(GridRow {
                        pretrain: r.pretrain.as_ref().map(|p| self.modality_ids(p)).transpose()?,
                        star: r.star,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let columns = match &self.config.grid.columns {
            None => full.columns,
            Some(cols) => cols.iter().map(|c| self.modality_ids(c)).collect::<Result<Vec<_>>>()?,
        };
        let spec = GridSpec { rows, columns };
        spec.validate(self.dataset.modalities.len())?;
        Ok(spec)
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            encoders: self.encoders.clone(),
            contrastive: self.config.contrastive,
            augmentation: self.config.augmentation,
            pretrain: self.config.pretrain,
            finetune: self.config.finetune,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(ExperimentConfig::parse("{}", None).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let cfg = ExperimentConfig::parse(r#"{"pretrain": {"epochs": 3}, "dataset": {"synthetic": {"seed": 9}}}"#, None).unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.learning_rate, OptimizerConfig::default().learning_rate);
        assert!(matches!(cfg.dataset, DatasetSource::Synthetic { seed: 9, .. }));
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = ExperimentConfig::parse(r#"{"pretrain": {"epochz": 3}}"#, None).unwrap_err();
        match err {
            CliError::ConfigKey { path, .. } => assert_eq!(path, "pretrain.epochz"),
            other => panic!("unexpected {other}"),
        }
        let err = ExperimentConfig::parse(r#"{"dataset": {"synthetic": {"spec": {"latent": 3}}}}"#, None).unwrap_err();
        assert!(err.to_string().contains("dataset.synthetic.spec.latent"), "{err}");
    }

    #[test]
    fn variant_switch_replaces_the_dataset() {
        let cfg = ExperimentConfig::parse(r#"{"dataset": {"manifest": "data/manifest.json"}}"#, Some(Path::new("/cfg"))).unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Manifest(PathBuf::from("/cfg/data/manifest.json")));
    }

    #[test]
    fn fingerprint_ignores_output_dir_and_key_order() {
        let a = ExperimentConfig::parse(r#"{"output_dir": "a", "pretrain": {"epochs": 2, "batch_size": 8}}"#, None).unwrap();
        let b = ExperimentConfig::parse(r#"{"pretrain": {"batch_size": 8, "epochs": 2}, "output_dir": "b"}"#, None).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ExperimentConfig::default().fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        assert!(matches!(ExperimentConfig::parse(r#"{"contrastive": {"temperature": 0}}"#, None), Err(CliError::Core(_))));
        assert!(matches!(ExperimentConfig::parse(r#"{"grid": {"seeds": []}}"#, None), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::parse("[1]", None), Err(CliError::Config(_))));
    }

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
