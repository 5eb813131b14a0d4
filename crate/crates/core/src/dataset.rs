//! Multi-modal samples and datasets.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::ModalitySpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = ["CAFOs", "Landfills", "Coal Mines", "Proc Plants", "R&Ts", "WWTPs"];
pub const NEGATIVE_CLASS_NAME: &str = "Negative";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Only ever used as a contrastive negative.
    Negative,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Negative => None,
        }
    }

    pub fn is_negative(self) -> bool {
        self == Label::Negative
    }
}

/// One geographic location seen by every modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    pub label: Label,
    /// Indexed by modality id.
    pub images: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Labeled train / validation sample positions (negatives excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn default_class_names() -> Vec<String> {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.modalities.iter().enumerate() {
            if m.id != i {
                return Err(Error::Config(format!("modality ids must be 0..K-1, found {} at {i}", m.id)));
            }
        }
        let names: BTreeSet<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.modalities.len() {
            return Err(Error::Config("modality names must be unique".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.sample_id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.sample_id)));
            }
            if let Label::Class(c) = s.label {
                if c >= self.num_classes() {
                    return Err(Error::Config(format!("sample {} has class {c} out of range", s.sample_id)));
                }
            }
            if s.images.len() != self.modalities.len() {
                return Err(Error::Config(format!(
                    "sample {} has {} modalities, dataset has {}",
                    s.sample_id,
                    s.images.len(),
                    self.modalities.len()
                )));
            }
            for (img, m) in s.images.iter().zip(&self.modalities) {
                if img.shape() != m.image_shape() {
                    return Err(Error::Dimension(format!(
                        "sample {} modality {} has shape {:?}, expected {:?}",
                        s.sample_id,
                        m.name,
                        img.shape(),
                        m.image_shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn modality_id(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("unknown modality {name}")))
    }

    pub fn modality_names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.modalities.get(i).map_or_else(|| format!("#{i}"), |m| m.name.clone())).collect()
    }

    /// Deterministic 80/20 split of labeled samples by hashed sample id.
    pub fn split(&self) -> Split {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (pos, s) in self.samples.iter().enumerate() {
            if s.label.is_negative() {
                continue;
            }
            if rng::hash_u64(s.sample_id as u64).is_multiple_of(5) {
                val.push(pos);
            } else {
                train.push(pos);
            }
        }
        Split { train, val }
    }

    /// Positions of negative-class samples.
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].label.is_negative()).collect()
    }

    /// Sample counts per class, with the negative count last.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes() + 1];
        for s in &self.samples {
            match s.label {
                Label::Class(c) => counts[c] += 1,
                Label::Negative => counts[self.num_classes()] += 1,
            }
        }
        counts
    }
}
