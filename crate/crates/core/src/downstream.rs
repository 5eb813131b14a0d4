//! Downstream classification on concatenated per-modality representations.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoders::{Encoder, EncoderBundle};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

/// Prefix of the classifier head parameters.
pub const HEAD_PREFIX: &str = "head/";
const EVAL_BATCH: usize = 128;

/// Concatenate per-modality vectors in ascending modality order.
pub fn fuse(inputs: &[(usize, &[f64])]) -> Result<Vec<f64>> {
    let mut sorted: Vec<&(usize, &[f64])> = inputs.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Contract("duplicate modality in fusion input".into()));
    }
    Ok(sorted.iter().flat_map(|(_, v)| v.iter().copied()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Backbones and head train jointly.
    #[default]
    Full,
    /// Backbones frozen, only the head trains.
    LinearProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub mode: FinetuneMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: OptimizerConfig { epochs: 100, learning_rate: 3e-4, ..OptimizerConfig::default() },
            mode: FinetuneMode::Full,
        }
    }
}

/// Where the backbones come from.
#[derive(Debug, Clone, Copy)]
pub enum Initialization<'a> {
    /// Fresh weights for these architectures (must cover the finetune modalities).
    Random(&'a [Encoder]),
    Pretrained { bundle: &'a EncoderBundle, star: bool },
}

/// Identifies the run behind a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFingerprint {
    /// `None` for random initialization.
    pub pretrain_modalities: Option<Vec<String>>,
    pub finetune_modalities: Vec<String>,
    pub star: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes without support in the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub fingerprint: RunFingerprint,
}

impl EvalReport {
    /// Build a report from true and predicted labels.
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        num_classes: usize,
        fingerprint: RunFingerprint,
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Contract("cannot evaluate on an empty split".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Contract("prediction count differs from label count".into()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Contract(format!("label {t} or prediction {p} out of range")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        Ok(EvalReport { accuracy: correct as f64 / truth.len() as f64, per_class_accuracy, confusion, fingerprint })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Backbones for a modality subset plus a linear head over their fused output.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamModel {
    encoders: Vec<Encoder>,
    /// Backbone parameters and `head/w`, `head/b`.
    pub params: ParamSet,
    pub num_classes: usize,
}

impl DownstreamModel {
    pub fn new(backbones: EncoderBundle, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("downstream task needs at least 2 classes".into()));
        }
        let encoders: Vec<Encoder> = backbones.encoders().cloned().collect();
        if encoders.iter().any(|e| e.spec.projection.enabled) {
            return Err(Error::Contract("downstream backbones must not carry projection heads".into()));
        }
        let fused: usize = encoders.iter().map(|e| e.spec.output_dim).sum();
        let mut params = backbones.params;
        let a = libm::sqrt(6.0 / (fused + num_classes) as f64);
        let mut r = rng::stream(seed, "finetune/head", &[]);
        let w = (0..fused * num_classes).map(|_| r.random_range(-a..a)).collect();
        params.insert(format!("{HEAD_PREFIX}w"), Tensor::new(vec![fused, num_classes], w)?)?;
        params.insert(format!("{HEAD_PREFIX}b"), Tensor::zeros(vec![num_classes]))?;
        Ok(DownstreamModel { encoders, params, num_classes })
    }

    pub fn modalities(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.modality.id).collect()
    }

    pub fn fused_dim(&self) -> usize {
        self.encoders.iter().map(|e| e.spec.output_dim).sum()
    }

    /// Logits `n × num_classes` for the samples at `positions`.
    fn logits(&self, g: &mut Graph, dataset: &Dataset, positions: &[usize], train_backbones: bool, train_head: bool) -> Result<(Var, Vec<(Bound, bool)>)> {
        let mut heads = ParamSet::new();
        let mut backbone = ParamSet::new();
        for (name, t) in self.params.iter() {
            let target = if name.starts_with(HEAD_PREFIX) { &mut heads } else { &mut backbone };
            target.insert(name.clone(), t.clone())?;
        }
        let bb = Bound::new(g, &backbone, train_backbones);
        let hb = Bound::new(g, &heads, train_head);
        let mut parts = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let imgs: Vec<&Tensor> = positions.iter().map(|&i| &dataset.samples[i].images[enc.modality.id]).collect();
            let x = g.constant(&enc.stack(&imgs)?);
            parts.push(enc.forward(g, &bb, x)?.representation);
        }
        let fused = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        let logits = g.dense(fused, hb.get(&format!("{HEAD_PREFIX}w"))?, hb.get(&format!("{HEAD_PREFIX}b"))?)?;
        Ok((logits, vec![(bb, train_backbones), (hb, train_head)]))
    }

    /// Predicted class per sample position.
    pub fn predict(&self, dataset: &Dataset, positions: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(positions.len());
        for chunk in positions.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let (logits, _) = self.logits(&mut g, dataset, chunk, false, false)?;
            out.extend(g.value(logits).chunks(self.num_classes).map(argmax));
        }
        Ok(out)
    }

    /// Accuracy report on the labeled samples at `positions`.
    pub fn evaluate(&self, dataset: &Dataset, positions: &[usize], fingerprint: RunFingerprint) -> Result<EvalReport> {
        let truth = labels(dataset, positions)?;
        let predicted = self.predict(dataset, positions)?;
        EvalReport::from_predictions(&truth, &predicted, self.num_classes, fingerprint)
    }

    /// One optimizer step on a batch; returns the pre-step loss.
    pub fn train_step(
        &mut self,
        dataset: &Dataset,
        batch: &[usize],
        cfg: &FinetuneConfig,
        state: &mut OptimizerState,
    ) -> Result<f64> {
        let targets = labels(dataset, batch)?;
        let mut g = Graph::new();
        let full = cfg.mode == FinetuneMode::Full;
        let (logits, bounds) = self.logits(&mut g, dataset, batch, full, true)?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let value = g.value(loss)[0];
        g.backward(loss)?;
        self.params.zero_grad();
        for (b, trainable) in &bounds {
            if *trainable {
                b.accumulate_into(&g, &mut self.params);
            }
        }
        // Frozen backbones keep zero gradients, which leaves them unchanged.
        optimizer_step(&mut self.params, &cfg.optimizer, state)?;
        self.params.zero_grad();
        Ok(value)
    }
}

fn labels(dataset: &Dataset, positions: &[usize]) -> Result<Vec<usize>> {
    positions
        .iter()
        .map(|&i| {
            let s = dataset.samples.get(i).ok_or_else(|| Error::Contract(format!("no sample at position {i}")))?;
            s.label
                .class()
                .ok_or_else(|| Error::Contract(format!("sample {} is negative-class and has no downstream label", s.sample_id)))
        })
        .collect()
}

fn check_modalities(modalities: &[usize]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = modalities.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::Config("no finetune modalities".into()));
    }
    if set.len() != modalities.len() {
        return Err(Error::Config("a finetune modality is listed twice".into()));
    }
    Ok(set.into_iter().collect())
}

/// Backbones for `modalities` from either a checkpoint or fresh weights.
pub fn backbones(init: Initialization<'_>, modalities: &[usize], dataset: &Dataset, seed: u64) -> Result<EncoderBundle> {
    let modalities = check_modalities(modalities)?;
    match init {
        Initialization::Pretrained { bundle, .. } => {
            let have = bundle.modalities();
            if let Some(m) = modalities.iter().find(|m| !have.contains(m)) {
                return Err(Error::Config(format!(
                    "modality {} is not in the pre-trained checkpoint ({})",
                    dataset.modality_names(&[*m])[0],
                    dataset.modality_names(&have).join(", ")
                )));
            }
            bundle.backbones_for(&modalities)
        }
        Initialization::Random(encoders) => {
            let mut chosen = Vec::new();
            for &m in &modalities {
                let enc = encoders
                    .iter()
                    .find(|e| e.modality.id == m)
                    .ok_or_else(|| Error::Config(format!("no encoder architecture for modality {m}")))?;
                let mut enc = enc.clone();
                enc.spec.projection.enabled = false;
                chosen.push(enc);
            }
            EncoderBundle::init(chosen, rng::derive_seed(seed, "finetune/init", &[]))
        }
    }
}

/// Train on the `train` positions and report accuracy on `eval`.
pub fn finetune(
    init: Initialization<'_>,
    modalities: &[usize],
    dataset: &Dataset,
    train: &[usize],
    eval: &[usize],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(DownstreamModel, EvalReport)> {
    cfg.optimizer.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Contract("finetuning needs non-empty train and evaluation splits".into()));
    }
    let bb = backbones(init, modalities, dataset, seed)?;
    let fingerprint = RunFingerprint {
        pretrain_modalities: match init {
            Initialization::Pretrained { bundle, .. } => Some(dataset.modality_names(&bundle.modalities())),
            Initialization::Random(_) => None,
        },
        finetune_modalities: dataset.modality_names(&bb.modalities()),
        star: matches!(init, Initialization::Pretrained { star: true, .. }),
        seed,
    };
    let mut model = DownstreamModel::new(bb, dataset.num_classes(), seed)?;
    let mut state = OptimizerState::default();
    let mut order = train.to_vec();
    for epoch in 1..=cfg.optimizer.epochs {
        let mut r = rng::stream(seed, "finetune/shuffle", &[epoch as u64]);
        order.shuffle(&mut r);
        for batch in crate::trainer::batches(&order, cfg.optimizer.batch_size) {
            let loss = model.train_step(dataset, &batch, cfg, &mut state)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "finetune loss" });
            }
        }
    }
    let report = model.evaluate(dataset, eval, fingerprint)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp() -> RunFingerprint {
        RunFingerprint { pretrain_modalities: None, finetune_modalities: vec![], star: false, seed: 0 }
    }

    #[test]
    fn fuse_orders_and_rejects_duplicates() {
        let a = [1.0, 2.0];
        let b = [3.0];
        assert_eq!(fuse(&[(1, &b), (0, &a)]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse(&[(0, &a)]).unwrap(), a.to_vec());
        assert!(fuse(&[(0, &a), (0, &b)]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 6]), 0);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let r = EvalReport::from_predictions(&truth, &truth, 6, fp()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[c]);
        }
        let r = EvalReport::from_predictions(&truth, &[2; 12], 6, fp()).unwrap();
        assert!((r.accuracy - 1.0 / 6.0).abs() < 1e-15);
        assert!(EvalReport::from_predictions(&[], &[], 6, fp()).is_err());
    }
}
