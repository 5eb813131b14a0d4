//! Contrastive pre-training loop.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{self, build_positive_index, collapse_metrics, ContrastiveConfig, ViewRecord};
use crate::dataset::Dataset;
use crate::encoders::{Encoder, EncoderBundle};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use crate::rng;
use crate::tensor::ParamSet;
use crate::views::{make_views, AugmentationConfig, View, SINGLE_MODALITY_WITHOUT_AUGMENTATION};

/// Number of labeled samples whose embeddings are tracked for collapse.
pub const PROBE_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// One encoder per pre-training modality.
    pub encoders: Vec<Encoder>,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn modalities(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.modality.id).collect()
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("no pre-training modalities".into()));
        }
        let ids: BTreeSet<usize> = self.encoders.iter().map(|e| e.modality.id).collect();
        if ids.len() != self.encoders.len() {
            return Err(Error::Config("a modality appears twice in the pre-training set".into()));
        }
        for e in &self.encoders {
            let m = dataset.modalities.get(e.modality.id).ok_or(Error::UnknownModality(e.modality.id))?;
            if *m != e.modality {
                return Err(Error::Config(format!("encoder modality {} does not match the dataset", e.modality.name)));
            }
        }
        let dims: BTreeSet<usize> = self.encoders.iter().map(|e| e.spec.embedding_dim()).collect();
        if dims.len() > 1 {
            return Err(Error::Config(format!(
                "contrastive embeddings must share one width across modalities, got {dims:?}; \
                 align output_dim or enable projection heads with a common `out`"
            )));
        }
        self.augmentation.validate()?;
        if !self.augmentation.enabled && self.encoders.len() < 2 {
            return Err(Error::Config(SINGLE_MODALITY_WITHOUT_AUGMENTATION.into()));
        }
        self.contrastive.validate()?;
        self.optimizer.validate()
    }
}

/// Per-epoch telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// `(modality id, effective rank)` for each pre-training modality.
    pub effective_rank: Vec<(usize, f64)>,
    pub per_dim_std_mean: f64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochLog>,
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    pub best_params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub final_bundle: EncoderBundle,
    pub best_bundle: EncoderBundle,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// The samples used for pre-training: the labeled training split plus every
/// negative-class sample.
pub fn pretrain_pool(dataset: &Dataset) -> Vec<usize> {
    let mut pool = dataset.split().train;
    pool.extend(dataset.negatives());
    pool.sort_unstable();
    pool
}

/// Shuffle labeled and negative samples separately and interleave them evenly.
pub fn epoch_order(dataset: &Dataset, pool: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "pretrain/shuffle", &[epoch as u64]);
    let (mut neg, mut pos): (Vec<usize>, Vec<usize>) =
        pool.iter().partition(|&&i| dataset.samples[i].label.is_negative());
    pos.shuffle(&mut r);
    neg.shuffle(&mut r);
    let mut keyed: Vec<(f64, usize)> = pos
        .iter()
        .enumerate()
        .map(|(j, &s)| ((j as f64 + 0.5) / pos.len() as f64, s))
        .chain(neg.iter().enumerate().map(|(j, &s)| ((j as f64 + 0.5) / neg.len() as f64, s)))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, s)| s).collect()
}

/// Batches of `batch_size`; a trailing batch with a single sample joins the previous one.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Graph holding the contrastive loss of one batch of views.
pub struct BatchObjective {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: Var,
    pub records: Vec<ViewRecord>,
}

/// Encode every view, normalize, and build the batch loss. Views are grouped
/// by ascending modality id; `None` when no view contributes a loss term.
pub fn batch_objective(
    bundle: &EncoderBundle,
    views: &[View],
    cfg: &ContrastiveConfig,
    trainable: bool,
) -> Result<Option<BatchObjective>> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, &bundle.params, trainable);
    let mut parts = Vec::new();
    let mut records = Vec::new();
    for m in bundle.modalities() {
        let of_m: Vec<&View> = views.iter().filter(|v| v.modality_id == m).collect();
        if of_m.is_empty() {
            continue;
        }
        let enc = bundle.encoder(m)?;
        let imgs: Vec<_> = of_m.iter().map(|v| &v.image).collect();
        let x = graph.constant(&enc.stack(&imgs)?);
        let out = enc.forward(&mut graph, &bound, x)?;
        let emb = out.embedding();
        parts.push(graph.l2_normalize(emb)?);
        for v in of_m {
            records.push(ViewRecord {
                view_id: records.len(),
                sample_id: v.sample_id,
                modality_id: v.modality_id,
                augmented: v.augmented,
                is_negative_class: v.is_negative_class,
            });
        }
    }
    if records.len() != views.len() {
        return Err(Error::Contract("some views belong to modalities without an encoder".into()));
    }
    let index = build_positive_index(&records)?;
    if index.num_contributing() == 0 {
        return Ok(None);
    }
    let emb = graph.concat_rows(&parts)?;
    let loss = contrastive::batch_loss(&mut graph, emb, &index, cfg)?;
    Ok(Some(BatchObjective { graph, bound, loss, records }))
}

/// One optimizer step on a batch of views; returns the pre-step loss.
pub fn train_step(
    bundle: &mut EncoderBundle,
    views: &[View],
    contrastive_cfg: &ContrastiveConfig,
    opt: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<Option<f64>> {
    let Some(mut obj) = batch_objective(bundle, views, contrastive_cfg, true)? else {
        return Ok(None);
    };
    let loss = obj.graph.value(obj.loss)[0];
    obj.graph.backward(obj.loss)?;
    bundle.params.zero_grad();
    obj.bound.accumulate_into(&obj.graph, &mut bundle.params);
    optimizer_step(&mut bundle.params, opt, state)?;
    bundle.params.zero_grad();
    Ok(Some(loss))
}

fn composition(dataset: &Dataset, batch: &[usize], modalities: &[usize]) -> String {
    let ids: Vec<String> = batch
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            if s.label.is_negative() {
                format!("{}(neg)", s.sample_id)
            } else {
                format!("{}", s.sample_id)
            }
        })
        .collect();
    format!("modalities {:?}; samples [{}]", dataset.modality_names(modalities), ids.join(", "))
}

pub struct Pretrainer<'a> {
    dataset: &'a Dataset,
    pool: Vec<usize>,
    probe: Vec<usize>,
    cfg: PretrainConfig,
    bundle: EncoderBundle,
    state: TrainState,
}

impl<'a> Pretrainer<'a> {
    pub fn new(dataset: &'a Dataset, pool: Vec<usize>, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate(dataset)?;
        let bundle = EncoderBundle::init(cfg.encoders.clone(), rng::derive_seed(cfg.seed, "pretrain/init", &[]))?;
        let state = TrainState {
            epoch: 0,
            seed: cfg.seed,
            params: bundle.params.clone(),
            optimizer: OptimizerState::default(),
            history: Vec::new(),
            best_loss: None,
            best_epoch: 0,
            best_params: bundle.params.clone(),
        };
        Self::assemble(dataset, pool, cfg, bundle, state)
    }

    /// Continue from a saved state.
    pub fn resume(dataset: &'a Dataset, pool: Vec<usize>, cfg: PretrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate(dataset)?;
        if state.seed != cfg.seed {
            return Err(Error::Config("train state was produced with a different seed".into()));
        }
        let bundle = EncoderBundle::from_parts(cfg.encoders.clone(), state.params.clone())?;
        Self::assemble(dataset, pool, cfg, bundle, state)
    }

    fn assemble(dataset: &'a Dataset, pool: Vec<usize>, cfg: PretrainConfig, bundle: EncoderBundle, state: TrainState) -> Result<Self> {
        if pool.iter().any(|&i| i >= dataset.samples.len()) {
            return Err(Error::Contract("pre-training pool refers to missing samples".into()));
        }
        if pool.len() < 2 {
            return Err(Error::Contract("pre-training needs at least 2 samples".into()));
        }
        let mut probe: Vec<usize> =
            pool.iter().copied().filter(|&i| !dataset.samples[i].label.is_negative()).take(PROBE_SAMPLES).collect();
        if probe.len() < 2 {
            probe = pool.iter().copied().take(PROBE_SAMPLES).collect();
        }
        Ok(Pretrainer { dataset, pool, probe, cfg, bundle, state })
    }

    pub fn bundle(&self) -> &EncoderBundle {
        &self.bundle
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn epochs_done(&self) -> usize {
        self.state.epoch
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.optimizer.epochs
    }

    fn run_epoch_inner(&mut self, epoch: usize) -> Result<f64> {
        let modalities = self.cfg.modalities();
        let order = epoch_order(self.dataset, &self.pool, self.cfg.seed, epoch);
        let mut losses = Vec::new();
        for (b, batch) in batches(&order, self.cfg.optimizer.batch_size).iter().enumerate() {
            let mut views = Vec::new();
            for &i in batch {
                let s = &self.dataset.samples[i];
                let mut r = rng::stream(self.cfg.seed, "pretrain/views", &[epoch as u64, s.sample_id as u64]);
                views.extend(make_views(s, &modalities, &self.cfg.augmentation, &mut r)?);
            }
            let step = train_step(
                &mut self.bundle,
                &views,
                &self.cfg.contrastive,
                &self.cfg.optimizer,
                &mut self.state.optimizer,
            );
            match step {
                Ok(Some(loss)) if loss.is_finite() => losses.push(loss),
                Ok(Some(_)) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        composition: composition(self.dataset, batch, &modalities),
                    });
                }
                Ok(None) => {}
                Err(e) => return Err(e),
            }
        }
        if losses.is_empty() {
            return Err(Error::Contract("no batch produced a loss term this epoch".into()));
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Collapse diagnostics on raw views of the probe samples.
    pub fn probe_metrics(&self) -> Result<(Vec<(usize, f64)>, f64)> {
        let mut ranks = Vec::new();
        let mut std_total = 0.0;
        for m in self.bundle.modalities() {
            let imgs: Vec<_> = self.probe.iter().map(|&i| &self.dataset.samples[i].images[m]).collect();
            let emb = self.bundle.embed_batch(m, &imgs)?;
            let cm = collapse_metrics(&emb)?;
            ranks.push((m, cm.effective_rank));
            std_total += cm.per_dim_std_mean();
        }
        let n = ranks.len() as f64;
        Ok((ranks, std_total / n))
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.state.epoch + 1;
        let mean_loss = self.run_epoch_inner(epoch)?;
        let (effective_rank, per_dim_std_mean) = self.probe_metrics()?;
        let log = EpochLog { epoch, mean_loss, effective_rank, per_dim_std_mean };
        self.state.epoch = epoch;
        self.state.params = self.bundle.params.clone();
        if self.state.best_loss.is_none_or(|b| mean_loss < b) {
            self.state.best_loss = Some(mean_loss);
            self.state.best_epoch = epoch;
            self.state.best_params = self.bundle.params.clone();
        }
        self.state.history.push(log.clone());
        Ok(log)
    }

    /// Train until the configured epoch count, calling `on_epoch` after each epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochLog, &TrainState)) -> Result<PretrainOutcome> {
        while !self.finished() {
            let log = self.run_epoch()?;
            on_epoch(&log, &self.state);
        }
        self.into_outcome()
    }

    pub fn into_outcome(self) -> Result<PretrainOutcome> {
        let best_bundle = EncoderBundle::from_parts(self.cfg.encoders.clone(), self.state.best_params.clone())?;
        Ok(PretrainOutcome {
            final_bundle: self.bundle,
            best_bundle,
            best_epoch: self.state.best_epoch,
            history: self.state.history,
        })
    }
}

/// Pre-train encoders for the configured modalities on `pool`.
pub fn pretrain(dataset: &Dataset, pool: Vec<usize>, cfg: PretrainConfig) -> Result<PretrainOutcome> {
    Pretrainer::new(dataset, pool, cfg)?.run(|_, _| {})
}
