//! Multi-view InfoNCE.
//!
//! For a view `x` with positives `P(x)` (all other views of the same sample,
//! in any modality) and denominator set `Ω(x)` (every other view in the
//! batch), the default per-view loss is
//!
//! ```text
//! L(x) = agg_{p ∈ P(x)}  −log( exp(s(x,p)/τ) / Σ_{y ∈ Ω(x)} exp(s(x,y)/τ) )
//! ```
//!
//! with `s` the cosine similarity of unit embeddings and `agg` the mean (or
//! sum) over positives. The batch loss is the mean of `L(x)` over contributing
//! views: views of negative-class samples only ever appear inside `Ω`.
//!
//! `literal_eq1` switches to the log-free form `−Σ_p softmax_p`, and
//! `use_log = false` drops the log but keeps the configured aggregation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, MIN_NORM};
use crate::linalg;

/// Metadata of one view in a batch. Its embedding is the matching row of the
/// embedding matrix handed to the loss functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: usize,
    pub sample_id: usize,
    pub modality_id: usize,
    pub augmented: bool,
    pub is_negative_class: bool,
}

/// Positive and denominator sets of one view, as row positions in the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSets {
    pub positives: Vec<usize>,
    pub omega: Vec<usize>,
    pub contributes_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveIndex {
    views: Vec<ViewSets>,
    ids: Vec<usize>,
}

impl PositiveIndex {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Sets of the view at row `pos`.
    pub fn sets(&self, pos: usize) -> &ViewSets {
        &self.views[pos]
    }

    /// Row position of a view id.
    pub fn position(&self, view_id: usize) -> Option<usize> {
        self.ids.iter().position(|&v| v == view_id)
    }

    pub fn view_id(&self, pos: usize) -> usize {
        self.ids[pos]
    }

    pub fn contributing(&self) -> impl Iterator<Item = usize> + '_ {
        self.views.iter().enumerate().filter(|(_, v)| v.contributes_loss).map(|(i, _)| i)
    }

    pub fn num_contributing(&self) -> usize {
        self.contributing().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveAggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub use_log: bool,
    #[serde(default = "default_aggregation")]
    pub positive_aggregation: PositiveAggregation,
    #[serde(default)]
    pub literal_eq1: bool,
}

fn default_true() -> bool {
    true
}

fn default_aggregation() -> PositiveAggregation {
    PositiveAggregation::Mean
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            use_log: true,
            positive_aggregation: PositiveAggregation::Mean,
            literal_eq1: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn uses_log(&self) -> bool {
        self.use_log && !self.literal_eq1
    }

    fn aggregation(&self) -> PositiveAggregation {
        if self.literal_eq1 {
            PositiveAggregation::Sum
        } else {
            self.positive_aggregation
        }
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
    let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if !(nu > MIN_NORM && nv > MIN_NORM) {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Positives are all other views of the same sample; `Ω` is every other view.
pub fn build_positive_index(batch: &[ViewRecord]) -> Result<PositiveIndex> {
    let samples: BTreeSet<usize> = batch.iter().map(|v| v.sample_id).collect();
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "a contrastive batch needs views from at least 2 samples, got {}",
            samples.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for v in batch {
        if !seen.insert(v.view_id) {
            return Err(Error::Contract(format!("duplicate view id {}", v.view_id)));
        }
    }
    let mut by_sample: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, v) in batch.iter().enumerate() {
        by_sample.entry(v.sample_id).or_default().push(pos);
    }
    let views = batch
        .iter()
        .enumerate()
        .map(|(pos, v)| {
            let positives: Vec<usize> =
                by_sample[&v.sample_id].iter().copied().filter(|&p| p != pos).collect();
            let omega: Vec<usize> = (0..batch.len()).filter(|&p| p != pos).collect();
            let contributes_loss = !v.is_negative_class && !positives.is_empty();
            ViewSets { positives, omega, contributes_loss }
        })
        .collect();
    Ok(PositiveIndex { views, ids: batch.iter().map(|v| v.view_id).collect() })
}

fn check_embeddings(emb: &[f64], dim: usize, n: usize) -> Result<()> {
    if dim == 0 || emb.len() != n * dim {
        return Err(Error::Dimension(format!(
            "{n} views need {n}×{dim} embedding values, got {}",
            emb.len()
        )));
    }
    for (r, row) in emb.chunks(dim).enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("embedding {r} has norm {norm}, expected unit norm")));
        }
    }
    Ok(())
}

fn similarities(emb: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        let a = &emb[i * dim..(i + 1) * dim];
        for j in i..n {
            let b = &emb[j * dim..(j + 1) * dim];
            let v: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

/// Loss of the view at row `i`; adds `weight · dL/ds(i, j)` into `grad_row`.
fn view_loss(
    i: usize,
    sets: &ViewSets,
    sims: &[f64],
    n: usize,
    cfg: &ContrastiveConfig,
    weight: f64,
    grad_row: Option<&mut [f64]>,
) -> f64 {
    let tau = cfg.temperature;
    let logits: Vec<f64> = sets.omega.iter().map(|&j| sims[i * n + j] / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    let lse = m + libm::log(z);
    let w_pos = match cfg.aggregation() {
        PositiveAggregation::Mean => 1.0 / sets.positives.len() as f64,
        PositiveAggregation::Sum => 1.0,
    };
    // Positions of positives inside omega (both are sorted).
    let pos_in_omega: Vec<usize> = sets
        .positives
        .iter()
        .map(|p| sets.omega.binary_search(p).expect("positives are a subset of omega"))
        .collect();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut dlogits = vec![0.0; logits.len()];
    let loss = if cfg.uses_log() {
        let mut loss = 0.0;
        for &k in &pos_in_omega {
            loss += w_pos * (lse - logits[k]);
            dlogits[k] -= w_pos;
        }
        let total = w_pos * pos_in_omega.len() as f64;
        for (d, p) in dlogits.iter_mut().zip(&probs) {
            *d += total * p;
        }
        loss
    } else {
        let mut loss = 0.0;
        let mut mass = 0.0;
        for &k in &pos_in_omega {
            loss -= w_pos * probs[k];
            mass += w_pos * probs[k];
            dlogits[k] -= w_pos * probs[k];
        }
        for (d, p) in dlogits.iter_mut().zip(&probs) {
            *d += p * mass;
        }
        loss
    };
    if let Some(row) = grad_row {
        for (&j, d) in sets.omega.iter().zip(&dlogits) {
            row[j] += weight * d / tau;
        }
    }
    loss
}

/// Fold `dL/dS` (n×n) into `dL/dE` for `S = E·Eᵀ`.
fn embedding_grad(gs: &[f64], emb: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut ge = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..n {
            let c = gs[i * n + j] + gs[j * n + i];
            if c == 0.0 {
                continue;
            }
            let (dst, src) = (i * dim, j * dim);
            for k in 0..dim {
                ge[dst + k] += c * emb[src + k];
            }
        }
    }
    ge
}

fn single_checked(pos: usize, index: &PositiveIndex, cfg: &ContrastiveConfig) -> Result<()> {
    cfg.validate()?;
    if pos >= index.len() {
        return Err(Error::Contract(format!("view row {pos} is outside the batch")));
    }
    if !index.sets(pos).contributes_loss {
        return Err(Error::Contract(format!(
            "view {} does not contribute a loss term (negative class or no positives)",
            index.view_id(pos)
        )));
    }
    Ok(())
}

/// Loss of one view (by view id) without recording a graph.
pub fn info_nce_single_value(
    view_id: usize,
    index: &PositiveIndex,
    emb: &[f64],
    dim: usize,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let pos = index
        .position(view_id)
        .ok_or_else(|| Error::Contract(format!("unknown view id {view_id}")))?;
    single_checked(pos, index, cfg)?;
    let n = index.len();
    check_embeddings(emb, dim, n)?;
    let sims = similarities(emb, n, dim);
    Ok(view_loss(pos, index.sets(pos), &sims, n, cfg, 1.0, None))
}

/// Loss and gradient with respect to the embedding matrix, averaged over
/// contributing views.
pub fn batch_loss_and_grad(
    index: &PositiveIndex,
    emb: &[f64],
    dim: usize,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let n = index.len();
    check_embeddings(emb, dim, n)?;
    let count = index.num_contributing();
    if count == 0 {
        return Err(Error::Contract("batch has no contributing views".into()));
    }
    let sims = similarities(emb, n, dim);
    let w = 1.0 / count as f64;
    let mut gs = vec![0.0; n * n];
    let mut total = 0.0;
    for i in index.contributing() {
        total += view_loss(i, index.sets(i), &sims, n, cfg, w, Some(&mut gs[i * n..(i + 1) * n]));
    }
    Ok((total * w, embedding_grad(&gs, emb, n, dim)))
}

pub fn batch_loss_value(index: &PositiveIndex, emb: &[f64], dim: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(batch_loss_and_grad(index, emb, dim, cfg)?.0)
}

fn graph_embeddings(g: &Graph, emb: Var, index: &PositiveIndex) -> Result<(Vec<f64>, usize)> {
    let shape = g.shape(emb);
    if shape.len() != 2 || shape[0] != index.len() {
        return Err(Error::Dimension(format!(
            "embedding matrix {shape:?} does not match {} views",
            index.len()
        )));
    }
    Ok((g.value(emb).to_vec(), shape[1]))
}

/// Per-view loss recorded on the graph; `emb` holds one unit row per view.
pub fn info_nce_single(
    g: &mut Graph,
    emb: Var,
    view_id: usize,
    index: &PositiveIndex,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let (e, dim) = graph_embeddings(g, emb, index)?;
    let pos = index
        .position(view_id)
        .ok_or_else(|| Error::Contract(format!("unknown view id {view_id}")))?;
    single_checked(pos, index, cfg)?;
    let n = index.len();
    check_embeddings(&e, dim, n)?;
    let sims = similarities(&e, n, dim);
    let mut gs = vec![0.0; n * n];
    let loss = view_loss(pos, index.sets(pos), &sims, n, cfg, 1.0, Some(&mut gs[pos * n..(pos + 1) * n]));
    let jac = embedding_grad(&gs, &e, n, dim);
    g.fused_scalar(emb, loss, jac)
}

/// Batch loss recorded on the graph.
pub fn batch_loss(g: &mut Graph, emb: Var, index: &PositiveIndex, cfg: &ContrastiveConfig) -> Result<Var> {
    let (e, dim) = graph_embeddings(g, emb, index)?;
    let (loss, jac) = batch_loss_and_grad(index, &e, dim, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "info_nce" });
    }
    g.fused_scalar(emb, loss, jac)
}

/// Collapse diagnostics of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub mean_pairwise_similarity: f64,
    pub per_dim_std: Vec<f64>,
    pub effective_rank: f64,
}

impl CollapseMetrics {
    pub fn per_dim_std_mean(&self) -> f64 {
        self.per_dim_std.iter().sum::<f64>() / self.per_dim_std.len() as f64
    }
}

pub fn collapse_metrics(embeddings: &[Vec<f64>]) -> Result<CollapseMetrics> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Contract(format!("collapse metrics need at least 2 embeddings, got {n}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Dimension("embeddings must share a nonzero length".into()));
    }
    let mut sim_total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sim_total += cosine_similarity(&embeddings[i], &embeddings[j])?;
        }
    }
    let mean_pairwise_similarity = sim_total / (n * (n - 1) / 2) as f64;
    let per_dim_std = (0..d)
        .map(|k| {
            let mean = embeddings.iter().map(|e| e[k]).sum::<f64>() / n as f64;
            let var = embeddings.iter().map(|e| (e[k] - mean) * (e[k] - mean)).sum::<f64>() / n as f64;
            libm::sqrt(var)
        })
        .collect();
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let sv = linalg::singular_values(&flat, n, d);
    let total: f64 = sv.iter().sum();
    let entropy: f64 = sv
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * libm::log(p))
        .sum();
    Ok(CollapseMetrics { mean_pairwise_similarity, per_dim_std, effective_rank: libm::exp(entropy) })
}
