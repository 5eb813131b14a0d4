//! Pre-training set × finetuning set experiment grids.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::dataset::Dataset;
use crate::downstream::{finetune, EvalReport, FinetuneConfig, Initialization};
use crate::encoders::{Encoder, EncoderBundle};
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::rng;
use crate::trainer::{pretrain, pretrain_pool, PretrainConfig};
use crate::views::AugmentationConfig;

/// Text used for cells that cannot be run.
pub const DASH: &str = "—";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    /// Pre-training modality ids; `None` is the randomly initialized baseline.
    pub pretrain: Option<Vec<usize>>,
    /// Pre-train without augmentations, one raw view per modality.
    #[serde(default)]
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: Vec<GridRow>,
    /// Finetuning modality sets.
    pub columns: Vec<Vec<usize>>,
}

fn subsets(k: usize) -> Vec<Vec<usize>> {
    // Singletons first, then pairs, ..., each group in lexicographic order.
    let mut all: Vec<Vec<usize>> =
        (1u32..(1 << k)).map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect()).collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

fn mask(set: &[usize]) -> u64 {
    set.iter().fold(0, |m, &i| m | (1 << i))
}

impl GridSpec {
    /// Every non-empty subset as a column; rows: baseline, every subset, then
    /// every multi-modality subset without augmentations.
    pub fn full_layout(num_modalities: usize) -> Self {
        let sets = subsets(num_modalities);
        let mut rows = vec![GridRow { pretrain: None, star: false }];
        rows.extend(sets.iter().map(|s| GridRow { pretrain: Some(s.clone()), star: false }));
        rows.extend(sets.iter().filter(|s| s.len() >= 2).map(|s| GridRow { pretrain: Some(s.clone()), star: true }));
        GridSpec { rows, columns: sets }
    }

    /// The three-modality layout: 12 rows by 7 columns.
    pub fn paper_layout() -> Self {
        Self::full_layout(3)
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if self.rows.is_empty() || self.columns.is_empty() {
            return Err(Error::Config("grid needs at least one row and one column".into()));
        }
        let check = |set: &[usize], what: &str| -> Result<()> {
            if set.is_empty() {
                return Err(Error::Config(format!("grid {what} has an empty modality set")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("grid {what} {set:?} must be strictly ascending")));
            }
            if let Some(&m) = set.iter().find(|&&m| m >= num_modalities) {
                return Err(Error::UnknownModality(m));
            }
            Ok(())
        };
        for r in &self.rows {
            match &r.pretrain {
                Some(p) => check(p, "row")?,
                None if r.star => return Err(Error::Config("the baseline row cannot be a no-augmentation row".into())),
                None => {}
            }
        }
        for c in &self.columns {
            check(c, "column")?;
        }
        Ok(())
    }

    /// A cell runs when its finetune set is covered by the pre-trained set and
    /// no-augmentation rows pre-train on at least two modalities.
    pub fn is_legal(&self, row: usize, column: usize) -> bool {
        let r = &self.rows[row];
        let c = &self.columns[column];
        match &r.pretrain {
            None => true,
            Some(p) => (!r.star || p.len() >= 2) && c.iter().all(|m| p.contains(m)),
        }
    }

    pub fn legal_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows.len() {
            for c in 0..self.columns.len() {
                if self.is_legal(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

pub fn set_label(dataset: &Dataset, set: &[usize]) -> String {
    dataset.modality_names(set).join(" + ")
}

pub fn row_label(dataset: &Dataset, row: &GridRow) -> String {
    match &row.pretrain {
        None => "None".into(),
        Some(p) if row.star => format!("{} ★", set_label(dataset, p)),
        Some(p) => set_label(dataset, p),
    }
}

/// Everything a grid needs besides the layout and data.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// Architectures for every dataset modality.
    pub encoders: Vec<Encoder>,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationConfig,
    pub pretrain: OptimizerConfig,
    pub finetune: FinetuneConfig,
}

/// Identifies one cell run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub row: usize,
    pub column: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub report: EvalReport,
}

/// Storage for finished cells, so an interrupted grid can resume.
pub trait CellStore {
    fn load(&mut self, key: &CellKey) -> Option<EvalReport>;
    fn save(&mut self, key: &CellKey, report: &EvalReport) -> Result<()>;
}

/// A store that keeps nothing.
pub struct NoStore;

impl CellStore for NoStore {
    fn load(&mut self, _: &CellKey) -> Option<EvalReport> {
        None
    }
    fn save(&mut self, _: &CellKey, _: &EvalReport) -> Result<()> {
        Ok(())
    }
}

impl CellStore for BTreeMap<CellKey, EvalReport> {
    fn load(&mut self, key: &CellKey) -> Option<EvalReport> {
        self.get(key).cloned()
    }
    fn save(&mut self, key: &CellKey, report: &EvalReport) -> Result<()> {
        self.insert(key.clone(), report.clone());
        Ok(())
    }
}

/// Seed for the pre-training of a row.
pub fn pretrain_seed(seed: u64, row: &GridRow) -> u64 {
    let m = row.pretrain.as_deref().map_or(0, mask);
    rng::derive_seed(seed, "grid/pretrain", &[m, row.star as u64])
}

/// Seed for finetuning a column; shared by all rows so they see the same batches.
pub fn finetune_seed(seed: u64, column: &[usize]) -> u64 {
    rng::derive_seed(seed, "grid/finetune", &[mask(column)])
}

pub fn pretrain_config(cfg: &GridConfig, modalities: &[usize], star: bool, seed: u64) -> Result<PretrainConfig> {
    let encoders = modalities
        .iter()
        .map(|&m| {
            cfg.encoders
                .iter()
                .find(|e| e.modality.id == m)
                .cloned()
                .ok_or(Error::UnknownModality(m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainConfig {
        encoders,
        contrastive: cfg.contrastive,
        augmentation: if star { AugmentationConfig::disabled() } else { cfg.augmentation },
        optimizer: cfg.pretrain,
        seed,
    })
}

/// Run every legal cell of one row for one seed.
pub fn run_row(
    spec: &GridSpec,
    row: usize,
    dataset: &Dataset,
    cfg: &GridConfig,
    seed: u64,
    store: &mut dyn CellStore,
) -> Result<Vec<CellResult>> {
    let r = &spec.rows[row];
    let columns: Vec<usize> = (0..spec.columns.len()).filter(|&c| spec.is_legal(row, c)).collect();
    let mut out = Vec::new();
    let mut pending = Vec::new();
    for &c in &columns {
        let key = CellKey { row, column: c, seed };
        match store.load(&key) {
            Some(report) => out.push(CellResult { key, report }),
            None => pending.push(c),
        }
    }
    if pending.is_empty() {
        return Ok(out);
    }
    let split = dataset.split();
    let bundle: Option<EncoderBundle> = match &r.pretrain {
        None => None,
        Some(p) => {
            let pc = pretrain_config(cfg, p, r.star, pretrain_seed(seed, r))?;
            Some(pretrain(dataset, pretrain_pool(dataset), pc)?.final_bundle)
        }
    };
    for c in pending {
        let init = match &bundle {
            None => Initialization::Random(&cfg.encoders),
            Some(b) => Initialization::Pretrained { bundle: b, star: r.star },
        };
        let col = &spec.columns[c];
        let (_, mut report) =
            finetune(init, col, dataset, &split.train, &split.val, &cfg.finetune, finetune_seed(seed, col))?;
        report.fingerprint.seed = seed;
        let key = CellKey { row, column: c, seed };
        store.save(&key, &report)?;
        out.push(CellResult { key, report });
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub spec: GridSpec,
    pub seeds: Vec<u64>,
    /// Sorted by row, column, seed position.
    pub cells: Vec<CellResult>,
}

/// Mean and sample standard deviation of one cell over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn mean_std(values: &[f64]) -> CellSummary {
    let n = values.len();
    if n == 0 {
        return CellSummary { mean: f64::NAN, std: f64::NAN, runs: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    CellSummary { mean, std, runs: n }
}

impl GridResults {
    /// Assemble from cells in any order.
    pub fn new(spec: GridSpec, seeds: Vec<u64>, mut cells: Vec<CellResult>) -> Self {
        let pos = |s: u64| seeds.iter().position(|&x| x == s).unwrap_or(usize::MAX);
        cells.sort_by_key(|c| (c.key.row, c.key.column, pos(c.key.seed)));
        GridResults { spec, seeds, cells }
    }

    pub fn accuracies(&self, row: usize, column: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.key.row == row && c.key.column == column)
            .map(|c| c.report.accuracy)
            .collect()
    }

    pub fn summary(&self, row: usize, column: usize) -> Option<CellSummary> {
        let acc = self.accuracies(row, column);
        (!acc.is_empty()).then(|| mean_std(&acc))
    }

    /// Row/column position of a layout entry, if present.
    pub fn find(&self, pretrain: Option<&[usize]>, star: bool, column: &[usize]) -> Option<(usize, usize)> {
        let r = self.spec.rows.iter().position(|r| r.pretrain.as_deref() == pretrain && r.star == star)?;
        let c = self.spec.columns.iter().position(|c| c.as_slice() == column)?;
        Some((r, c))
    }

    /// Plain-text table: one row per pre-training set, `mean ± std` in percent.
    pub fn render_table(&self, dataset: &Dataset) -> String {
        let mut header = vec![String::from("Pre-training")];
        header.extend(self.spec.columns.iter().map(|c| set_label(dataset, c)));
        let mut lines = vec![header];
        for (r, row) in self.spec.rows.iter().enumerate() {
            let mut line = vec![row_label(dataset, row)];
            for c in 0..self.spec.columns.len() {
                line.push(match self.summary(r, c) {
                    Some(s) if self.spec.is_legal(r, c) => {
                        format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
                    }
                    _ => DASH.into(),
                });
            }
            lines.push(line);
        }
        let cols = lines[0].len();
        let widths: Vec<usize> =
            (0..cols).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (n, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| {
                    let pad = w - s.chars().count();
                    format!("{s}{}", " ".repeat(pad))
                })
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
            if n == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
                out.push('\n');
            }
        }
        out
    }
}

/// Run the whole grid sequentially, row by row and seed by seed.
pub fn run_grid(
    spec: &GridSpec,
    dataset: &Dataset,
    cfg: &GridConfig,
    seeds: &[u64],
    store: &mut dyn CellStore,
) -> Result<GridResults> {
    spec.validate(dataset.modalities.len())?;
    if seeds.is_empty() {
        return Err(Error::Config("grid needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for row in 0..spec.rows.len() {
        for &seed in seeds {
            cells.extend(run_row(spec, row, dataset, cfg, seed, store)?);
        }
    }
    Ok(GridResults::new(spec.clone(), seeds.to_vec(), cells))
}
