//! Subcommand implementations. Each takes parsed arguments and a sink for
//! its human-readable summary; files go under the chosen output directory.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cmssl_core::dataset::{Dataset, NEGATIVE_CLASS_NAME};
use cmssl_core::downstream::{finetune, EvalReport, Initialization};
use cmssl_core::encoders::ModalitySpec;
use cmssl_core::gradcheck::{parse_fault, run_suite};
use cmssl_core::grid::{
    finetune_seed, pretrain_config, pretrain_seed, run_row, CellKey, CellResult, CellStore, GridResults, GridRow,
    GridSpec,
};
use cmssl_core::trainer::{pretrain_pool, Pretrainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{
    load_checkpoint, load_train_state, read_json, save_checkpoint, save_train_state, write_atomic, write_json,
    CheckpointMeta, RngInfo,
};
use crate::config::{sha256_hex, DatasetSource, Experiment, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::logs;
use crate::rawfmt;

pub const THREADS_ENV: &str = "CMSSL_THREADS";

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn label(names: &[String]) -> String {
    names.join("+")
}

/// Worker count from `CMSSL_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn dataset_summary(ds: &Dataset) -> String {
    let mut s = String::new();
    for m in &ds.modalities {
        s.push_str(&format!("modality {}: {} x {} x {}\n", m.name, m.channels, m.height, m.width));
    }
    let counts = ds.class_counts();
    for (name, n) in ds.class_names.iter().map(String::as_str).chain([NEGATIVE_CLASS_NAME]).zip(&counts) {
        s.push_str(&format!("class {name}: {n}\n"));
    }
    s.push_str(&format!("samples: {}\n", ds.samples.len()));
    s
}

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed of the config.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Write the configured synthetic dataset as a manifest plus CMRW files.
pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref())?;
    let DatasetSource::Synthetic { seed, .. } = &mut cfg.dataset else {
        return Err(CliError::Config("generate needs a synthetic dataset section".into()));
    };
    if let Some(s) = args.seed {
        *seed = s;
    }
    let fingerprint = cfg.fingerprint();
    let ds = cfg.load_dataset()?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("dataset"));
    let manifest = rawfmt::write_dataset(&ds, &dir, Some(&fingerprint))?;
    let bytes = std::fs::read(&manifest).map_err(|e| CliError::io(&manifest, e))?;
    emit(out, &dataset_summary(&ds))?;
    emit(out, &format!("manifest: {}\nmanifest sha256: {}\n", manifest.display(), sha256_hex(&bytes)))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    /// Modality names; all dataset modalities when empty.
    pub modalities: Vec<String>,
    pub star: bool,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Continue from `train_state.json` in the output directory when present.
    pub resume: bool,
}

pub struct PretrainSummary {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
}

fn all_names(ds: &Dataset) -> Vec<String> {
    ds.modalities.iter().map(|m| m.name.clone()).collect()
}

/// Pre-train encoders; writes final and best checkpoints, the train log and resumable state.
pub fn cmd_pretrain(args: &PretrainArgs, out: &mut dyn Write) -> Result<PretrainSummary> {
    let exp = Experiment::new(ExperimentConfig::load(args.config.as_deref())?)?;
    let names = if args.modalities.is_empty() { all_names(&exp.dataset) } else { args.modalities.clone() };
    let ids = exp.modality_ids(&names)?;
    let names = exp.dataset.modality_names(&ids);
    let row = GridRow { pretrain: Some(ids.clone()), star: args.star };
    let stream_seed = pretrain_seed(args.seed, &row);
    let pc = pretrain_config(&exp.grid_config(), &ids, args.star, stream_seed)?;
    pc.validate(&exp.dataset)?;

    let dir = args.out.clone().unwrap_or_else(|| {
        let star = if args.star { "-star" } else { "" };
        exp.config.output_dir.join("pretrain").join(format!("{}{star}", label(&names))).join(format!("seed-{}", args.seed))
    });
    let state_path = dir.join("train_state.json");
    let pool = pretrain_pool(&exp.dataset);
    let mut trainer = if args.resume && state_path.exists() {
        Pretrainer::resume(&exp.dataset, pool, pc.clone(), load_train_state(&state_path)?)?
    } else {
        Pretrainer::new(&exp.dataset, pool, pc.clone())?
    };
    let timing_path = dir.join("train_log.timing.csv");
    let mut timing: Vec<(usize, f64)> = Vec::new();
    if trainer.epochs_done() > 0 && timing_path.exists() {
        let mut r = csv::Reader::from_path(&timing_path).map_err(|e| CliError::format(&timing_path, e.to_string()))?;
        for rec in r.deserialize::<(usize, f64)>() {
            let rec = rec.map_err(|e| CliError::format(&timing_path, e.to_string()))?;
            if rec.0 <= trainer.epochs_done() {
                timing.push(rec);
            }
        }
    }
    while !trainer.finished() {
        let start = Instant::now();
        let log = trainer.run_epoch()?;
        timing.push((log.epoch, start.elapsed().as_secs_f64()));
        save_train_state(&state_path, trainer.state())?;
        logs::write_timing(&timing_path, &timing)?;
    }
    let state = trainer.state().clone();
    let outcome = trainer.into_outcome()?;
    let meta = |kind: &str, epoch: usize| CheckpointMeta {
        format_version: crate::checkpoint::FORMAT_VERSION,
        config_fingerprint: exp.fingerprint.clone(),
        kind: kind.into(),
        epoch,
        modalities: names.clone(),
        star: args.star,
        encoders: pc.encoders.clone(),
        rng: RngInfo { generator: "ChaCha8".into(), seed: args.seed, stream_seed },
    };
    let checkpoint = dir.join("checkpoint.json");
    save_checkpoint(&checkpoint, &outcome.final_bundle.params, &meta("final", state.epoch))?;
    save_checkpoint(&dir.join("checkpoint_best.json"), &outcome.best_bundle.params, &meta("best", outcome.best_epoch))?;
    logs::write_train_log(&dir.join("train_log.csv"), &outcome.history, &exp.dataset, &exp.fingerprint)?;

    if let Some(last) = outcome.history.last() {
        let first = &outcome.history[0];
        let ranks: Vec<String> = last
            .effective_rank
            .iter()
            .map(|(m, r)| format!("{}={r:.3}", exp.dataset.modality_names(&[*m])[0]))
            .collect();
        emit(
            out,
            &format!(
                "pretrained {} for {} epochs: loss {:.4} -> {:.4}; effective rank {}; per-dim std {:.4}\n",
                label(&names),
                last.epoch,
                first.mean_loss,
                last.mean_loss,
                ranks.join(" "),
                last.per_dim_std_mean
            ),
        )?;
    }
    emit(out, &format!("checkpoint: {}\n", checkpoint.display()))?;
    Ok(PretrainSummary { dir, checkpoint })
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneArgs {
    pub config: Option<PathBuf>,
    /// `None` finetunes randomly initialized backbones.
    pub checkpoint: Option<PathBuf>,
    pub modalities: Vec<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    pub config_fingerprint: String,
    pub sha256: String,
    pub kind: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOutput {
    pub config_fingerprint: String,
    pub checkpoint: Option<CheckpointRef>,
    pub report: EvalReport,
}

fn check_architecture(path: &Path, saved: &[ModalitySpec], ds: &Dataset) -> Result<()> {
    for m in saved {
        if ds.modalities.get(m.id) != Some(m) {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained on modality {} {:?}, which the dataset does not provide",
                path.display(),
                m.name,
                m.image_shape()
            )));
        }
    }
    Ok(())
}

/// Finetune a classifier and write `report.json`.
pub fn cmd_finetune(args: &FinetuneArgs, out: &mut dyn Write) -> Result<FinetuneOutput> {
    let exp = Experiment::new(ExperimentConfig::load(args.config.as_deref())?)?;
    let names = if args.modalities.is_empty() { all_names(&exp.dataset) } else { args.modalities.clone() };
    let ids = exp.modality_ids(&names)?;
    let loaded = match &args.checkpoint {
        None => None,
        Some(p) => {
            let (bundle, meta) = load_checkpoint(p)?;
            check_architecture(p, &meta.encoders.iter().map(|e| e.modality.clone()).collect::<Vec<_>>(), &exp.dataset)?;
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            Some((bundle, meta, sha256_hex(&bytes)))
        }
    };
    let init = match &loaded {
        None => Initialization::Random(&exp.encoders),
        Some((bundle, meta, _)) => Initialization::Pretrained { bundle, star: meta.star },
    };
    let split = exp.dataset.split();
    let (_, mut report) = finetune(
        init,
        &ids,
        &exp.dataset,
        &split.train,
        &split.val,
        &exp.config.finetune,
        finetune_seed(args.seed, &ids),
    )?;
    report.fingerprint.seed = args.seed;
    let output = FinetuneOutput {
        config_fingerprint: exp.fingerprint.clone(),
        checkpoint: loaded.as_ref().map(|(_, meta, sha)| CheckpointRef {
            config_fingerprint: meta.config_fingerprint.clone(),
            sha256: sha.clone(),
            kind: meta.kind.clone(),
            epoch: meta.epoch,
        }),
        report,
    };
    let init_label = match &loaded {
        None => "random".to_string(),
        Some((_, meta, _)) => format!("{}{}", label(&meta.modalities), if meta.star { "-star" } else { "" }),
    };
    let dir = args.out.clone().unwrap_or_else(|| {
        exp.config
            .output_dir
            .join("finetune")
            .join(&init_label)
            .join(label(&exp.dataset.modality_names(&ids)))
            .join(format!("seed-{}", args.seed))
    });
    let path = dir.join("report.json");
    write_json(&path, &output)?;
    emit(
        out,
        &format!(
            "finetuned {} from {init_label}: accuracy {:.2}%\nreport: {}\n",
            label(&exp.dataset.modality_names(&ids)),
            100.0 * output.report.accuracy,
            path.display()
        ),
    )?;
    Ok(output)
}

/// Caches finished cells as `cells/<fingerprint>.json`. A cell's fingerprint
/// covers every config section that affects it plus its row, column and
/// seed, so changing the layout or seed list reuses finished cells.
pub struct FileStore<'a> {
    dir: PathBuf,
    spec: &'a GridSpec,
    base: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CachedCell {
    cell_fingerprint: String,
    report: EvalReport,
}

impl<'a> FileStore<'a> {
    pub fn new(dir: PathBuf, spec: &'a GridSpec, config: &ExperimentConfig) -> Self {
        let mut v = serde_json::to_value(config).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut v {
            map.remove("output_dir");
            map.remove("grid");
        }
        FileStore { dir, spec, base: v.to_string() }
    }

    pub fn cell_fingerprint(&self, key: &CellKey) -> String {
        let row = &self.spec.rows[key.row];
        let cell = json!({
            "config": self.base,
            "pretrain": row.pretrain,
            "star": row.star,
            "finetune": self.spec.columns[key.column],
            "seed": key.seed,
        });
        sha256_hex(cell.to_string().as_bytes())
    }

    fn path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }
}

impl CellStore for FileStore<'_> {
    fn load(&mut self, key: &CellKey) -> Option<EvalReport> {
        let fp = self.cell_fingerprint(key);
        let cached: CachedCell = read_json(&self.path(&fp)).ok()?;
        (cached.cell_fingerprint == fp).then_some(cached.report)
    }

    fn save(&mut self, key: &CellKey, report: &EvalReport) -> cmssl_core::Result<()> {
        let fp = self.cell_fingerprint(key);
        write_json(&self.path(&fp), &CachedCell { cell_fingerprint: fp.clone(), report: report.clone() })
            .map_err(|e| cmssl_core::Error::Contract(format!("cannot cache grid cell: {e}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridArgs {
    pub config: Option<PathBuf>,
    /// Use seeds `1..=n` instead of the configured list.
    pub seeds: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker threads; `None` reads `CMSSL_THREADS`.
    pub threads: Option<usize>,
}

/// Everything `report` needs to re-render a finished grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridReport {
    pub config_fingerprint: String,
    pub modalities: Vec<ModalitySpec>,
    pub class_names: Vec<String>,
    pub results: GridResults,
}

impl GridReport {
    /// A sample-free dataset carrying the names used for labels.
    pub fn names(&self) -> Dataset {
        Dataset { modalities: self.modalities.clone(), class_names: self.class_names.clone(), samples: Vec::new() }
    }
}

pub struct GridOutput {
    pub dir: PathBuf,
    pub report: GridReport,
}

fn table_text(report: &GridReport) -> String {
    format!(
        "{}\nseeds: {:?}\nconfig fingerprint: {}\n",
        report.results.render_table(&report.names()),
        report.results.seeds,
        report.config_fingerprint
    )
}

/// Run every legal cell for every seed; writes `results.csv`, `results.json` and `table.txt`.
pub fn cmd_grid(args: &GridArgs, out: &mut dyn Write) -> Result<GridOutput> {
    let exp = Experiment::new(ExperimentConfig::load(args.config.as_deref())?)?;
    let seeds: Vec<u64> = match args.seeds {
        Some(0) => return Err(CliError::Config("--seeds must be at least 1".into())),
        Some(n) => (1..=n).collect(),
        None => exp.config.grid.seeds.clone(),
    };
    let spec = exp.grid_spec()?;
    let cfg = exp.grid_config();
    let threads = match args.threads {
        Some(n) => n.max(1),
        None => threads_from_env()?,
    };
    let dir = args.out.clone().unwrap_or_else(|| exp.config.output_dir.join("grid"));
    let cells_dir = dir.join("cells");

    let jobs: Vec<(usize, u64)> = (0..spec.rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} worker threads: {e}")))?;
    let batches: Vec<cmssl_core::Result<Vec<CellResult>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(row, seed)| {
                let mut store = FileStore::new(cells_dir.clone(), &spec, &exp.config);
                run_row(&spec, row, &exp.dataset, &cfg, seed, &mut store)
            })
            .collect()
    });
    let mut cells = Vec::new();
    for b in batches {
        cells.extend(b?);
    }
    let report = GridReport {
        config_fingerprint: exp.fingerprint.clone(),
        modalities: exp.dataset.modalities.clone(),
        class_names: exp.dataset.class_names.clone(),
        results: GridResults::new(spec, seeds, cells),
    };
    let names = report.names();
    let csv_path = dir.join("results.csv");
    write_atomic(&csv_path, &logs::grid_csv(&csv_path, &report.results, &names, &exp.fingerprint)?)?;
    write_json(&dir.join("results.json"), &report)?;
    let table = table_text(&report);
    write_atomic(&dir.join("table.txt"), table.as_bytes())?;
    emit(out, &table)?;
    emit(out, &format!("results: {}\n", csv_path.display()))?;
    Ok(GridOutput { dir, report })
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckArgs {
    pub seed: u64,
    /// Test hook: corrupt the backward pass of this op.
    pub fault: Option<String>,
}

/// Finite-difference check of every op and a composed encoder + loss graph.
pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let fault = args.fault.as_deref().map(parse_fault).transpose()?;
    let report = run_suite(args.seed, fault)?;
    let width = report.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut text = format!("{:<width$}  max relative error  result\n", "case");
    for c in &report.cases {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        text.push_str(&format!("{:<width$}  {:>18.3e}  {verdict}\n", c.name, c.max_relative_error));
    }
    text.push_str(&format!("epsilon {:e}, tolerance {:e}\n", report.epsilon, report.tolerance));
    emit(out, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradCheck(report.failures().iter().map(|s| s.to_string()).collect()))
    }
}

/// Re-render a finished grid and write `summary.csv` next to it.
pub fn cmd_report(grid_dir: &Path, out: &mut dyn Write) -> Result<GridReport> {
    let report: GridReport = read_json(&grid_dir.join("results.json"))?;
    let names = report.names();
    let legal: BTreeSet<(usize, usize)> = report.results.spec.legal_cells().into_iter().collect();
    if let Some(c) = report.results.cells.iter().find(|c| !legal.contains(&(c.key.row, c.key.column))) {
        return Err(CliError::format(grid_dir, format!("results contain an illegal cell {:?}", c.key)));
    }
    let path = grid_dir.join("summary.csv");
    write_atomic(&path, &logs::summary_csv(&path, &report.results, &names)?)?;
    emit(out, &table_text(&report))?;
    emit(out, &format!("summary: {}\n", path.display()))?;
    Ok(report)
}
