//! CSV outputs. Deterministic columns go in the main file; wall-clock
//! timings go in a `.timing.csv` sidecar so reruns stay byte-identical.

use std::path::Path;

use cmssl_core::dataset::Dataset;
use cmssl_core::grid::{set_label, GridResults};
use cmssl_core::trainer::EpochLog;

use crate::checkpoint::write_atomic;
use crate::error::{CliError, Result};

fn to_bytes(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::format(path, e.to_string()))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::format(path, e.to_string())
}

/// Shortest round-trip decimal, so values parse back exactly.
fn num(v: f64) -> String {
    format!("{v}")
}

/// `epoch, mean_loss, effective_rank_<modality>..., per_dim_std_mean, config_fingerprint`.
pub fn train_log_csv(path: &Path, history: &[EpochLog], dataset: &Dataset, fingerprint: &str) -> Result<Vec<u8>> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    let modalities: Vec<usize> = history.first().map(|h| h.effective_rank.iter().map(|(m, _)| *m).collect()).unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "mean_loss".to_string()];
    header.extend(dataset.modality_names(&modalities).iter().map(|n| format!("effective_rank_{n}")));
    header.extend(["per_dim_std_mean".to_string(), "config_fingerprint".to_string()]);
    w.write_record(&header).map_err(&err)?;
    for h in history {
        let mut row = vec![h.epoch.to_string(), num(h.mean_loss)];
        row.extend(h.effective_rank.iter().map(|(_, r)| num(*r)));
        row.extend([num(h.per_dim_std_mean), fingerprint.to_string()]);
        w.write_record(&row).map_err(&err)?;
    }
    to_bytes(path, w)
}

pub fn write_train_log(path: &Path, history: &[EpochLog], dataset: &Dataset, fingerprint: &str) -> Result<()> {
    write_atomic(path, &train_log_csv(path, history, dataset, fingerprint)?)
}

/// `epoch, wall_seconds`.
pub fn write_timing(path: &Path, seconds: &[(usize, f64)]) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "wall_seconds"]).map_err(&err)?;
    for (epoch, s) in seconds {
        w.write_record([epoch.to_string(), format!("{s:.3}")]).map_err(&err)?;
    }
    write_atomic(path, &to_bytes(path, w)?)
}

/// `pretrain_set, finetune_set, star_mode, seed, accuracy, per_class_<class>..., config_fingerprint`;
/// one line per cell and seed. Empty per-class fields mean no support in the split.
pub fn grid_csv(path: &Path, results: &GridResults, dataset: &Dataset, fingerprint: &str) -> Result<Vec<u8>> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> =
        ["pretrain_set", "finetune_set", "star_mode", "seed", "accuracy"].iter().map(|s| s.to_string()).collect();
    header.extend(dataset.class_names.iter().map(|c| format!("per_class_{c}")));
    header.push("config_fingerprint".into());
    w.write_record(&header).map_err(&err)?;
    for cell in &results.cells {
        let row = &results.spec.rows[cell.key.row];
        let mut rec = vec![
            row.pretrain.as_deref().map_or_else(|| "None".to_string(), |p| set_label(dataset, p)),
            set_label(dataset, &results.spec.columns[cell.key.column]),
            row.star.to_string(),
            cell.key.seed.to_string(),
            num(cell.report.accuracy),
        ];
        rec.extend(cell.report.per_class_accuracy.iter().map(|a| a.map(num).unwrap_or_default()));
        rec.push(fingerprint.to_string());
        w.write_record(&rec).map_err(&err)?;
    }
    to_bytes(path, w)
}

/// Per-cell summary: `pretrain_set, finetune_set, star_mode, runs, mean_accuracy, std_accuracy`.
pub fn summary_csv(path: &Path, results: &GridResults, dataset: &Dataset) -> Result<Vec<u8>> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pretrain_set", "finetune_set", "star_mode", "runs", "mean_accuracy", "std_accuracy"])
        .map_err(&err)?;
    for (r, row) in results.spec.rows.iter().enumerate() {
        for (c, col) in results.spec.columns.iter().enumerate() {
            let Some(s) = results.summary(r, c) else { continue };
            w.write_record([
                row.pretrain.as_deref().map_or_else(|| "None".to_string(), |p| set_label(dataset, p)),
                set_label(dataset, col),
                row.star.to_string(),
                s.runs.to_string(),
                num(s.mean),
                num(s.std),
            ])
            .map_err(&err)?;
        }
    }
    to_bytes(path, w)
}
