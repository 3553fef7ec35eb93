//! Run directory layout: config snapshot, checkpoint and tab-separated
//! metric tables.

use std::path::{Path, PathBuf};

use emofuse_core::labels::LabelScheme;
use emofuse_core::metrics::Confusion;
use emofuse_core::train::{EpochLog, MetricsReport, RunConfig};

use crate::checkpoint::save_checkpoint;
use crate::config::write_config;
use crate::error::{Error, Result};

pub const CONFIG: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS: &str = "metrics.tsv";
pub const CONFUSION: &str = "confusion.tsv";
pub const EPOCHS: &str = "epochs.tsv";
pub const PRETRAIN: &str = "pretrain.tsv";

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Tab-separated writer with an I/O error that names the file.
pub struct Table {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut t = Self {
            path: path.to_path_buf(),
            w,
        };
        t.row(header.iter().copied())?;
        Ok(t)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w
            .write_record(fields)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        // rows show up while long runs are still going
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

pub fn write_metrics(path: &Path, accuracy: f64, macro_f1: f64, selection: Option<f64>, extra: &[(&str, String)]) -> Result<()> {
    let mut t = Table::create(path, &["metric", "value"])?;
    t.row(["accuracy".to_string(), format!("{accuracy}")])?;
    t.row(["macro_f1".to_string(), format!("{macro_f1}")])?;
    t.row(["selection_precision".to_string(), opt(selection)])?;
    for (k, v) in extra {
        t.row([k.to_string(), v.clone()])?;
    }
    Ok(())
}

/// Rows are true classes, columns predicted classes.
pub fn write_confusion(path: &Path, c: &Confusion, scheme: LabelScheme) -> Result<()> {
    let names = scheme.class_names();
    let mut header = vec!["true\\pred"];
    header.extend_from_slice(names);
    let mut t = Table::create(path, &header)?;
    for (name, row) in names.iter().zip(&c.counts) {
        let mut fields = vec![name.to_string()];
        fields.extend(row.iter().map(|n| n.to_string()));
        t.row(fields)?;
    }
    Ok(())
}

pub struct EpochTable(Table);

impl EpochTable {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(Table::create(
            path,
            &["epoch", "lr", "loss", "train_accuracy", "test_accuracy", "test_selection_precision"],
        )?))
    }

    pub fn push(&mut self, log: &EpochLog) -> Result<()> {
        self.0.row([
            log.epoch.to_string(),
            format!("{}", log.lr),
            format!("{}", log.loss),
            format!("{}", log.train_accuracy),
            opt(log.test_accuracy),
            opt(log.test_selection_precision),
        ])
    }
}

/// Everything except the per-epoch log, which is written as training runs.
pub fn write_run(dir: &Path, cfg: &RunConfig, store: &emofuse_core::diff::ParamStore, report: &MetricsReport, seconds: f64) -> Result<()> {
    write_config(&dir.join(CONFIG), cfg)?;
    save_checkpoint(&dir.join(CHECKPOINT_DIR), cfg, store)?;
    write_metrics(
        &dir.join(METRICS),
        report.accuracy,
        report.macro_f1,
        report.selection_precision,
        &[
            ("initial_loss", format!("{}", report.initial_loss)),
            ("final_train_loss", opt(report.epochs.last().map(|e| e.loss))),
            ("runtime_s", format!("{seconds:.3}")),
        ],
    )?;
    write_confusion(&dir.join(CONFUSION), &report.confusion, cfg.model.scheme)?;
    if !report.pretrain_losses.is_empty() {
        let mut t = Table::create(&dir.join(PRETRAIN), &["epoch", "loss"])?;
        for (i, l) in report.pretrain_losses.iter().enumerate() {
            t.row([i.to_string(), format!("{l}")])?;
        }
    }
    Ok(())
}
