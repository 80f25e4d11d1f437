//! Run reports: a plain-text summary and a JSON twin with the full data,
//! including per-epoch curves for external plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::metrics::{MetricsReport, CLASS_NAMES};
use crate::selftrain::IterationReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub metrics: Option<MetricsReport>,
    pub iterations: Vec<IterationReport>,
    /// Free-form key/value lines in insertion order.
    pub summary: Vec<(String, String)>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            seed: config.seed,
            config: config.clone(),
            metrics: None,
            iterations: Vec::new(),
            summary: Vec::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_owned(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command: {}", self.command);
        let _ = writeln!(out, "seed: {}", self.seed);
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}: {v}");
        }
        if let Some(m) = &self.metrics {
            out.push('\n');
            write_metrics(&mut out, m);
        }
        if !self.iterations.is_empty() {
            let _ = writeln!(out, "\niteration  params  train  pseudo  best_epoch  mean_auc");
            for it in &self.iterations {
                let _ = writeln!(
                    out,
                    "{:>9}  {:>6}  {:>5}  {:>6}  {:>10}  {:.6}",
                    it.iteration,
                    it.num_parameters,
                    it.train_size,
                    it.pseudo_labeled,
                    it.best_epoch,
                    it.metrics.mean_auc
                );
            }
        }
        match toml::to_string(&self.config) {
            Ok(cfg) => {
                let _ = write!(out, "\n# resolved config\n{cfg}");
            }
            Err(e) => log::warn!("config not rendered in text report: {e}"),
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        let json = dir.join(format!("{stem}.json"));
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        Ok((txt, json))
    }
}

fn column_name(j: usize) -> String {
    CLASS_NAMES.get(j).map_or_else(|| format!("class_{j}"), |s| (*s).to_owned())
}

pub fn write_metrics(out: &mut String, m: &MetricsReport) {
    let _ = writeln!(out, "mean_auc: {:.6}", m.mean_auc);
    for (j, auc) in m.per_column_auc.iter().enumerate() {
        match auc {
            Some(a) => {
                let _ = writeln!(out, "auc[{}]: {a:.6}", column_name(j));
            }
            None => {
                let _ = writeln!(out, "auc[{}]: degenerate (excluded)", column_name(j));
            }
        }
    }
    if !m.confusion.is_empty() {
        let _ = writeln!(out, "accuracy: {:.6}", m.accuracy());
        let _ = writeln!(out, "confusion (rows = true, cols = predicted):");
        for row in &m.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            let _ = writeln!(out, "  {}", cells.join(" "));
        }
    }
    if !m.loss_history.is_empty() {
        let _ = writeln!(out, "epoch  train_loss  val_mean_auc");
        for r in &m.loss_history {
            let auc = r.val_mean_auc.map_or_else(|| "-".to_owned(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{:>5}  {:>10.6}  {auc}", r.epoch, r.train_loss);
        }
    }
}
