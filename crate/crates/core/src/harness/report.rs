//! Report files written by a run or an ablation.
//!
//! | file | header |
//! |---|---|
//! | `metrics.json` | JSON object, see [`RunReport`] |
//! | `routing_layer<i>.csv` | `class,expert_0,…,expert_{M-1}` |
//! | `loss_trace.csv` | `step,total,cls,center,contrast,kd,balance,kd_empty` |
//! | `embeddings_final.csv` | `class_id,q_0,…,q_{d-1}` |
//! | `ablation.csv` | see [`ABLATION_HEADER`] |

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ablation::AblationReport;
use super::config::ExperimentConfig;
use super::eval::{EmbeddingRow, Metrics};
use super::train::StepLosses;
use crate::error::{Error, Result};
use crate::scenegen::CorpusStats;

pub const LOSS_TRACE_HEADER: [&str; 8] = ["step", "total", "cls", "center", "contrast", "kd", "balance", "kd_empty"];
pub const ABLATION_HEADER: [&str; 13] = [
    "row",
    "config",
    "overall_accuracy",
    "many_accuracy",
    "medium_accuracy",
    "few_accuracy",
    "center_l1",
    "mean_purity",
    "delta_overall",
    "delta_many",
    "delta_medium",
    "delta_few",
    "delta_mean_purity",
];

/// Everything a single training + evaluation run produces.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// SHA-256 of the config's TOML rendering.
    pub config_sha256: String,
    pub class_names: Vec<String>,
    pub param_count: usize,
    /// Layer indices that use LMoE blocks.
    pub moe_layers: Vec<usize>,
    pub num_experts: usize,
    pub embedding_dim: usize,
    pub train_stats: CorpusStats,
    pub final_loss: Option<StepLosses>,
    pub metrics: Metrics,
    #[serde(skip)]
    pub trace: Vec<StepLosses>,
    #[serde(skip)]
    pub embeddings: Vec<EmbeddingRow>,
}

pub fn config_digest(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.display().to_string(),
            reason: format!("{other:?}"),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `metrics.json`, one routing CSV per LMoE layer, the loss trace and
/// the final embeddings. Returns the written paths.
pub fn emit_reports(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let mut written = Vec::new();

    let path = out.join("metrics.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(format!("metrics.json: {e}")))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);

    for &layer in &report.moe_layers {
        let path = out.join(format!("routing_layer{layer}.csv"));
        let header: Vec<String> = std::iter::once("class".to_string())
            .chain((0..report.num_experts).map(|i| format!("expert_{i}")))
            .collect();
        let matrix = report.metrics.routing.iter().find(|r| r.layer == layer).map(|r| &r.matrix);
        let rows = matrix.into_iter().flat_map(|m| {
            m.counts.iter().enumerate().map(|(c, row)| {
                std::iter::once(report.class_names[c].clone())
                    .chain(row.iter().map(|v| v.to_string()))
                    .collect()
            })
        });
        write_rows(&path, &header, rows)?;
        written.push(path);
    }

    let path = out.join("loss_trace.csv");
    let header: Vec<String> = LOSS_TRACE_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = report.trace.iter().enumerate().map(|(i, l)| {
        let mut r = vec![i.to_string()];
        r.extend([l.total, l.cls, l.center, l.contrast, l.kd, l.balance].map(|v| format!("{v:?}")));
        r.push(l.kd_empty.to_string());
        r
    });
    write_rows(&path, &header, rows)?;
    written.push(path);

    let path = out.join("embeddings_final.csv");
    let header: Vec<String> = std::iter::once("class_id".to_string())
        .chain((0..report.embedding_dim).map(|i| format!("q_{i}")))
        .collect();
    let rows = report.embeddings.iter().map(|e| {
        std::iter::once(e.class_id.to_string())
            .chain(e.coords.iter().map(|v| format!("{v:?}")))
            .collect()
    });
    write_rows(&path, &header, rows)?;
    written.push(path);
    Ok(written)
}

/// Writes `ablation.csv` plus one report directory per row under `out/<row>/`.
pub fn emit_ablation(report: &AblationReport, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let mut written = Vec::new();
    let path = out.join("ablation.csv");
    let header: Vec<String> = ABLATION_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = report.rows.iter().enumerate().map(|(i, row)| {
        let s = &row.summary;
        let d = &row.delta;
        vec![
            i.to_string(),
            row.name.clone(),
            fmt_opt(s.overall),
            fmt_opt(s.many),
            fmt_opt(s.medium),
            fmt_opt(s.few),
            fmt_opt(s.center_l1),
            fmt_opt(s.mean_purity),
            fmt_opt(d.overall),
            fmt_opt(d.many),
            fmt_opt(d.medium),
            fmt_opt(d.few),
            fmt_opt(d.mean_purity),
        ]
    });
    write_rows(&path, &header, rows)?;
    written.push(path);
    for (i, row) in report.rows.iter().enumerate() {
        written.extend(emit_reports(&row.run, &out.join(format!("row{i}_{}", row.name.replace('+', "_"))))?);
    }
    Ok(written)
}
