//! Run reports and plot-ready CSV exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::SplitMode;
use crate::error::{Error, Result};
use crate::eval::ablation::{AblationRow, LayerwiseTable};
use crate::eval::retrieval::RetrievalResult;
use crate::eval::routing::RoutingReport;
use crate::eval::similarity::{CategorySimilarity, ConceptSimilarity};
use crate::trainer::{Progress, TrainOutcome};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_way: usize,
    pub chance_top1: f64,
    pub topk: BTreeMap<usize, f64>,
}

impl From<&RetrievalResult> for Metrics {
    fn from(r: &RetrievalResult) -> Self {
        Metrics {
            n_way: r.n_way,
            chance_top1: 1.0 / r.n_way as f64,
            topk: r.topk.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub split: SplitMode,
    pub data_dir: Option<String>,
    pub progress: Progress,
    /// Test metrics of the best-validation state.
    pub metrics: Option<Metrics>,
    pub routing: Option<RoutingReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
}

impl RunReport {
    pub fn new(config: &RunConfig, split: SplitMode, data_dir: Option<String>, outcome: &TrainOutcome) -> Self {
        RunReport {
            config: config.clone(),
            seed: config.seed,
            split,
            data_dir,
            progress: outcome.progress.clone(),
            metrics: None,
            routing: None,
            ablation: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            reason: e.to_string(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Square matrix with labelled rows and columns.
pub fn write_matrix_csv(path: &Path, corner: &str, labels: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let mut header = vec![corner.to_string()];
    header.extend(labels.iter().cloned());
    let rows: Vec<Vec<String>> = labels
        .iter()
        .zip(matrix)
        .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(|v| fmt(*v))).collect())
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_concept_csv(path: &Path, m: &ConceptSimilarity) -> Result<()> {
    let labels: Vec<String> = m
        .concepts
        .iter()
        .zip(&m.categories)
        .map(|(c, g)| format!("c{c}_g{g}"))
        .collect();
    write_matrix_csv(path, "concept", &labels, &m.matrix)
}

pub fn write_category_csv(path: &Path, m: &CategorySimilarity) -> Result<()> {
    let labels: Vec<String> = m.categories.iter().map(|g| format!("g{g}")).collect();
    write_matrix_csv(path, "category", &labels, &m.matrix)
}

pub fn write_routing_csv(path: &Path, r: &RoutingReport) -> Result<()> {
    let k = r.global_weights.len();
    let mut header = vec!["row".to_string()];
    header.extend((0..k).map(|i| format!("layer_{i}")));
    let mut rows = vec![std::iter::once("global".to_string())
        .chain(r.global_weights.iter().map(|v| fmt(*v)))
        .collect::<Vec<_>>()];
    for (s, dev) in r.deviation.iter().enumerate() {
        rows.push(
            std::iter::once(format!("subject_{s}"))
                .chain(dev.iter().map(|v| fmt(*v)))
                .collect(),
        );
    }
    write_rows(path, &header, &rows)
}

pub fn write_layerwise_csv(path: &Path, t: &LayerwiseTable) -> Result<()> {
    let mut header = vec!["category".to_string()];
    header.extend(t.layer_ids.iter().map(|l| format!("layer_{l}")));
    let rows: Vec<Vec<String>> = t
        .categories
        .iter()
        .zip(&t.accuracy)
        .map(|(g, row)| std::iter::once(g.to_string()).chain(row.iter().map(|v| fmt(*v))).collect())
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let header: Vec<String> = [
        "variant",
        "detail",
        "n_seeds",
        "top1_mean",
        "top1_sd",
        "top5_mean",
        "top5_sd",
        "seeds",
        "top1_per_seed",
        "top5_per_seed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let join = |v: &[f64]| v.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(";");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.detail.clone().unwrap_or_default(),
                r.seeds.len().to_string(),
                fmt(r.top1_mean),
                fmt(r.top1_sd),
                fmt(r.top5_mean),
                fmt(r.top5_sd),
                r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
                join(&r.top1),
                join(&r.top5),
            ]
        })
        .collect();
    write_rows(path, &header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_csv_has_one_row_per_variant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ablation.csv");
        let rows = vec![
            AblationRow::new("uniform".into(), None, vec![0, 1], vec![0.5, 0.7], vec![0.9, 1.0]),
            AblationRow::new("single_best".into(), Some("layer 3".into()), vec![0, 1], vec![0.4, 0.6], vec![0.8, 0.9]),
        ];
        write_ablation_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("uniform,,2,0.6"));
        assert!(lines[2].contains("layer 3"));
    }
}
