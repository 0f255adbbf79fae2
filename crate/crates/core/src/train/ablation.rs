//! Ablation grid over attention hop configurations and GRU depth.
//!
//! Each cell retrains from scratch with identical seeds and budgets; hop
//! configuration `h` sets both the number of attention scales and the
//! subgraph radius, so a 1-hop cell really sees 1-hop context only.

use std::io::Write;

use crate::data::{assemble, FilledSpeedTable, IngestedStore, SplitRefs};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::train::{evaluate, train, MetricReport, TrainConfig};

/// Which cells to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGrid {
    Full,
    /// Only the row with this many hops (1, 2 or 3).
    Row(usize),
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    /// Hop label in reporting form: "1", "1-2" or "1-2-3".
    pub hops: String,
    pub gru_depth: usize,
    /// Mean metrics over the seeds, or the failure message.
    pub outcome: std::result::Result<MetricReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
}

fn hops_label(scales: usize) -> String {
    (1..=scales).map(|s| s.to_string()).collect::<Vec<_>>().join("-")
}

fn mean_reports(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        rmse: avg(|r| r.rmse),
        mae: avg(|r| r.mae),
        mape_percent: avg(|r| r.mape_percent),
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        threshold: reports[0].threshold,
    }
}

/// Train and evaluate every grid cell. Assembly is cached per hop count
/// (the subgraph radius changes with it); cell failures are recorded and
/// the grid continues.
pub fn ablate(
    store: &IngestedStore,
    filled: &FilledSpeedTable,
    refs: &SplitRefs,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
    grid: AblationGrid,
) -> Result<AblationResult> {
    assert!(!seeds.is_empty(), "ablation needs at least one seed");
    let hop_values: Vec<usize> = match grid {
        AblationGrid::Full => vec![1, 2, 3],
        AblationGrid::Row(h) => vec![h],
    };
    let mut cells = Vec::new();
    for &hops in &hop_values {
        let model = ModelConfig {
            scales: hops,
            subgraph_radius: hops,
            ..base_model.clone()
        };
        let assembled = assemble(store, filled, refs, &model);
        for depth in [1usize, 2, 3] {
            let cell_model = ModelConfig {
                gru_depth: depth,
                ..model.clone()
            };
            let outcome = match &assembled {
                Err(e) => Err(e.to_string()),
                Ok(prepared) => {
                    let mut reports = Vec::new();
                    let mut failure = None;
                    for &seed in seeds {
                        let tc = TrainConfig {
                            seed,
                            ..base_train.clone()
                        };
                        match train(&prepared.train, &prepared.val, &cell_model, &tc).and_then(
                            |(params, _)| {
                                evaluate(&params, &prepared.test, &cell_model, cell_model.threshold)
                            },
                        ) {
                            Ok(report) => reports.push(report),
                            Err(e) => {
                                failure = Some(e.to_string());
                                break;
                            }
                        }
                    }
                    match failure {
                        Some(msg) => Err(msg),
                        None => Ok(mean_reports(&reports)),
                    }
                }
            };
            if let Err(msg) = &outcome {
                log::warn!("ablation cell hops={hops} depth={depth} failed: {msg}");
            }
            cells.push(AblationCell {
                hops: hops_label(hops),
                gru_depth: depth,
                outcome,
            });
        }
    }
    Ok(AblationResult { cells })
}

/// `ablation.csv`: `hops,gru_depth,rmse,precision,recall,f1`; failed cells
/// carry the error text in place of numbers.
pub fn write_ablation_csv<W: Write>(mut w: W, result: &AblationResult) -> Result<()> {
    writeln!(w, "hops,gru_depth,rmse,precision,recall,f1")?;
    for cell in &result.cells {
        match &cell.outcome {
            Ok(m) => writeln!(
                w,
                "{},{},{},{},{},{}",
                cell.hops, cell.gru_depth, m.rmse, m.precision, m.recall, m.f1
            )?,
            Err(msg) => writeln!(
                w,
                "{},{},error: {},,,",
                cell.hops,
                cell.gru_depth,
                msg.replace(',', ";")
            )?,
        }
    }
    Ok(())
}
