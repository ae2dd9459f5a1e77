//! Per-client evaluation, cross-client summaries and tabular output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{self, Sample, WeightSet};
use crate::protocol::RoundHistory;
use crate::split::ModelSpec;

pub mod sweep;

pub use sweep::{run_sweep, AxisValue, SweepAxis, SweepPoint, SweepResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub round: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(spec: &ModelSpec, base: &WeightSet, personal: &WeightSet, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation on an empty set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in samples {
        let logits = nn::forward(spec, base, personal, &s.x)?;
        if s.y >= logits.len() {
            return Err(Error::Usage(format!("label {} out of range", s.y)));
        }
        if argmax(&logits) == s.y {
            correct += 1;
        }
        loss += nn::softmax_cross_entropy(&logits, s.y).0;
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossClientStats {
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn cross_client_stats(values: &[f64]) -> Result<CrossClientStats> {
    if values.is_empty() {
        return Err(Error::Usage("statistics over zero clients".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(CrossClientStats {
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Test-accuracy statistics at the last round of `history`.
pub fn final_accuracy_stats(history: &RoundHistory) -> Result<CrossClientStats> {
    let last = history
        .last()
        .ok_or_else(|| Error::Usage("history has no rounds".into()))?;
    let acc: Vec<f64> = last.clients.iter().map(|m| m.test_accuracy).collect();
    cross_client_stats(&acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    Csv,
    Json,
}

impl EmitFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EmitFormat::Csv => "csv",
            EmitFormat::Json => "json",
        }
    }
}

/// One row of a history table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub client: usize,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn history_rows(history: &RoundHistory) -> Vec<HistoryRow> {
    history
        .metrics()
        .map(|m| HistoryRow {
            round: m.round,
            client: m.client,
            accuracy: m.test_accuracy,
            loss: m.train_loss,
        })
        .collect()
}

// `{:?}` on f64 prints the shortest string that parses back to the same bits
fn history_csv(rows: &[HistoryRow], prefix: Option<(&str, &str)>) -> String {
    let mut out = String::new();
    if prefix.is_some() {
        out.push_str("axis,value,");
    }
    out.push_str("round,client,accuracy,loss\n");
    for r in rows {
        if let Some((axis, value)) = prefix {
            out.push_str(&format!("{axis},{value},"));
        }
        out.push_str(&format!("{},{},{:?},{:?}\n", r.round, r.client, r.accuracy, r.loss));
    }
    out
}

pub fn render_history(history: &RoundHistory, format: EmitFormat) -> Result<String> {
    let rows = history_rows(history);
    Ok(match format {
        EmitFormat::Csv => history_csv(&rows, None),
        EmitFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
    })
}

pub fn emit_history(history: &RoundHistory, format: EmitFormat, path: &Path) -> Result<()> {
    write_atomic(path, render_history(history, format)?.as_bytes())
}

/// Long-format rows for one sweep point.
pub fn render_sweep_point(axis: SweepAxis, point: &SweepPoint, format: EmitFormat) -> Result<String> {
    let rows = history_rows(&point.history);
    let value = point.value.to_string();
    Ok(match format {
        EmitFormat::Csv => history_csv(&rows, Some((axis.name(), &value))),
        EmitFormat::Json => {
            #[derive(Serialize)]
            struct Row<'a> {
                axis: &'a str,
                value: &'a str,
                #[serde(flatten)]
                row: HistoryRow,
            }
            let rows: Vec<Row<'_>> = rows
                .into_iter()
                .map(|row| Row {
                    axis: axis.name(),
                    value: &value,
                    row,
                })
                .collect();
            serde_json::to_string_pretty(&rows)? + "\n"
        }
    })
}

/// One line per sweep point with final-round statistics and the gap to the
/// averaging baseline when one was run.
pub fn render_sweep_summary(result: &SweepResult, format: EmitFormat) -> Result<String> {
    #[derive(Serialize)]
    struct Summary {
        axis: &'static str,
        value: String,
        mean_accuracy: f64,
        std_accuracy: f64,
        min_accuracy: f64,
        max_accuracy: f64,
        baseline_mean_accuracy: Option<f64>,
        baseline_std_accuracy: Option<f64>,
        gap: Option<f64>,
    }
    let rows: Vec<Summary> = result
        .points
        .iter()
        .map(|p| Summary {
            axis: result.axis.name(),
            value: p.value.to_string(),
            mean_accuracy: p.stats.mean,
            std_accuracy: p.stats.std,
            min_accuracy: p.stats.min,
            max_accuracy: p.stats.max,
            baseline_mean_accuracy: p.baseline.as_ref().map(|b| b.stats.mean),
            baseline_std_accuracy: p.baseline.as_ref().map(|b| b.stats.std),
            gap: p.gap(),
        })
        .collect();
    Ok(match format {
        EmitFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
        EmitFormat::Csv => {
            let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
            let mut out = String::from(
                "axis,value,mean_accuracy,std_accuracy,min_accuracy,max_accuracy,baseline_mean_accuracy,baseline_std_accuracy,gap\n",
            );
            for r in rows {
                out.push_str(&format!(
                    "{},{},{:?},{:?},{:?},{:?},{},{},{}\n",
                    r.axis,
                    r.value,
                    r.mean_accuracy,
                    r.std_accuracy,
                    r.min_accuracy,
                    r.max_accuracy,
                    opt(r.baseline_mean_accuracy),
                    opt(r.baseline_std_accuracy),
                    opt(r.gap)
                ));
            }
            out
        }
    })
}

/// Writes `{run_id}_{axis}_{value}.{ext}` per point plus
/// `{run_id}_{axis}_summary.{ext}`; returns the per-point paths.
pub fn emit_sweep(result: &SweepResult, run_id: &str, format: EmitFormat, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let ext = format.extension();
    let mut written = Vec::with_capacity(result.points.len());
    for p in &result.points {
        let path = dir.join(format!("{run_id}_{}_{}.{ext}", result.axis.name(), p.value));
        write_atomic(&path, render_sweep_point(result.axis, p, format)?.as_bytes())?;
        written.push(path);
    }
    let summary = dir.join(format!("{run_id}_{}_summary.{ext}", result.axis.name()));
    write_atomic(&summary, render_sweep_summary(result, format)?.as_bytes())?;
    Ok(written)
}
