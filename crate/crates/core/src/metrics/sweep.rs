//! Re-running an experiment along one axis (classes per client, number of
//! personalization layers, or algorithm) and collecting final statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{final_accuracy_stats, CrossClientStats};
use crate::protocol::{RoundHistory, RunOptions};
use crate::seed::{self, Party, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Classes per client.
    K,
    /// Number of personalization layers.
    Kp,
    Algorithm,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Kp => "kp",
            SweepAxis::Algorithm => "algorithm",
        }
    }

    pub fn parse_value(self, raw: &str) -> Result<AxisValue> {
        let raw = raw.trim();
        match self {
            SweepAxis::K | SweepAxis::Kp => raw
                .parse::<usize>()
                .map(AxisValue::Count)
                .map_err(|_| Error::Usage(format!("{raw:?} is not a count for axis {}", self.name()))),
            SweepAxis::Algorithm => match raw {
                "fedavg" => Ok(AxisValue::Algorithm(Algorithm::Fedavg)),
                "fedper" => Ok(AxisValue::Algorithm(Algorithm::Fedper)),
                _ => Err(Error::Usage(format!("unknown algorithm {raw:?}"))),
            },
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "kp" | "k_personal" => Ok(SweepAxis::Kp),
            "algorithm" => Ok(SweepAxis::Algorithm),
            _ => Err(Error::Usage(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisValue {
    Count(usize),
    Algorithm(Algorithm),
}

impl AxisValue {
    /// Stable code the per-point seed is derived from, so a point's run does
    /// not depend on where it sits in the value list.
    fn code(self, axis: SweepAxis) -> u64 {
        let tag = match axis {
            SweepAxis::K => 0u64,
            SweepAxis::Kp => 1,
            SweepAxis::Algorithm => 2,
        };
        let v = match self {
            AxisValue::Count(n) => n as u64,
            AxisValue::Algorithm(a) => a as u64,
        };
        (tag << 32) | v
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Algorithm(Algorithm::Fedavg) => f.write_str("fedavg"),
            AxisValue::Algorithm(Algorithm::Fedper) => f.write_str("fedper"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub stats: CrossClientStats,
    pub history: RoundHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: AxisValue,
    pub master_seed: u64,
    /// Final-round test accuracy across clients.
    pub stats: CrossClientStats,
    pub history: RoundHistory,
    /// Averaging baseline on the same data and seed, when requested.
    pub baseline: Option<BaselineRun>,
}

impl SweepPoint {
    /// Mean accuracy minus the baseline's.
    pub fn gap(&self) -> Option<f64> {
        self.baseline.as_ref().map(|b| self.stats.mean - b.stats.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// The configuration a sweep point runs, seed included.
pub fn point_config(base: &ExperimentConfig, axis: SweepAxis, value: AxisValue) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match (axis, value) {
        (SweepAxis::K, AxisValue::Count(k)) => cfg.partition.k = k,
        (SweepAxis::Kp, AxisValue::Count(kp)) => cfg.model.k_personal = kp,
        (SweepAxis::Algorithm, AxisValue::Algorithm(a)) => cfg.algorithm = a,
        _ => return Err(Error::Usage(format!("value {value} does not belong to axis {}", axis.name()))),
    }
    if cfg.algorithm == Algorithm::Fedavg || cfg.model.k_personal == 0 {
        cfg.fine_tune = false;
    }
    cfg.master_seed = seed::derive_seed(base.master_seed, Party::Sweep, value.code(axis), Purpose::Sweep);
    cfg.validate()?;
    Ok(cfg)
}

fn baseline_config(point: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = point.clone();
    cfg.algorithm = Algorithm::Fedavg;
    cfg.fine_tune = false;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one federation per value (plus an averaging baseline per value when
/// `with_baseline`). Points come back sorted by value.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[AxisValue],
    opts: &RunOptions,
    with_baseline: bool,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let mut values = values.to_vec();
    values.sort();
    values.dedup();

    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let cfg = point_config(base, axis, value)?;
        let history = cfg.execute(opts)?.history;
        let baseline = if with_baseline {
            let history = baseline_config(&cfg)?.execute(opts)?.history;
            Some(BaselineRun {
                stats: final_accuracy_stats(&history)?,
                history,
            })
        } else {
            None
        };
        points.push(SweepPoint {
            value,
            master_seed: cfg.master_seed,
            stats: final_accuracy_stats(&history)?,
            history,
            baseline,
        });
    }
    Ok(SweepResult { axis, points })
}
