//! JSON experiment configuration, `key=value` overrides, and the glue that
//! turns a configuration into client datasets and a finished run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    self, LabeledDataset, PartitionManifest, PartitionMode, PartitionSpec, ShellSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::fedavg;
use crate::metrics::EmitFormat;
use crate::nn::{SgdConfig, WeightSet};
use crate::protocol::{self, ClientData, LogEntry, RoundHistory, RunConfig, RunOptions};
use crate::seed::{self, Party, Purpose};
use crate::split::{self, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    #[default]
    Fedper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    LinearBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Gaussian(SynthSpec),
    Shells(ShellSpec),
    Csv { path: PathBuf },
}

/// Partition settings; client count and seed come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "default_volume_range")]
    pub volume_range: (usize, usize),
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub rater_bias: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::KClass,
            k: 1,
            volume_range: default_volume_range(),
            train_fraction: default_train_fraction(),
            rater_bias: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Checkpoint every this many rounds; `0` keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<EmitFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoint_every: 0,
            formats: default_formats(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_volume_range() -> (usize, usize) {
    (60, 290)
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_formats() -> Vec<EmitFormat> {
    vec![EmitFormat::Csv]
}
fn default_run_id() -> String {
    "run".into()
}
fn default_rounds() -> usize {
    50
}
fn default_clients() -> usize {
    10
}
fn default_sgd() -> SgdConfig {
    SgdConfig {
        eta: 0.01,
        epochs: 4,
        batch_size: 16,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub fine_tune: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    pub model: ModelSpec,
    #[serde(default = "default_sgd")]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub history: RoundHistory,
    pub base: WeightSet,
    pub personal: Vec<WeightSet>,
    /// Server-side message log (empty for the averaging baseline, which has none).
    pub message_log: Vec<LogEntry>,
    pub spec: ModelSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Sets a dotted key such as `rounds` or `partition.k`. The value is
    /// parsed as JSON, falling back to a plain string. Keys that do not exist
    /// in the configuration are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?,
                _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
            };
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let updated: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id {:?} is not a plain name", self.run_id)));
        }
        let spec = self.effective_spec()?;
        self.run_config_with(spec)?.validate()?;
        let n_classes = self.model.num_classes();
        match &self.dataset {
            DatasetConfig::Gaussian(s) => self.check_task(s.dim, s.num_classes)?,
            DatasetConfig::Shells(s) => self.check_task(s.dim, s.num_classes)?,
            DatasetConfig::Csv { .. } => {}
        }
        if self.partition.mode == PartitionMode::KClass && (self.partition.k == 0 || self.partition.k > n_classes) {
            return Err(Error::Config(format!(
                "partition.k = {} must lie in 1..={n_classes}",
                self.partition.k
            )));
        }
        Ok(())
    }

    fn check_task(&self, dim: usize, classes: usize) -> Result<()> {
        if dim != self.model.input_dim() || classes != self.model.num_classes() {
            return Err(Error::Config(format!(
                "model maps {}→{} but dataset has dim {dim} and {classes} classes",
                self.model.input_dim(),
                self.model.num_classes()
            )));
        }
        Ok(())
    }

    /// The model actually trained: averaging has no personalization layers,
    /// and the linear-base ablation collapses the base.
    pub fn effective_spec(&self) -> Result<ModelSpec> {
        let mut spec = self.model.clone();
        if self.algorithm == Algorithm::Fedavg {
            spec.k_personal = 0;
        }
        spec.validate()?;
        match self.ablation {
            Ablation::None => Ok(spec),
            Ablation::LinearBase => split::linearize_base(&spec),
        }
    }

    fn run_config_with(&self, spec: ModelSpec) -> Result<RunConfig> {
        Ok(RunConfig {
            spec,
            num_clients: self.num_clients,
            rounds: self.rounds,
            sgd: self.sgd,
            fine_tune: self.fine_tune,
            master_seed: self.master_seed,
            partition: self.partition_spec(),
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        self.run_config_with(self.effective_spec()?)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.partition.mode,
            num_clients: self.num_clients,
            k: self.partition.k,
            volume_range: self.partition.volume_range,
            train_fraction: self.partition.train_fraction,
            rater_bias: self.partition.rater_bias,
            seed: self.master_seed,
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        let ds = match &self.dataset {
            DatasetConfig::Gaussian(s) => data::synth_classification(s, self.master_seed)?,
            DatasetConfig::Shells(s) => data::synth_shells(s, self.master_seed)?,
            DatasetConfig::Csv { path } => data::load_csv(path)?,
        };
        if ds.dim() != Some(self.model.input_dim()) || ds.num_classes > self.model.num_classes() {
            return Err(Error::Config(format!(
                "dataset (dim {:?}, {} classes) does not fit the model",
                ds.dim(),
                ds.num_classes
            )));
        }
        Ok(LabeledDataset {
            num_classes: self.model.num_classes(),
            ..ds
        })
    }

    pub fn partition_manifest(&self) -> Result<PartitionManifest> {
        let ds = self.load_dataset()?;
        let spec = self.partition_spec();
        let shards = data::partition(&ds, &spec)?;
        Ok(PartitionManifest::new(&ds, &spec, &shards))
    }

    /// Partition, then split each client's share into train and test.
    pub fn client_data(&self) -> Result<Vec<ClientData>> {
        let ds = self.load_dataset()?;
        let spec = self.partition_spec();
        data::partition(&ds, &spec)?
            .into_iter()
            .enumerate()
            .map(|(j, shard)| {
                let split_seed = seed::derive_seed(self.master_seed, Party::Client(j), 0, Purpose::Split);
                let (train, test) = data::train_test_split(&shard.data, spec.train_fraction, split_seed)?;
                Ok(ClientData {
                    train: train.samples,
                    test: test.samples,
                })
            })
            .collect()
    }

    pub fn execute(&self, opts: &RunOptions) -> Result<RunOutcome> {
        let cfg = self.run_config()?;
        let data = self.client_data()?;
        match self.algorithm {
            Algorithm::Fedper => {
                let out = protocol::run_federation(&cfg, data, opts)?;
                Ok(RunOutcome {
                    history: out.history,
                    base: out.server.base.clone(),
                    personal: out.clients.into_iter().map(|c| c.personal).collect(),
                    message_log: out.server.message_log().to_vec(),
                    spec: cfg.spec,
                })
            }
            Algorithm::Fedavg => {
                let out = fedavg::run_fedavg(&cfg, &data, opts)?;
                Ok(RunOutcome {
                    history: out.history,
                    base: out.global,
                    personal: vec![WeightSet::empty(); cfg.num_clients],
                    message_log: Vec::new(),
                    spec: cfg.spec,
                })
            }
        }
    }
}
