//! Datasets and the two heterogeneity regimes used by the simulator:
//! balanced k-class partitions, where each client only sees a few labels, and
//! unbalanced per-user volumes with optional rater-specific relabeling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::seed::{self, Party, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.y >= num_classes) {
            return Err(Error::Usage(format!(
                "label {} out of range for {num_classes} classes",
                s.y
            )));
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    pub fn label_set(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Gaussian-mixture classification task.
///
/// Class `c` has mean `separation · e_c` (the `c`-th basis vector) when
/// `c < dim`, otherwise a random direction of the same norm. Every entry of
/// `label_maps` is one cluster of clients: for each class it generates
/// `per_class` samples around that class's mean, labeled `map[c]`. Clusters
/// with different maps therefore disagree about the label of the same input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// One label permutation per cluster; empty means a single identity cluster.
    #[serde(default)]
    pub label_maps: Vec<Vec<usize>>,
}

fn default_sigma() -> f64 {
    0.5
}

fn default_separation() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(num_classes: usize, dim: usize, per_class: usize) -> Self {
        Self {
            num_classes,
            dim,
            per_class,
            sigma: default_sigma(),
            separation: default_separation(),
            label_maps: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::Config("synthetic task needs classes, dim and per_class >= 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be finite and non-negative".into()));
        }
        for map in &self.label_maps {
            let mut sorted = map.clone();
            sorted.sort_unstable();
            if sorted != (0..self.num_classes).collect::<Vec<_>>() {
                return Err(Error::Config(format!("label map {map:?} is not a permutation")));
            }
        }
        Ok(())
    }
}

pub fn synth_classification(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seed::derive(seed, Party::Data, 0, Purpose::Synth);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| {
            if c < spec.dim {
                let mut m = vec![0.0; spec.dim];
                m[c] = spec.separation;
                m
            } else {
                random_direction(spec.dim, &mut rng)
                    .into_iter()
                    .map(|v| v * spec.separation)
                    .collect()
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let identity: Vec<Vec<usize>> = vec![(0..spec.num_classes).collect()];
    let maps = if spec.label_maps.is_empty() {
        &identity
    } else {
        &spec.label_maps
    };
    let mut samples = Vec::with_capacity(maps.len() * spec.num_classes * spec.per_class);
    for map in maps {
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..spec.per_class {
                let x = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
                samples.push(Sample::new(x, map[c]));
            }
        }
    }
    LabeledDataset::new(samples, spec.num_classes)
}

/// Concentric shells: class `c` lies at radius `(c + 1) · spacing` around the
/// origin in a uniformly random direction, with Gaussian radial noise.
/// No linear classifier separates more than two neighboring shells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub spacing: f64,
    #[serde(default = "default_radial_noise")]
    pub radial_noise: f64,
}

fn default_radial_noise() -> f64 {
    0.1
}

pub fn synth_shells(spec: &ShellSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::Config("shell task needs classes, dim and per_class >= 1".into()));
    }
    let noise = Normal::new(0.0, spec.radial_noise)
        .map_err(|e| Error::Config(format!("radial_noise: {e}")))?;
    let mut rng = seed::derive(seed, Party::Data, 1, Purpose::Synth);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for c in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let r = (c + 1) as f64 * spec.spacing + noise.sample(&mut rng);
            let x = random_direction(spec.dim, &mut rng).into_iter().map(|v| v * r).collect();
            samples.push(Sample::new(x, c));
        }
    }
    LabeledDataset::new(samples, spec.num_classes)
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    KClass,
    UnbalancedUsers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    /// Classes per client in `k_class` mode.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Inclusive per-client sample count range in `unbalanced_users` mode.
    #[serde(default = "default_volume_range")]
    pub volume_range: (usize, usize),
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Each client shifts every label by a fixed offset drawn from
    /// `[-rater_bias, rater_bias]`, clamped to the label range.
    #[serde(default)]
    pub rater_bias: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    1
}

fn default_volume_range() -> (usize, usize) {
    (60, 290)
}

fn default_train_fraction() -> f64 {
    0.8
}

impl PartitionSpec {
    pub fn k_class(num_clients: usize, k: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::KClass,
            num_clients,
            k,
            volume_range: default_volume_range(),
            train_fraction: default_train_fraction(),
            rater_bias: 0,
            seed,
        }
    }

    pub fn unbalanced(num_clients: usize, volume_range: (usize, usize), seed: u64) -> Self {
        Self {
            mode: PartitionMode::UnbalancedUsers,
            num_clients,
            k: default_k(),
            volume_range,
            train_fraction: default_train_fraction(),
            rater_bias: 0,
            seed,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        match self.mode {
            PartitionMode::KClass => {
                if self.k == 0 || self.k > num_classes {
                    return Err(Error::Config(format!(
                        "k = {} must lie in 1..={num_classes}",
                        self.k
                    )));
                }
                if self.num_clients * self.k < num_classes {
                    return Err(Error::Config(format!(
                        "{} clients x {} classes each cannot cover {num_classes} classes",
                        self.num_clients, self.k
                    )));
                }
            }
            PartitionMode::UnbalancedUsers => {
                let (lo, hi) = self.volume_range;
                if lo == 0 || lo > hi {
                    return Err(Error::Config(format!("invalid volume range ({lo}, {hi})")));
                }
            }
        }
        Ok(())
    }
}

/// One client's share: indices into the source dataset and the materialized
/// samples (labels possibly rewritten by the client's rater function).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub indices: Vec<usize>,
    pub data: LabeledDataset,
}

/// Classes held by client `j` under the cyclic assignment: `k` consecutive
/// classes (mod C) starting at `⌊j·C/N⌋`.
pub fn assigned_classes(client: usize, num_clients: usize, num_classes: usize, k: usize) -> Vec<usize> {
    let start = client * num_classes / num_clients;
    (0..k).map(|i| (start + i) % num_classes).collect()
}

pub fn partition_k_class(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.mode != PartitionMode::KClass {
        return Err(Error::Config("partition_k_class needs mode k_class".into()));
    }
    spec.validate(ds.num_classes)?;
    let c = ds.num_classes;
    let n = spec.num_clients;

    let mut eligible: Vec<Vec<usize>> = vec![Vec::new(); c];
    for j in 0..n {
        for class in assigned_classes(j, n, c, spec.k) {
            eligible[class].push(j);
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.y].push(i);
    }

    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, mut members) in by_class.into_iter().enumerate() {
        let owners = &eligible[class];
        if owners.is_empty() {
            continue;
        }
        let mut rng = seed::derive(spec.seed, Party::Data, class as u64, Purpose::Partition);
        members.shuffle(&mut rng);
        let q = members.len() / owners.len();
        let r = members.len() % owners.len();
        let mut rest = members.as_slice();
        for (pos, &j) in owners.iter().enumerate() {
            let take = q + usize::from(pos < r);
            let (share, tail) = rest.split_at(take);
            per_client[j].extend_from_slice(share);
            rest = tail;
        }
    }

    Ok(per_client
        .into_iter()
        .map(|mut indices| {
            indices.sort_unstable();
            let data = ds.subset(&indices);
            ClientShard { indices, data }
        })
        .collect())
}

pub fn partition_unbalanced(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.mode != PartitionMode::UnbalancedUsers {
        return Err(Error::Config("partition_unbalanced needs mode unbalanced_users".into()));
    }
    spec.validate(ds.num_classes)?;
    let (lo, hi) = spec.volume_range;
    if hi > ds.len() {
        return Err(Error::Config(format!(
            "volume range up to {hi} exceeds dataset size {}",
            ds.len()
        )));
    }
    let bias = spec.rater_bias as i64;
    let top = ds.num_classes as i64 - 1;
    Ok((0..spec.num_clients)
        .map(|j| {
            let mut rng = seed::derive(spec.seed, Party::Client(j), 0, Purpose::Partition);
            let volume = rng.random_range(lo..=hi);
            let mut indices = index::sample(&mut rng, ds.len(), volume).into_vec();
            indices.sort_unstable();
            let mut data = ds.subset(&indices);
            if bias > 0 {
                let mut rater = seed::derive(spec.seed, Party::Client(j), 0, Purpose::Relabel);
                let shift = rater.random_range(-bias..=bias);
                for s in &mut data.samples {
                    s.y = (s.y as i64 + shift).clamp(0, top) as usize;
                }
            }
            ClientShard { indices, data }
        })
        .collect())
}

pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    match spec.mode {
        PartitionMode::KClass => partition_k_class(ds, spec),
        PartitionMode::UnbalancedUsers => partition_unbalanced(ds, spec),
    }
}

/// Seeded shuffle, then the first `⌈fraction·n⌉` samples train and the rest test.
pub fn train_test_split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1], got {fraction}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seed::derive(seed, Party::Data, 0, Purpose::Split));
    // absorb representation error such as 0.7 * 10 = 7.000000000000001
    let n_train = ((fraction * ds.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_train = n_train.min(ds.len());
    let (train, test) = order.split_at(n_train);
    Ok((ds.subset(train), ds.subset(test)))
}

/// Client → sample indices, written for reproducibility audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub num_classes: usize,
    pub dataset_size: usize,
    pub seed: u64,
    pub clients: Vec<ClientManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client: usize,
    pub indices: Vec<usize>,
    /// Label → sample count as seen by this client.
    pub label_counts: BTreeMap<usize, usize>,
}

impl PartitionManifest {
    pub fn new(ds: &LabeledDataset, spec: &PartitionSpec, shards: &[ClientShard]) -> Self {
        Self {
            mode: spec.mode,
            num_clients: spec.num_clients,
            num_classes: ds.num_classes,
            dataset_size: ds.len(),
            seed: spec.seed,
            clients: shards
                .iter()
                .enumerate()
                .map(|(j, s)| ClientManifest {
                    client: j,
                    indices: s.indices.clone(),
                    label_counts: s
                        .data
                        .class_counts()
                        .into_iter()
                        .enumerate()
                        .filter(|(_, n)| *n > 0)
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Reads `f0,…,f{d-1},label` rows; the class count is `max label + 1`.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 || &headers[headers.len() - 1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be f0,...,label".into(),
        });
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let (label, features) = record
            .iter()
            .collect::<Vec<_>>()
            .split_last()
            .map(|(l, f)| (l.to_string(), f.iter().map(|s| s.to_string()).collect::<Vec<_>>()))
            .expect("header has >= 2 columns");
        let x = features
            .iter()
            .map(|v| {
                v.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("bad feature value {v:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let y = label.parse::<usize>().map_err(|_| Error::Parse {
            line,
            msg: format!("label {label:?} is not a non-negative integer"),
        })?;
        samples.push(Sample::new(x, y));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = samples.iter().map(|s| s.y).max().unwrap_or(0) + 1;
    LabeledDataset::new(samples, num_classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Writes features with shortest round-trip decimal encoding.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let dim = ds.dim().ok_or(Error::EmptyDataset)?;
    let mut out = String::new();
    for i in 0..dim {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label\n");
    for s in &ds.samples {
        for v in &s.x {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{}\n", s.y));
    }
    write_atomic(path, out.as_bytes())
}
