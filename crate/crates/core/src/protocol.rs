//! Server and client state machines for federated training with private
//! personalization layers, and the round loop that drives them.
//!
//! Each round the server broadcasts the current base weights, every client
//! runs local SGD on its base copy together with its own personalization
//! layers, sends back only the base part, and the server replaces the base by
//! the `n_j`-weighted mean of what it received. With zero personalization
//! layers this is exactly federated averaging.
//!
//! All traffic goes through [`ServerState`], which records one
//! [`LogEntry`] per message. Personalization weights have a payload kind so
//! that a leak is representable, but the server refuses to accept them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, WeightRole};
use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::metrics::{self, ClientMetrics};
use crate::nn::{self, Sample, SgdConfig, Trainable, WeightSet};
use crate::seed::{self, Party, Purpose};
use crate::split::ModelSpec;

/// Tolerance on `Σ γ_j = 1`.
pub const GAMMA_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub num_clients: usize,
    pub rounds: usize,
    pub sgd: SgdConfig,
    pub fine_tune: bool,
    pub master_seed: u64,
    pub partition: PartitionSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.sgd.validate()?;
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.fine_tune && self.spec.k_personal == 0 {
            return Err(Error::Config("fine_tune needs at least one personalization layer".into()));
        }
        Ok(())
    }
}

/// Per-round learning rate `η_j^(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    Constant(f64),
    /// Rate for round `k` is entry `k - 1`; the last entry repeats.
    PerRound(Vec<f64>),
}

impl EtaSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            EtaSchedule::Constant(eta) => *eta,
            EtaSchedule::PerRound(rates) => {
                let i = round.saturating_sub(1).min(rates.len().saturating_sub(1));
                rates.get(i).copied().unwrap_or(0.0)
            }
        }
    }
}

/// One client's train/test data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Client(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    SampleCount,
    BaseWeights,
    PersonalWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    SampleCount(usize),
    BaseWeights(WeightSet),
    PersonalWeights(WeightSet),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::SampleCount(_) => PayloadKind::SampleCount,
            Payload::BaseWeights(_) => PayloadKind::BaseWeights,
            Payload::PersonalWeights(_) => PayloadKind::PersonalWeights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: usize,
    pub from: Endpoint,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: PayloadKind,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub personal: WeightSet,
    pub sgd: SgdConfig,
    pub eta_schedule: EtaSchedule,
    master_seed: u64,
}

impl ClientState {
    /// Draws the personalization layers from this client's own init stream.
    pub fn new(id: usize, data: ClientData, spec: &ModelSpec, sgd: SgdConfig, master_seed: u64) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Config(format!("client {id} has no training samples")));
        }
        let mut rng = seed::derive(master_seed, Party::Client(id), 0, Purpose::Init);
        Ok(Self {
            id,
            train: data.train,
            test: data.test,
            personal: WeightSet::init(spec.personal_layers(), &mut rng),
            sgd,
            eta_schedule: EtaSchedule::Constant(sgd.eta),
            master_seed,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.train.len()
    }

    pub fn sample_count_message(&self) -> Message {
        Message {
            round: 0,
            from: Endpoint::Client(self.id),
            payload: Payload::SampleCount(self.num_samples()),
        }
    }

    fn check_base(&self, spec: &ModelSpec, base_in: &WeightSet) -> Result<()> {
        let ok = base_in.len() == spec.k_base()
            && base_in
                .layers()
                .iter()
                .zip(spec.base_layers())
                .all(|(w, s)| w.in_dim() == s.in_dim && w.out_dim() == s.out_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "client {} received base weights that do not match the model",
                self.id
            )))
        }
    }

    /// Local SGD on `(base_in, personal)` for round `round`. The updated
    /// personalization layers stay here; only the base goes back.
    pub fn client_round(&mut self, spec: &ModelSpec, base_in: &WeightSet, round: usize) -> Result<Message> {
        self.check_base(spec, base_in)?;
        let cfg = SgdConfig {
            eta: self.eta_schedule.at(round),
            ..self.sgd
        };
        let mut rng = seed::derive(self.master_seed, Party::Client(self.id), round as u64, Purpose::Sgd);
        let (base_out, personal) = nn::sgd(spec, base_in, &self.personal, &self.train, &cfg, &mut rng)?;
        self.personal = personal;
        Ok(Message {
            round,
            from: Endpoint::Client(self.id),
            payload: Payload::BaseWeights(base_out),
        })
    }

    /// One epoch over the local data updating only the personalization
    /// layers, with `base_in` held fixed.
    pub fn fine_tune(&mut self, spec: &ModelSpec, base_in: &WeightSet, round: usize) -> Result<()> {
        if spec.k_personal == 0 {
            return Err(Error::Usage("fine-tuning needs at least one personalization layer".into()));
        }
        self.check_base(spec, base_in)?;
        let cfg = SgdConfig {
            eta: self.eta_schedule.at(round),
            epochs: 1,
            batch_size: self.sgd.batch_size,
        };
        let mut rng = seed::derive(self.master_seed, Party::Client(self.id), round as u64, Purpose::FineTune);
        let (_, personal) = nn::sgd_masked(
            spec,
            base_in,
            &self.personal,
            &self.train,
            &cfg,
            Trainable::PersonalOnly,
            &mut rng,
        )?;
        self.personal = personal;
        Ok(())
    }

    pub fn evaluate(&self, spec: &ModelSpec, base: &WeightSet, round: usize) -> Result<ClientMetrics> {
        let test = metrics::evaluate(spec, base, &self.personal, &self.test)?;
        let train = metrics::evaluate(spec, base, &self.personal, &self.train)?;
        Ok(ClientMetrics {
            client: self.id,
            round,
            test_accuracy: test.accuracy,
            train_loss: train.loss,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub base: WeightSet,
    pub gammas: Vec<f64>,
    message_log: Vec<LogEntry>,
}

/// `γ_j = n_j / Σ n`.
pub fn gammas(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if let Some(j) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("client {j} reported zero samples")));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

impl ServerState {
    /// Base weights from the server's init stream and aggregation weights
    /// from the clients' sample counts, fixed for the whole run.
    pub fn init(cfg: &RunConfig, sample_counts: &[Message]) -> Result<Self> {
        let mut server = Self {
            base: WeightSet::init(
                cfg.spec.base_layers(),
                &mut seed::derive(cfg.master_seed, Party::Server, 0, Purpose::Init),
            ),
            gammas: Vec::new(),
            message_log: Vec::new(),
        };
        let mut sizes = Vec::with_capacity(sample_counts.len());
        for (j, msg) in sample_counts.iter().enumerate() {
            server.record(msg)?;
            match (&msg.from, &msg.payload) {
                (Endpoint::Client(id), Payload::SampleCount(n)) if *id == j => sizes.push(*n),
                _ => {
                    return Err(Error::Protocol(format!(
                        "expected sample count from client {j}, got {:?} from {:?}",
                        msg.payload.kind(),
                        msg.from
                    )))
                }
            }
        }
        server.gammas = gammas(&sizes)?;
        Ok(server)
    }

    pub fn message_log(&self) -> &[LogEntry] {
        &self.message_log
    }

    fn record(&mut self, msg: &Message) -> Result<()> {
        if msg.payload.kind() == PayloadKind::PersonalWeights {
            return Err(Error::Protocol(format!(
                "{:?} tried to send personalization weights to the server",
                msg.from
            )));
        }
        self.message_log.push(LogEntry {
            round: msg.round,
            from: msg.from,
            to: Endpoint::Server,
            kind: msg.payload.kind(),
        });
        Ok(())
    }

    /// Current base weights addressed to every client.
    pub fn broadcast(&mut self, round: usize) -> &WeightSet {
        for j in 0..self.gammas.len() {
            self.message_log.push(LogEntry {
                round,
                from: Endpoint::Server,
                to: Endpoint::Client(j),
                kind: PayloadKind::BaseWeights,
            });
        }
        &self.base
    }

    /// Receives one base update per client, in client-id order, and replaces
    /// the global base with their weighted mean.
    pub fn receive_and_aggregate(&mut self, round: usize, updates: Vec<Message>) -> Result<()> {
        if updates.len() != self.gammas.len() {
            return Err(Error::Protocol(format!(
                "round {round}: expected {} updates, got {}",
                self.gammas.len(),
                updates.len()
            )));
        }
        let mut weighted = Vec::with_capacity(updates.len());
        for (j, msg) in updates.into_iter().enumerate() {
            self.record(&msg)?;
            if msg.from != Endpoint::Client(j) || msg.round != round {
                return Err(Error::Protocol(format!(
                    "round {round}: update {j} came from {:?} for round {}",
                    msg.from, msg.round
                )));
            }
            match msg.payload {
                Payload::BaseWeights(w) => weighted.push((w, self.gammas[j])),
                other => {
                    return Err(Error::Protocol(format!(
                        "round {round}: client {j} sent {:?} instead of base weights",
                        other.kind()
                    )))
                }
            }
        }
        self.base = aggregate(&weighted)?;
        Ok(())
    }
}

/// Weighted mean `Σ γ_j W_j`.
///
/// Evaluated per element as `W_0 + Σ_{j≥1} γ_j (W_j − W_0)` in ascending
/// client order, skipping zero differences; with `Σ γ_j = 1` this is the same
/// convex combination, and identical inputs come back bit for bit.
pub fn aggregate(updates: &[(WeightSet, f64)]) -> Result<WeightSet> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    if let Some(j) = updates.iter().position(|(w, _)| !w.same_shape(first)) {
        return Err(Error::Protocol(format!("update {j} has a different shape")));
    }
    let flat: Vec<Vec<f64>> = updates.iter().map(|(w, _)| w.values().collect()).collect();
    let parts: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
    let gammas: Vec<f64> = updates.iter().map(|(_, g)| *g).collect();
    let mut out = first.clone();
    for (dst, v) in out.values_mut().zip(aggregate_flat(&parts, &gammas)?) {
        *dst = v;
    }
    Ok(out)
}

/// [`aggregate`] over equally long flat parameter vectors.
pub fn aggregate_flat(parts: &[&[f64]], gammas: &[f64]) -> Result<Vec<f64>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    if parts.len() != gammas.len() {
        return Err(Error::Protocol(format!(
            "{} updates but {} aggregation weights",
            parts.len(),
            gammas.len()
        )));
    }
    if let Some(j) = parts.iter().position(|p| p.len() != first.len()) {
        return Err(Error::Protocol(format!("update {j} has a different length")));
    }
    if gammas.iter().any(|g| g.is_nan() || *g <= 0.0) {
        return Err(Error::Config("aggregation weights must be positive".into()));
    }
    let sum: f64 = gammas.iter().sum();
    if (sum - 1.0).abs() > GAMMA_TOLERANCE {
        return Err(Error::Config(format!("aggregation weights sum to {sum}, not 1")));
    }
    let mut out = first.to_vec();
    for (part, g) in parts.iter().zip(gammas).skip(1) {
        for ((acc, v), anchor) in out.iter_mut().zip(*part).zip(first) {
            let d = v - anchor;
            if d != 0.0 {
                *acc += g * d;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Checksum of the aggregated base after this round.
    pub base_checksum: String,
    pub clients: Vec<ClientMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundHistory {
    pub rounds: Vec<RoundRecord>,
}

impl RoundHistory {
    pub fn metrics(&self) -> impl Iterator<Item = &ClientMetrics> {
        self.rounds.iter().flat_map(|r| &r.clients)
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client-local work; `0` or `1` runs serially.
    pub threads: usize,
    /// Write checkpoints every this many rounds (`0` disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct FederationOutcome {
    pub history: RoundHistory,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Runs `f` over every client, concurrently when `pool` is set. Results come
/// back in client order either way.
fn for_each_client<T, F>(pool: Option<&rayon::ThreadPool>, clients: &mut [ClientState], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync,
{
    match pool {
        Some(pool) => pool.install(|| clients.par_iter_mut().map(&f).collect()),
        None => clients.iter_mut().map(f).collect(),
    }
}

pub fn build_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn run_federation(cfg: &RunConfig, data: Vec<ClientData>, opts: &RunOptions) -> Result<FederationOutcome> {
    cfg.validate()?;
    if data.len() != cfg.num_clients {
        return Err(Error::Config(format!(
            "{} client datasets for {} clients",
            data.len(),
            cfg.num_clients
        )));
    }
    if let Some(j) = data.iter().position(|d| d.test.is_empty()) {
        return Err(Error::Config(format!("client {j} has an empty test set")));
    }
    let pool = build_pool(opts.threads)?;
    let spec = &cfg.spec;

    let mut clients = data
        .into_iter()
        .enumerate()
        .map(|(j, d)| ClientState::new(j, d, spec, cfg.sgd, cfg.master_seed))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<Message> = clients.iter().map(ClientState::sample_count_message).collect();
    let mut server = ServerState::init(cfg, &counts)?;
    server.broadcast(0);

    let mut history = RoundHistory::default();
    for round in 1..=cfg.rounds {
        let base_in = server.base.clone();
        let updates = for_each_client(pool.as_ref(), &mut clients, |c| {
            if cfg.fine_tune {
                c.fine_tune(spec, &base_in, round)?;
            }
            c.client_round(spec, &base_in, round)
        })?;
        server.receive_and_aggregate(round, updates)?;
        let base = server.broadcast(round).clone();
        let metrics = for_each_client(pool.as_ref(), &mut clients, |c| c.evaluate(spec, &base, round))?;
        history.rounds.push(RoundRecord {
            round,
            base_checksum: base.checksum(),
            clients: metrics,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && round % opts.checkpoint_every == 0 {
                write_checkpoint(
                    &dir.join(format!("round_{round:04}")),
                    spec.k_personal,
                    &server.base,
                    clients.iter().map(|c| &c.personal),
                )?;
            }
        }
    }
    Ok(FederationOutcome {
        history,
        server,
        clients,
    })
}

/// Server base plus every client's personalization layers.
pub fn write_checkpoint<'a>(
    dir: &Path,
    k_personal: usize,
    base: &WeightSet,
    personal: impl IntoIterator<Item = &'a WeightSet>,
) -> Result<()> {
    checkpoint::save(dir, "server_base", base, WeightRole::Base, k_personal)?;
    for (j, p) in personal.into_iter().enumerate() {
        checkpoint::save(dir, &format!("client_{j:03}_personal"), p, WeightRole::Personal, k_personal)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::LayerWeights;
    use crate::tensor::Tensor;

    fn scalar_set(v: f64) -> WeightSet {
        WeightSet::new(vec![LayerWeights::new(Tensor::matrix(1, 1, vec![v]).unwrap(), Tensor::zeros(vec![1])).unwrap()])
            .unwrap()
    }

    fn cfg(spec: ModelSpec, n: usize) -> RunConfig {
        RunConfig {
            spec,
            num_clients: n,
            rounds: 1,
            sgd: SgdConfig { eta: 0.1, epochs: 1, batch_size: 4 },
            fine_tune: false,
            master_seed: 1,
            partition: PartitionSpec::k_class(n, 1, 1),
        }
    }

    fn counts(sizes: &[usize]) -> Vec<Message> {
        sizes
            .iter()
            .enumerate()
            .map(|(j, &n)| Message { round: 0, from: Endpoint::Client(j), payload: Payload::SampleCount(n) })
            .collect()
    }

    #[test]
    fn gammas_from_sizes() {
        assert_eq!(gammas(&[1, 1, 1, 1]).unwrap(), vec![0.25; 4]);
        assert_eq!(gammas(&[1, 3]).unwrap(), vec![0.25, 0.75]);
        let g = gammas(&[500; 10]).unwrap();
        assert!(g.iter().all(|&x| x == 0.1));
        assert!(matches!(gammas(&[2, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn server_init_logs_counts() {
        let spec = ModelSpec::mlp(&[2, 3, 2], 1).unwrap();
        let s = ServerState::init(&cfg(spec.clone(), 2), &counts(&[1, 3])).unwrap();
        assert_eq!(s.gammas, vec![0.25, 0.75]);
        assert_eq!(s.base.len(), 1);
        assert_eq!(s.message_log().len(), 2);
        assert!(ServerState::init(&cfg(spec, 2), &counts(&[1, 0])).is_err());
    }

    #[test]
    fn server_rejects_personal_payload() {
        let spec = ModelSpec::mlp(&[1, 1, 1], 1).unwrap();
        let mut s = ServerState::init(&cfg(spec, 1), &counts(&[4])).unwrap();
        let leak = Message { round: 1, from: Endpoint::Client(0), payload: Payload::PersonalWeights(scalar_set(1.0)) };
        assert!(matches!(s.receive_and_aggregate(1, vec![leak]), Err(Error::Protocol(_))));
        assert!(s.message_log().iter().all(|e| e.kind != PayloadKind::PersonalWeights));
    }

    #[test]
    fn aggregate_fixed_point_and_weighted_mean() {
        let w = scalar_set(1.5);
        assert_eq!(aggregate(&[(w.clone(), 0.5), (w.clone(), 0.5)]).unwrap(), w);
        let out = aggregate(&[(scalar_set(0.0), 0.25), (scalar_set(4.0), 0.75)]).unwrap();
        assert_eq!(out, scalar_set(3.0));
    }

    #[test]
    fn aggregate_errors() {
        let two = ModelSpec::mlp(&[2, 1], 0).unwrap();
        let w2 = WeightSet::init(&two.layers, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            aggregate(&[(scalar_set(1.0), 0.5), (w2, 0.5)]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            aggregate(&[(scalar_set(1.0), 0.5), (scalar_set(2.0), 0.6)]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_eta_round_changes_nothing() {
        let spec = ModelSpec::mlp(&[2, 3, 2], 1).unwrap();
        let data = ClientData {
            train: vec![Sample::new(vec![1.0, 2.0], 1), Sample::new(vec![-1.0, 0.5], 0)],
            test: vec![Sample::new(vec![0.0, 0.0], 0)],
        };
        let mut sgd = SgdConfig { eta: 0.0, epochs: 2, batch_size: 1 };
        let mut c = ClientState::new(0, data, &spec, sgd, 3).unwrap();
        let base = WeightSet::init(spec.base_layers(), &mut ChaCha8Rng::seed_from_u64(1));
        let before = c.personal.clone();
        let msg = c.client_round(&spec, &base, 1).unwrap();
        assert_eq!(msg.payload, Payload::BaseWeights(base.clone()));
        assert_eq!(c.personal, before);
        c.fine_tune(&spec, &base, 1).unwrap();
        assert_eq!(c.personal, before);
        sgd.eta = 0.1;
        c.sgd = sgd;
        c.eta_schedule = EtaSchedule::PerRound(vec![0.0, 0.1]);
        c.client_round(&spec, &base, 1).unwrap();
        assert_eq!(c.personal, before);
        c.client_round(&spec, &base, 2).unwrap();
        assert_ne!(c.personal, before);
    }

    #[test]
    fn client_rejects_wrong_base_shape() {
        let spec = ModelSpec::mlp(&[2, 3, 2], 1).unwrap();
        let data = ClientData { train: vec![Sample::new(vec![1.0, 2.0], 1)], test: vec![] };
        let mut c = ClientState::new(0, data, &spec, SgdConfig { eta: 0.1, epochs: 1, batch_size: 1 }, 3).unwrap();
        assert!(matches!(c.client_round(&spec, &scalar_set(1.0), 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn fine_tune_without_personal_layers_is_usage_error() {
        let spec = ModelSpec::mlp(&[2, 2], 0).unwrap();
        let data = ClientData { train: vec![Sample::new(vec![1.0, 2.0], 1)], test: vec![] };
        let mut c = ClientState::new(0, data, &spec, SgdConfig { eta: 0.1, epochs: 1, batch_size: 1 }, 3).unwrap();
        let base = WeightSet::init(spec.base_layers(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(c.fine_tune(&spec, &base, 1), Err(Error::Usage(_))));
    }
}
