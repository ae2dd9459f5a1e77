use fedper_core::data::PartitionSpec;
use fedper_core::nn;
use fedper_core::protocol::{
    self, run_federation, ClientData, ClientState, Endpoint, Message, Payload, RunConfig, RunOptions, ServerState,
};
use fedper_core::seed::{self, Party, Purpose};
use fedper_core::{Activation, Error, LayerSpec, LayerWeights, ModelSpec, Sample, SgdConfig, Tensor, WeightSet};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn layer(out: usize, inp: usize, w: &[f64], b: &[f64]) -> LayerWeights {
    LayerWeights::new(Tensor::matrix(out, inp, w.to_vec()).unwrap(), Tensor::from_vec(b.to_vec())).unwrap()
}

/// 2 → 2 → 3, both layers linear, last one personal.
fn linear_spec() -> ModelSpec {
    ModelSpec::new(
        vec![
            LayerSpec::new(2, 2, Activation::Identity),
            LayerSpec::new(2, 3, Activation::Identity),
        ],
        1,
    )
    .unwrap()
}

fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| bi + (0..cols).map(|k| w[i * cols + k] * x[k]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Fixture {
    spec: ModelSpec,
    base: WeightSet,
    personal: WeightSet,
    sample: Sample,
    eta: f64,
}

fn fixture() -> Fixture {
    Fixture {
        spec: linear_spec(),
        base: WeightSet::new(vec![layer(2, 2, &[0.5, -0.2, 0.1, 0.3], &[0.05, -0.1])]).unwrap(),
        personal: WeightSet::new(vec![layer(3, 2, &[0.2, 0.4, -0.3, 0.1, 0.6, -0.5], &[0.0, 0.1, -0.1])]).unwrap(),
        sample: Sample::new(vec![1.5, -0.5], 2),
        eta: 0.3,
    }
}

/// Hand-derived single-sample gradient step on the 2-layer linear net.
fn closed_form_step(f: &Fixture, update_base: bool) -> (Vec<f64>, Vec<f64>) {
    let w1: Vec<f64> = f.base.layers()[0].weight.data().to_vec();
    let b1: Vec<f64> = f.base.layers()[0].bias.data().to_vec();
    let w2: Vec<f64> = f.personal.layers()[0].weight.data().to_vec();
    let b2: Vec<f64> = f.personal.layers()[0].bias.data().to_vec();
    let x = &f.sample.x;
    let h = matvec(&w1, &b1, x);
    let mut g2 = softmax(&matvec(&w2, &b2, &h));
    g2[f.sample.y] -= 1.0;
    let g1: Vec<f64> = (0..2).map(|k| (0..3).map(|i| w2[i * 2 + k] * g2[i]).sum()).collect();

    let mut base = Vec::new();
    for i in 0..2 {
        for k in 0..2 {
            let d = if update_base { f.eta * g1[i] * x[k] } else { 0.0 };
            base.push(w1[i * 2 + k] - d);
        }
    }
    for i in 0..2 {
        base.push(b1[i] - if update_base { f.eta * g1[i] } else { 0.0 });
    }
    let mut personal = Vec::new();
    for i in 0..3 {
        for k in 0..2 {
            personal.push(w2[i * 2 + k] - f.eta * g2[i] * h[k]);
        }
    }
    for i in 0..3 {
        personal.push(b2[i] - f.eta * g2[i]);
    }
    (base, personal)
}

fn client_with(f: &Fixture, epochs: usize) -> ClientState {
    let data = ClientData {
        train: vec![f.sample.clone()],
        test: vec![f.sample.clone()],
    };
    let sgd = SgdConfig { eta: f.eta, epochs, batch_size: 4 };
    let mut c = ClientState::new(0, data, &f.spec, sgd, 11).unwrap();
    c.personal = f.personal.clone();
    c
}

fn assert_close(got: impl Iterator<Item = f64>, want: &[f64]) {
    let got: Vec<f64> = got.collect();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn client_round_matches_closed_form_single_sample_step() {
    let f = fixture();
    let mut c = client_with(&f, 1);
    let msg = c.client_round(&f.spec, &f.base, 1).unwrap();
    let (base, personal) = closed_form_step(&f, true);
    match msg.payload {
        Payload::BaseWeights(w) => assert_close(w.values(), &base),
        other => panic!("unexpected payload {:?}", other.kind()),
    }
    assert_close(c.personal.values(), &personal);
    assert_eq!(msg.from, Endpoint::Client(0));
    assert_eq!(msg.round, 1);
}

#[test]
fn fine_tune_moves_only_personal_layers() {
    let f = fixture();
    let mut c = client_with(&f, 5);
    let before = f.base.clone();
    c.fine_tune(&f.spec, &f.base, 1).unwrap();
    let (_, personal) = closed_form_step(&f, false);
    // one epoch regardless of the configured epoch count
    assert_close(c.personal.values(), &personal);
    assert_eq!(f.base, before);
}

#[test]
fn fine_tune_without_personal_layers_is_usage_error() {
    let spec = ModelSpec::mlp(&[2, 3], 0).unwrap();
    let data = ClientData {
        train: vec![Sample::new(vec![1.0, 0.0], 0)],
        test: vec![],
    };
    let mut c = ClientState::new(0, data, &spec, SgdConfig { eta: 0.1, epochs: 1, batch_size: 1 }, 1).unwrap();
    let base = WeightSet::init(spec.base_layers(), &mut StdRng::seed_from_u64(0));
    assert!(matches!(c.fine_tune(&spec, &base, 1), Err(Error::Usage(_))));
}

fn random_samples(rng: &mut StdRng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Sample::new(x, rng.random_range(0..classes))
        })
        .collect()
}

#[test]
fn without_personal_layers_client_round_is_a_plain_local_update() {
    let spec = ModelSpec::mlp(&[4, 6, 3], 0).unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let train = random_samples(&mut rng, 37, 4, 3);
    let base = WeightSet::init(spec.base_layers(), &mut rng);
    let sgd = SgdConfig { eta: 0.05, epochs: 3, batch_size: 8 };
    let master = 77;
    let data = ClientData { train: train.clone(), test: vec![] };
    let mut c = ClientState::new(2, data, &spec, sgd, master).unwrap();
    let msg = c.client_round(&spec, &base, 4).unwrap();

    let mut stream = seed::derive(master, Party::Client(2), 4, Purpose::Sgd);
    let (want, personal) = nn::sgd(&spec, &base, &WeightSet::empty(), &train, &sgd, &mut stream).unwrap();
    assert!(personal.is_empty());
    assert_eq!(msg.payload, Payload::BaseWeights(want));
}

fn counts(sizes: &[usize]) -> Vec<Message> {
    sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| Message {
            round: 0,
            from: Endpoint::Client(j),
            payload: Payload::SampleCount(n),
        })
        .collect()
}

fn run_config(spec: ModelSpec, n: usize, rounds: usize) -> RunConfig {
    RunConfig {
        spec,
        num_clients: n,
        rounds,
        sgd: SgdConfig { eta: 0.1, epochs: 2, batch_size: 5 },
        fine_tune: false,
        master_seed: 9,
        partition: PartitionSpec::k_class(n, 1, 9),
    }
}

#[test]
fn server_refuses_personal_weights() {
    let spec = ModelSpec::mlp(&[2, 3, 2], 1).unwrap();
    let cfg = run_config(spec.clone(), 2, 1);
    let mut server = ServerState::init(&cfg, &counts(&[3, 5])).unwrap();
    let base = server.base.clone();
    let personal = WeightSet::init(spec.personal_layers(), &mut StdRng::seed_from_u64(1));
    let updates = vec![
        Message { round: 1, from: Endpoint::Client(0), payload: Payload::BaseWeights(base.clone()) },
        Message { round: 1, from: Endpoint::Client(1), payload: Payload::PersonalWeights(personal) },
    ];
    assert!(matches!(server.receive_and_aggregate(1, updates), Err(Error::Protocol(_))));
}

#[test]
fn server_expects_updates_in_client_order() {
    let spec = ModelSpec::mlp(&[2, 2], 0).unwrap();
    let cfg = run_config(spec, 2, 1);
    let mut server = ServerState::init(&cfg, &counts(&[1, 1])).unwrap();
    let b = server.base.clone();
    let updates = vec![
        Message { round: 1, from: Endpoint::Client(1), payload: Payload::BaseWeights(b.clone()) },
        Message { round: 1, from: Endpoint::Client(0), payload: Payload::BaseWeights(b) },
    ];
    assert!(matches!(server.receive_and_aggregate(1, updates), Err(Error::Protocol(_))));
}

#[test]
fn gammas_follow_sample_counts() {
    let g = protocol::gammas(&[10, 30, 60]).unwrap();
    assert_eq!(g, vec![0.1, 0.3, 0.6]);
    assert!((g.iter().sum::<f64>() - 1.0).abs() <= protocol::GAMMA_TOLERANCE);
    assert!(protocol::gammas(&[4, 0]).is_err());
    assert!(protocol::gammas(&[]).is_err());
}

fn federation_data(n: usize, seed: u64) -> Vec<ClientData> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let size = rng.random_range(8..30);
            ClientData {
                train: random_samples(&mut rng, size, 3, 2),
                test: random_samples(&mut rng, 5, 3, 2),
            }
        })
        .collect()
}

#[test]
fn single_client_server_adopts_its_update() {
    let spec = ModelSpec::mlp(&[3, 4, 2], 1).unwrap();
    let cfg = run_config(spec.clone(), 1, 1);
    let data = federation_data(1, 3);
    let out = run_federation(&cfg, data.clone(), &RunOptions::default()).unwrap();

    let server0 = ServerState::init(&cfg, &counts(&[data[0].train.len()])).unwrap();
    let mut c = ClientState::new(0, data[0].clone(), &spec, cfg.sgd, cfg.master_seed).unwrap();
    let msg = c.client_round(&spec, &server0.base, 1).unwrap();
    assert_eq!(msg.payload, Payload::BaseWeights(out.server.base.clone()));
    assert_eq!(c.personal, out.clients[0].personal);
}

#[test]
fn history_has_one_entry_per_client_and_round() {
    let spec = ModelSpec::mlp(&[3, 4, 2], 1).unwrap();
    let out = run_federation(&run_config(spec, 4, 3), federation_data(4, 8), &RunOptions::default()).unwrap();
    assert_eq!(out.history.rounds.len(), 3);
    for (k, r) in out.history.rounds.iter().enumerate() {
        assert_eq!(r.round, k + 1);
        let ids: Vec<usize> = r.clients.iter().map(|m| m.client).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
    assert_eq!(out.history.last().unwrap().base_checksum, out.server.base.checksum());
}

#[test]
fn thread_count_does_not_change_results() {
    let spec = ModelSpec::mlp(&[3, 5, 4, 2], 2).unwrap();
    let mut cfg = run_config(spec, 6, 4);
    cfg.fine_tune = true;
    let data = federation_data(6, 21);
    let serial = run_federation(&cfg, data.clone(), &RunOptions::default()).unwrap();
    let parallel = run_federation(&cfg, data, &RunOptions { threads: 4, ..Default::default() }).unwrap();
    assert_eq!(serial.history, parallel.history);
    assert_eq!(serial.server.base, parallel.server.base);
    let a: Vec<_> = serial.clients.iter().map(|c| &c.personal).collect();
    let b: Vec<_> = parallel.clients.iter().map(|c| &c.personal).collect();
    assert_eq!(a, b);
    assert_eq!(serial.server.message_log(), parallel.server.message_log());
}

#[test]
fn clients_start_from_distinct_personal_layers() {
    let spec = ModelSpec::mlp(&[3, 4, 2], 1).unwrap();
    let data = federation_data(2, 4);
    let sgd = SgdConfig { eta: 0.1, epochs: 1, batch_size: 4 };
    let a = ClientState::new(0, data[0].clone(), &spec, sgd, 1).unwrap();
    let b = ClientState::new(1, data[1].clone(), &spec, sgd, 1).unwrap();
    assert_ne!(a.personal, b.personal);
}

#[test]
fn mismatched_base_is_rejected() {
    let f = fixture();
    let mut c = client_with(&f, 1);
    let wrong = WeightSet::new(vec![layer(2, 3, &[0.0; 6], &[0.0; 2])]).unwrap();
    assert!(matches!(c.client_round(&f.spec, &wrong, 1), Err(Error::Protocol(_))));
}
