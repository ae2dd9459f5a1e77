//! Plain federated averaging over the whole model.
//!
//! Kept separate from [`crate::protocol`] on purpose: it has no notion of a
//! base/personal split, no message log and its own averaging loop, and serves
//! as the reference the zero-personalization-layer protocol must reproduce.
//! It shares only the random-stream discipline (server init stream, one SGD
//! stream per client and round) and the SGD and evaluation primitives.

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, WeightSet};
use crate::protocol::{build_pool, write_checkpoint, ClientData, RoundHistory, RoundRecord, RunConfig, RunOptions};
use crate::seed::{self, Party, Purpose};
use crate::split::ModelSpec;

pub struct FedAvgOutcome {
    pub history: RoundHistory,
    pub global: WeightSet,
}

pub fn run_fedavg(cfg: &RunConfig, data: &[ClientData], opts: &RunOptions) -> Result<FedAvgOutcome> {
    let spec = ModelSpec::new(cfg.spec.layers.clone(), 0)?;
    cfg.sgd.validate()?;
    if cfg.rounds == 0 || data.is_empty() || data.len() != cfg.num_clients {
        return Err(Error::Config("fedavg needs rounds >= 1 and one dataset per client".into()));
    }
    if data.iter().any(|d| d.train.is_empty() || d.test.is_empty()) {
        return Err(Error::Config("every client needs train and test samples".into()));
    }
    let pool = build_pool(opts.threads)?;
    let empty = WeightSet::empty();

    let total: usize = data.iter().map(|d| d.train.len()).sum();
    let weights: Vec<f64> = data.iter().map(|d| d.train.len() as f64 / total as f64).collect();
    let mut global = WeightSet::init(
        &spec.layers,
        &mut seed::derive(cfg.master_seed, Party::Server, 0, Purpose::Init),
    );

    let mut history = RoundHistory::default();
    for round in 1..=cfg.rounds {
        let local_step = |j: usize| -> Result<WeightSet> {
            let mut rng = seed::derive(cfg.master_seed, Party::Client(j), round as u64, Purpose::Sgd);
            nn::sgd(&spec, &global, &empty, &data[j].train, &cfg.sgd, &mut rng).map(|(w, _)| w)
        };
        let locals: Vec<WeightSet> = match &pool {
            Some(p) => {
                use rayon::prelude::*;
                p.install(|| (0..data.len()).into_par_iter().map(local_step).collect::<Result<_>>())?
            }
            None => (0..data.len()).map(local_step).collect::<Result<_>>()?,
        };

        // anchored at client 0: w0 + Σ γ_j (w_j − w0), zero differences skipped
        let anchor: Vec<f64> = locals[0].values().collect();
        let mut next = locals[0].clone();
        for (local, gamma) in locals.iter().zip(&weights).skip(1) {
            for ((acc, v), a) in next.values_mut().zip(local.values()).zip(&anchor) {
                if v != *a {
                    *acc += gamma * (v - a);
                }
            }
        }
        global = next;

        let clients = data
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let test = metrics::evaluate(&spec, &global, &empty, &d.test)?;
                let train = metrics::evaluate(&spec, &global, &empty, &d.train)?;
                Ok(metrics::ClientMetrics {
                    client: j,
                    round,
                    test_accuracy: test.accuracy,
                    train_loss: train.loss,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        history.rounds.push(RoundRecord {
            round,
            base_checksum: global.checksum(),
            clients,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && round % opts.checkpoint_every == 0 {
                let none = vec![empty.clone(); data.len()];
                write_checkpoint(&dir.join(format!("round_{round:04}")), 0, &global, &none)?;
            }
        }
    }
    Ok(FedAvgOutcome { history, global })
}
