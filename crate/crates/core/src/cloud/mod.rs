//! Server side of the federation.
//!
//! Each round is a barrier: the selected edges train (possibly concurrently),
//! then their uploads are sorted by client id and aggregated with weights
//! proportional to their sample counts, and every selected client receives
//! either the global model or its personalized EMA blend. Unselected clients
//! keep their previous model.

mod config;

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{parse_client_sizes, ClientSize, ExperimentConfig, SyntheticConfig, TrainConfig};

use crate::clustering;
use crate::data_io::{ClientDataset, ExperimentReport, RoundMetrics, RunMode};
use crate::edge::{EdgeRuntime, EdgeSettings, Schedule};
use crate::error::{Error, Result};
use crate::nets::Backbone;
use crate::params::{self, LayerDistance, ParamSet};
use crate::profiler::{self, ProfileResult, ProfileTraining, Rank1Scorer};
use crate::seed;

/// Uniform `k`-subset of `0..n`, returned sorted.
pub fn select_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::usage(format!("cannot select {k} of {n} clients")));
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// A trained backbone sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub params: ParamSet,
    pub num_samples: usize,
}

/// Sample-weighted average of the uploads, summed in client-id order.
pub fn aggregate(uploads: &[Upload]) -> Result<ParamSet> {
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::usage("duplicate client id among uploads"));
    }
    let entries: Vec<(&ParamSet, f64)> = sorted.iter().map(|u| (&u.params, u.num_samples as f64)).collect();
    params::weighted_average(&entries)
}

/// A client's next model and the EMA weight that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Personalized {
    pub params: ParamSet,
    pub mu: Option<f64>,
}

/// Blends each local model with the global one (`mu` from per-layer
/// distances) or, when disabled, hands every client the global model.
pub fn personalized_update(
    global: &ParamSet,
    locals: &BTreeMap<usize, ParamSet>,
    pu_enabled: bool,
    distance: LayerDistance,
) -> Result<BTreeMap<usize, Personalized>> {
    locals
        .iter()
        .map(|(&id, local)| {
            global.check_compatible(local)?;
            let next = if pu_enabled {
                let mu = params::compute_mu(&params::layer_distances_with(global, local, distance)?)?;
                Personalized {
                    params: params::ema_update(local, global, mu)?,
                    mu: Some(mu),
                }
            } else {
                Personalized {
                    params: global.clone(),
                    mu: None,
                }
            };
            Ok((id, next))
        })
        .collect()
}

/// How the selected edges of a round are executed. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
    /// Sequential, in an order shuffled by the given seed.
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: RunMode,
    pub execution: Execution,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: RunMode::Federated,
            execution: Execution::Parallel,
        }
    }
}

pub struct FederationState {
    config: TrainConfig,
    options: RunOptions,
    global: ParamSet,
    client_models: Vec<ParamSet>,
    edges: Vec<EdgeRuntime>,
    round: usize,
    select_rng: ChaCha8Rng,
    profiles: Vec<ProfileResult>,
    records: Vec<RoundMetrics>,
}

/// Final state of a finished run.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub report: ExperimentReport,
    pub global: ParamSet,
    pub client_models: BTreeMap<usize, ParamSet>,
}

impl FederationState {
    /// Initializes the shared model, profiles clients when personalized
    /// clustering is on, and builds one edge runtime per client.
    pub fn new(config: &TrainConfig, clients: Vec<ClientDataset>, options: RunOptions) -> Result<Self> {
        config.validate()?;
        if clients.len() != config.num_clients {
            return Err(Error::usage(format!(
                "config expects {} clients, got {}",
                config.num_clients,
                clients.len()
            )));
        }
        let mut ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::usage("client ids must be unique"));
        }
        let input_dim = clients[0].input_dim();
        let init = Backbone::init(config.architecture, input_dim, config.embedding_dim, config.seed)?;

        let profiles = if config.pc {
            let training = ProfileTraining {
                learning_rate: config.learning_rate,
                batch_size: config.batch_size,
                linkage: config.linkage,
                seed: config.seed,
            };
            let mut p = profiler::profile_federation(
                &clients,
                &config.profiling,
                &init,
                &training,
                &Rank1Scorer,
                config.rounds,
            )?;
            p.sort_by_key(|r| r.client_id);
            for r in &p {
                info!(
                    "profiled client {}: M_profile = {}, m_k = {}, mp_k = {:.5}",
                    r.client_id, r.m_profile, r.m_k, r.mp_k
                );
            }
            p
        } else {
            Vec::new()
        };

        let edges = clients
            .into_iter()
            .map(|data| {
                let n = data.len();
                let (merges, mp) = match profiles.iter().find(|p| p.client_id == data.client_id) {
                    Some(p) => (p.m_k, p.mp_k),
                    None => (clustering::merges_for(n, config.merge_percent), config.merge_percent),
                };
                let schedule = Schedule {
                    max_epochs: config.local_epochs,
                    first_round_epochs: config.first_epochs(),
                    merges_per_round: merges,
                    merge_percent: mp,
                };
                let settings = EdgeSettings {
                    learning_rate: config.learning_rate,
                    batch_size: config.batch_size,
                    linkage: config.linkage,
                    seed: seed::derive_seed(config.seed, &[seed::TAG_EDGE, data.client_id as u64]),
                };
                EdgeRuntime::new(data, &init, schedule, settings)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(FederationState {
            config: config.clone(),
            options,
            global: init.params().clone(),
            client_models: vec![init.params().clone(); edges.len()],
            edges,
            round: 0,
            select_rng: seed::rng_for(config.seed, &[seed::TAG_SELECT]),
            profiles,
            records: Vec::new(),
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    pub fn global_model(&self) -> &ParamSet {
        &self.global
    }

    pub fn edges(&self) -> &[EdgeRuntime] {
        &self.edges
    }

    /// Current model of the client at `index` (position in the client list).
    pub fn client_model(&self, index: usize) -> &ParamSet {
        &self.client_models[index]
    }

    pub fn profiles(&self) -> &[ProfileResult] {
        &self.profiles
    }

    /// Runs one full round: select, train locally, aggregate, update.
    pub fn step(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(Error::usage("all rounds already completed"));
        }
        let r = self.round;
        let n = self.edges.len();
        let selected = match self.options.mode {
            RunMode::Standalone => (0..n).collect(),
            RunMode::Federated => select_clients(n, self.config.clients_per_round, &mut self.select_rng)?,
        };
        let mut outputs = self.run_edges(r, &selected)?;
        outputs.sort_by_key(|(idx, _, _)| self.edges[*idx].client_id());

        if self.options.mode == RunMode::Federated {
            let uploads: Vec<Upload> = outputs
                .iter()
                .map(|(idx, p, _)| Upload {
                    client_id: self.edges[*idx].client_id(),
                    params: p.clone(),
                    num_samples: self.edges[*idx].dataset().len(),
                })
                .collect();
            let global = aggregate(&uploads).map_err(|e| e.in_round(r, uploads[0].client_id))?;
            let locals: BTreeMap<usize, ParamSet> = uploads.into_iter().map(|u| (u.client_id, u.params)).collect();
            let mut next = personalized_update(&global, &locals, self.config.pu, self.config.layer_distance)
                .map_err(|e| e.in_round(r, outputs[0].2.client_id))?;
            for (idx, _, metrics) in &mut outputs {
                let edge = &mut self.edges[*idx];
                let id = edge.client_id();
                metrics.global = Some(edge.evaluate(&global).map_err(|e| e.in_round(r, id))?);
                let personalized = next.remove(&id).expect("every upload is personalized");
                metrics.mu = personalized.mu;
                if let Some(last) = edge.history_mut().last_mut() {
                    last.global = metrics.global;
                    last.mu = metrics.mu;
                }
                self.client_models[*idx] = personalized.params;
            }
            self.global = global;
        } else {
            for (idx, p, _) in &outputs {
                self.client_models[*idx] = p.clone();
            }
        }

        let epochs: usize = outputs.iter().map(|(_, _, m)| m.epochs_consumed).sum();
        let mean_rank1 = outputs.iter().map(|(_, _, m)| m.local.rank1).sum::<f64>() / outputs.len() as f64;
        info!(
            "round {}/{}: {} clients, {} epochs, mean local rank-1 {:.4}",
            r + 1,
            self.config.rounds,
            outputs.len(),
            epochs,
            mean_rank1
        );
        self.records.extend(outputs.into_iter().map(|(_, _, m)| m));
        self.round += 1;
        Ok(())
    }

    fn run_edges(&mut self, r: usize, selected: &[usize]) -> Result<Vec<(usize, ParamSet, RoundMetrics)>> {
        let pe = self.config.pe;
        let models = &self.client_models;
        let run = |idx: usize, edge: &mut EdgeRuntime| {
            let id = edge.client_id();
            edge.local_round(&models[idx], r, pe)
                .map(|(p, m)| (idx, p, m))
                .map_err(|e| e.in_round(r, id))
        };
        let mut is_selected = vec![false; self.edges.len()];
        for &i in selected {
            is_selected[i] = true;
        }
        match self.options.execution {
            Execution::Parallel => self
                .edges
                .par_iter_mut()
                .enumerate()
                .filter(|(i, _)| is_selected[*i])
                .map(|(i, e)| run(i, e))
                .collect(),
            Execution::Sequential => self
                .edges
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| is_selected[*i])
                .map(|(i, e)| run(i, e))
                .collect(),
            Execution::Shuffled(order_seed) => {
                let mut order = selected.to_vec();
                order.shuffle(&mut seed::rng_for(order_seed, &[r as u64]));
                let mut slots: Vec<Option<&mut EdgeRuntime>> = self.edges.iter_mut().map(Some).collect();
                order
                    .into_iter()
                    .map(|i| run(i, slots[i].take().expect("each client runs once per round")))
                    .collect()
            }
        }
    }

    pub fn run(mut self) -> Result<FederationOutcome> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> FederationOutcome {
        let client_models = self
            .edges
            .iter()
            .zip(self.client_models)
            .map(|(e, p)| (e.client_id(), p))
            .collect();
        FederationOutcome {
            report: ExperimentReport::new(self.options.mode, self.config, self.profiles, self.records),
            global: self.global,
            client_models,
        }
    }
}

/// Runs the full federated protocol for `config.rounds` rounds.
pub fn run_experiment(config: &TrainConfig, clients: &[ClientDataset]) -> Result<ExperimentReport> {
    run_experiment_with(config, clients, RunOptions::default())
}

pub fn run_experiment_with(
    config: &TrainConfig,
    clients: &[ClientDataset],
    options: RunOptions,
) -> Result<ExperimentReport> {
    Ok(FederationState::new(config, clients.to_vec(), options)?.run()?.report)
}

/// Trains every client on its own data with no aggregation; one report per
/// client, in input order.
pub fn run_standalone(config: &TrainConfig, clients: &[ClientDataset]) -> Result<Vec<ExperimentReport>> {
    if clients.is_empty() {
        return Err(Error::usage("standalone training needs at least one client"));
    }
    let mut single = config.clone();
    single.num_clients = 1;
    single.clients_per_round = 1;
    single.pu = false;
    clients
        .par_iter()
        .map(|c| {
            run_experiment_with(
                &single,
                std::slice::from_ref(c),
                RunOptions {
                    mode: RunMode::Standalone,
                    execution: Execution::Sequential,
                },
            )
        })
        .collect()
}
