//! Personalized-clustering profiler.
//!
//! Before federated training each client runs a short standalone pass with a
//! larger merge percent and a small epoch budget. The round with the best
//! score gives an estimate `M_profile` of the client's identity count, from
//! which the per-round merge count is
//!
//! ```text
//! m_k  = floor((n_k - M_profile) / R)
//! mp_k = m_k / n_k
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, Linkage};
use crate::data_io::ClientDataset;
use crate::edge::{self, EdgeRuntime, EdgeSettings, Schedule};
use crate::error::{Error, Result};
use crate::nets::Backbone;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestRoundSelection {
    /// One round index for every client, chosen by mean score.
    #[default]
    Shared,
    /// Each client picks its own best round.
    PerClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSettings {
    pub merge_percent: f64,
    pub rounds: usize,
    pub first_epochs: usize,
    pub rest_epochs: usize,
    pub selection: BestRoundSelection,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            merge_percent: 0.08,
            rounds: 12,
            first_epochs: 5,
            rest_epochs: 1,
            selection: BestRoundSelection::Shared,
        }
    }
}

impl ProfileSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_percent > 0.0 && self.merge_percent < 1.0) {
            return Err(Error::usage(
                "invalid config: profiling.merge_percent must lie in (0, 1)",
            ));
        }
        if self.rounds == 0 || self.first_epochs == 0 || self.rest_epochs == 0 {
            return Err(Error::usage("invalid config: profiling rounds and epochs must be >= 1"));
        }
        Ok(())
    }

    /// Epochs one client spends profiling.
    pub fn epochs_per_client(&self) -> usize {
        self.first_epochs + (self.rounds - 1) * self.rest_epochs
    }
}

/// Scores a trained backbone on a client; higher is better.
pub trait Scorer: Sync {
    fn score(&self, backbone: &Backbone, client: &ClientDataset) -> Result<f64>;
}

/// Rank-1 accuracy on the client's labeled query/gallery split.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rank1Scorer;

impl Scorer for Rank1Scorer {
    fn score(&self, backbone: &Backbone, client: &ClientDataset) -> Result<f64> {
        if !client.has_eval_split() {
            return Err(Error::ScorerUnavailable {
                client: client.client_id,
                reason: "rank-1 scoring needs a query/gallery split".into(),
            });
        }
        Ok(edge::evaluate_backbone(backbone, client)?.rank1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub client_id: usize,
    /// Estimated identity count: the cluster count at the best round.
    pub m_profile: usize,
    pub m_k: usize,
    pub mp_k: f64,
    pub best_round: usize,
    pub epochs_spent: usize,
}

/// Per-round record of one client's profiling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTrace {
    pub client_id: usize,
    pub num_samples: usize,
    pub scores: Vec<f64>,
    /// Clusters used as labels in each round.
    pub cluster_counts: Vec<usize>,
    pub epochs_spent: usize,
}

/// Shared training knobs for profiling runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub linkage: Linkage,
    pub seed: u64,
}

/// `m_k = floor((n_k - M_profile) / R)`, `mp_k = m_k / n_k`.
pub fn derive_schedule(n_k: usize, m_profile: usize, rounds: usize) -> Result<(usize, f64)> {
    if rounds == 0 {
        return Err(Error::usage("training rounds must be >= 1"));
    }
    if m_profile == 0 || m_profile > n_k {
        return Err(Error::usage(format!(
            "estimated identities {m_profile} must lie in [1, n_k = {n_k}]"
        )));
    }
    let m_k = (n_k - m_profile) / rounds;
    Ok((m_k, m_k as f64 / n_k as f64))
}

/// Standalone training with the profiling schedule, scoring every round.
pub fn profile_trace(
    client: &ClientDataset,
    settings: &ProfileSettings,
    init: &Backbone,
    training: &ProfileTraining,
    scorer: &dyn Scorer,
) -> Result<ProfileTrace> {
    settings.validate()?;
    let n = client.len();
    let schedule = Schedule {
        max_epochs: settings.rest_epochs,
        first_round_epochs: settings.first_epochs,
        merges_per_round: clustering::merges_for(n, settings.merge_percent),
        merge_percent: settings.merge_percent,
    };
    let edge_settings = EdgeSettings {
        learning_rate: training.learning_rate,
        batch_size: training.batch_size,
        linkage: training.linkage,
        seed: seed::derive_seed(training.seed, &[seed::TAG_PROFILE, client.client_id as u64]),
    };
    let mut rt = EdgeRuntime::new(client.clone(), init, schedule, edge_settings)?;
    let mut params = init.params().clone();
    let mut trace = ProfileTrace {
        client_id: client.client_id,
        num_samples: n,
        scores: Vec::with_capacity(settings.rounds),
        cluster_counts: Vec::with_capacity(settings.rounds),
        epochs_spent: 0,
    };
    for round in 0..settings.rounds {
        let (trained, metrics) = rt.local_round(&params, round, false)?;
        let mut model = init.clone();
        model.set_params(&trained)?;
        trace.scores.push(scorer.score(&model, client)?);
        trace.cluster_counts.push(metrics.clusters_trained);
        trace.epochs_spent += metrics.epochs_consumed;
        params = trained;
    }
    Ok(trace)
}

/// First index of the maximal value.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn result_at(trace: &ProfileTrace, round: usize, training_rounds: usize) -> Result<ProfileResult> {
    let m_profile = trace.cluster_counts[round];
    let (m_k, mp_k) = derive_schedule(trace.num_samples, m_profile, training_rounds)?;
    Ok(ProfileResult {
        client_id: trace.client_id,
        m_profile,
        m_k,
        mp_k,
        best_round: round,
        epochs_spent: trace.epochs_spent,
    })
}

/// Profiles one client and picks its own best round.
pub fn profile_client(
    client: &ClientDataset,
    settings: &ProfileSettings,
    init: &Backbone,
    training: &ProfileTraining,
    scorer: &dyn Scorer,
    training_rounds: usize,
) -> Result<ProfileResult> {
    let trace = profile_trace(client, settings, init, training, scorer)?;
    result_at(&trace, argmax(&trace.scores), training_rounds)
}

/// Selects the best round(s) from completed traces.
pub fn select_from_traces(
    traces: &[ProfileTrace],
    selection: BestRoundSelection,
    training_rounds: usize,
) -> Result<Vec<ProfileResult>> {
    match selection {
        BestRoundSelection::PerClient => traces
            .iter()
            .map(|t| result_at(t, argmax(&t.scores), training_rounds))
            .collect(),
        BestRoundSelection::Shared => {
            let rounds = traces.first().map_or(0, |t| t.scores.len());
            let mean: Vec<f64> = (0..rounds)
                .map(|r| traces.iter().map(|t| t.scores[r]).sum::<f64>() / traces.len() as f64)
                .collect();
            let best = argmax(&mean);
            traces.iter().map(|t| result_at(t, best, training_rounds)).collect()
        }
    }
}

/// Profiles every client independently (in parallel) and applies the
/// configured best-round selection.
pub fn profile_federation(
    clients: &[ClientDataset],
    settings: &ProfileSettings,
    init: &Backbone,
    training: &ProfileTraining,
    scorer: &dyn Scorer,
    training_rounds: usize,
) -> Result<Vec<ProfileResult>> {
    let traces = clients
        .par_iter()
        .map(|c| profile_trace(c, settings, init, training, scorer))
        .collect::<Result<Vec<_>>>()?;
    select_from_traces(&traces, settings.selection, training_rounds)
}
