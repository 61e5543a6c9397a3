//! Client runtime: one local round is training under the epoch controller,
//! then clustering the trained features into new pseudo-labels and resizing
//! the classifier to match. The classifier never leaves the edge; only the
//! backbone parameters are returned for upload.

use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterState, Linkage};
use crate::data_io::{ClientDataset, RoundMetrics};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalScores};
use crate::nets::{self, Backbone, ClassifierHead, EpochFeedback};
use crate::params::ParamSet;
use crate::seed;

/// Cumulative average batch precision above which a round stops early.
pub const EARLY_STOP_AVG_PRECISION: f64 = 0.95;

/// Per-client epoch and merge schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Epoch budget per round (`E`, the maximum under early stopping).
    pub max_epochs: usize,
    /// Epoch budget of the client's first round.
    pub first_round_epochs: usize,
    pub merges_per_round: usize,
    pub merge_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub linkage: Linkage,
    pub seed: u64,
}

/// True once any batch reached full precision or the cumulative average
/// precision exceeds 95%.
pub fn should_early_stop(feedback: &EpochFeedback) -> bool {
    feedback.batch_precisions.contains(&1.0) || feedback.cumulative_avg > EARLY_STOP_AVG_PRECISION
}

#[derive(Debug, Clone)]
pub struct EdgeRuntime {
    client_id: usize,
    dataset: ClientDataset,
    backbone: Backbone,
    head: ClassifierHead,
    cluster_state: ClusterState,
    schedule: Schedule,
    settings: EdgeSettings,
    history: Vec<RoundMetrics>,
}

impl EdgeRuntime {
    pub fn new(dataset: ClientDataset, init: &Backbone, schedule: Schedule, settings: EdgeSettings) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::usage(format!(
                "client {} has no training samples",
                dataset.client_id
            )));
        }
        if dataset.input_dim() != init.input_dim() {
            return Err(Error::shape(format!(
                "client {} has input dim {}, backbone expects {}",
                dataset.client_id,
                dataset.input_dim(),
                init.input_dim()
            )));
        }
        if schedule.max_epochs == 0 || schedule.first_round_epochs == 0 {
            return Err(Error::usage("epoch budgets must be >= 1"));
        }
        let n = dataset.len();
        let cluster_state = ClusterState::with_schedule(n, schedule.merges_per_round, schedule.merge_percent)?;
        let head = ClassifierHead::init(n, init.embedding_dim(), settings.seed)?;
        Ok(EdgeRuntime {
            client_id: dataset.client_id,
            dataset,
            backbone: init.clone(),
            head,
            cluster_state,
            schedule,
            settings,
            history: Vec::new(),
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn dataset(&self) -> &ClientDataset {
        &self.dataset
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn cluster_state(&self) -> &ClusterState {
        &self.cluster_state
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub(crate) fn history_mut(&mut self) -> &mut [RoundMetrics] {
        &mut self.history
    }

    /// Retrieval scores of `params` on this client's query/gallery split.
    pub fn evaluate(&self, params: &ParamSet) -> Result<RetrievalScores> {
        let mut model = self.backbone.clone();
        model.set_params(params)?;
        evaluate_backbone(&model, &self.dataset)
    }

    /// Trains on the incoming model, clusters, and returns the trained
    /// backbone for upload together with this round's metrics.
    pub fn local_round(
        &mut self,
        incoming: &ParamSet,
        round: usize,
        pe_enabled: bool,
    ) -> Result<(ParamSet, RoundMetrics)> {
        self.backbone.set_params(incoming)?;
        let first = self.history.is_empty();
        let budget = if first {
            self.schedule.first_round_epochs
        } else {
            self.schedule.max_epochs
        };

        let labels = clustering::labels(&self.cluster_state);
        let clusters_trained = self.cluster_state.num_clusters();
        let mut epochs = 0;
        let mut last = None;
        let mut max_precision = 0.0f64;
        let mut early_stopped = false;
        for epoch in 0..budget {
            let epoch_seed = seed::derive_seed(self.settings.seed, &[seed::TAG_EPOCH, round as u64, epoch as u64]);
            let feedback = nets::train_epoch(
                &mut self.backbone,
                &mut self.head,
                self.dataset.train.view(),
                &labels,
                self.settings.learning_rate,
                self.settings.batch_size,
                epoch_seed,
            )?;
            epochs += 1;
            max_precision = feedback.batch_precisions.iter().copied().fold(max_precision, f64::max);
            let stop = pe_enabled && !first && should_early_stop(&feedback);
            last = Some(feedback);
            if stop {
                early_stopped = epoch + 1 < budget;
                break;
            }
        }
        let last = last.expect("at least one epoch");

        let local = evaluate_backbone(&self.backbone, &self.dataset)?;

        if !self.cluster_state.is_exhausted() && self.cluster_state.num_clusters() > 1 {
            let features = nets::extract_features(&self.backbone, self.dataset.train.view())?;
            let (next, merges) =
                clustering::cluster_round_with(&self.cluster_state, features.view(), None, self.settings.linkage)?;
            self.head = nets::resize_classifier(&self.head, &merges)?;
            self.cluster_state = next;
        }
        debug_assert_eq!(self.head.num_classes(), self.cluster_state.num_clusters());

        let metrics = RoundMetrics {
            round,
            client_id: self.client_id,
            epochs_consumed: epochs,
            clusters_trained,
            cluster_count: self.cluster_state.num_clusters(),
            mean_batch_precision: last.cumulative_avg,
            max_batch_precision: max_precision,
            early_stopped,
            clustering_exhausted: self.cluster_state.is_exhausted(),
            mu: None,
            local,
            global: None,
        };
        self.history.push(metrics.clone());
        Ok((self.backbone.params().clone(), metrics))
    }
}

pub fn evaluate_backbone(backbone: &Backbone, dataset: &ClientDataset) -> Result<RetrievalScores> {
    if !dataset.has_eval_split() {
        return Err(Error::usage(format!(
            "client {} has no query/gallery split",
            dataset.client_id
        )));
    }
    let q = dataset
        .query
        .retrieval_set(backbone.embed(dataset.query.samples.view())?)?;
    let g = dataset
        .gallery
        .retrieval_set(backbone.embed(dataset.gallery.samples.view())?)?;
    eval::evaluate(&q, &g)
}
