use serde::{Deserialize, Serialize};

use crate::clustering::Linkage;
use crate::data_io::ClientSpec;
use crate::error::{Error, Result};
use crate::nets::Architecture;
use crate::params::LayerDistance;
use crate::profiler::ProfileSettings;
use crate::seed;

/// Federation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Local epochs `E`; the per-round maximum when personalized epochs are on.
    pub local_epochs: usize,
    /// Epochs for a client's first round; defaults to `local_epochs`.
    pub first_round_epochs: Option<usize>,
    pub batch_size: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub num_clients: usize,
    pub learning_rate: f64,
    pub embedding_dim: usize,
    pub architecture: Architecture,
    /// Merge percent used when personalized clustering is off.
    pub merge_percent: f64,
    /// Personalized epoch (early stop after round 0).
    pub pe: bool,
    /// Personalized clustering (profiled per-client merge schedule).
    pub pc: bool,
    /// Personalized update (EMA blend of local and global models).
    pub pu: bool,
    pub seed: u64,
    pub layer_distance: LayerDistance,
    pub linkage: Linkage,
    pub profiling: ProfileSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 5,
            first_round_epochs: None,
            batch_size: 16,
            rounds: 20,
            clients_per_round: 8,
            num_clients: 8,
            learning_rate: 0.5,
            embedding_dim: 16,
            architecture: Architecture::Linear,
            merge_percent: 0.05,
            pe: false,
            pc: false,
            pu: false,
            seed: 0,
            layer_distance: LayerDistance::Squared,
            linkage: Linkage::Single,
            profiling: ProfileSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::usage(format!("invalid config: {msg}")));
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1");
        }
        if self.first_round_epochs == Some(0) {
            return fail("first_round_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1");
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return fail("need 1 <= clients_per_round <= num_clients");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and nonnegative");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be >= 1");
        }
        if let Architecture::Hidden { width: 0 } = self.architecture {
            return fail("hidden width must be >= 1");
        }
        if !(self.merge_percent > 0.0 && self.merge_percent < 1.0) {
            return fail("merge_percent must lie in (0, 1)");
        }
        self.profiling.validate()
    }

    /// Epoch budget of a client's first round.
    pub fn first_epochs(&self) -> usize {
        self.first_round_epochs.unwrap_or(self.local_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSize {
    pub samples: usize,
    pub identities: usize,
}

/// Synthetic client population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub noise: f64,
    pub spread: f64,
    pub gallery_per_identity: usize,
    pub clients: Vec<ClientSize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let sizes = [
            (64, 8),
            (96, 10),
            (128, 12),
            (192, 16),
            (256, 20),
            (320, 24),
            (384, 28),
            (512, 32),
        ];
        SyntheticConfig {
            input_dim: 32,
            noise: 0.6,
            spread: 0.8,
            gallery_per_identity: 2,
            clients: sizes
                .iter()
                .map(|&(samples, identities)| ClientSize { samples, identities })
                .collect(),
        }
    }
}

impl SyntheticConfig {
    /// Per-client generation specs; client `k` draws from `seed` and `k`.
    pub fn client_specs(&self, seed: u64) -> Vec<ClientSpec> {
        self.clients
            .iter()
            .enumerate()
            .map(|(k, c)| ClientSpec {
                samples: c.samples,
                identities: c.identities,
                input_dim: self.input_dim,
                noise: self.noise,
                spread: self.spread,
                gallery_per_identity: self.gallery_per_identity,
                seed: seed::derive_seed(seed, &[seed::TAG_DATA, k as u64]),
            })
            .collect()
    }
}

/// Parses `samples:identities` pairs separated by commas, e.g. `64:8,512:32`.
pub fn parse_client_sizes(spec: &str) -> Result<Vec<ClientSize>> {
    let sizes = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (n, i) = item
                .split_once(':')
                .ok_or_else(|| Error::usage(format!("client spec {item:?} is not samples:identities")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::usage(format!("client spec {item:?}: {e}")))
            };
            Ok(ClientSize {
                samples: parse(n)?,
                identities: parse(i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if sizes.is_empty() {
        return Err(Error::usage("client spec lists no clients"));
    }
    Ok(sizes)
}

/// Everything a config file holds: `[train]` mirrors [`TrainConfig`],
/// `[data]` describes the synthetic clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: SyntheticConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.clients.len() != self.train.num_clients {
            return Err(Error::usage(format!(
                "invalid config: num_clients = {} but [data] lists {} clients",
                self.train.num_clients,
                self.data.clients.len()
            )));
        }
        Ok(())
    }
}
