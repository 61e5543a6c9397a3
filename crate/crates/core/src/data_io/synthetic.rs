//! Synthetic heterogeneous clients.
//!
//! Each client owns a region on the unit sphere; its identities are unit
//! vectors scattered around that region and its samples are noisy copies of
//! the identity centers. Clients therefore differ in size, identity count and
//! input distribution.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RetrievalSet;
use crate::seed;

/// Held-out samples with ground-truth identities and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub samples: Array2<f64>,
    pub identities: Vec<usize>,
    pub camera_ids: Vec<usize>,
}

/// One edge's data. Training samples are unlabeled as far as training is
/// concerned; `train_identities` is kept only for generation checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Array2<f64>,
    pub train_identities: Vec<usize>,
    pub num_identities: usize,
    pub query: LabeledSamples,
    pub gallery: LabeledSamples,
}

impl ClientDataset {
    /// Training set size `n_k`.
    pub fn len(&self) -> usize {
        self.train.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.train.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.train.ncols()
    }

    pub fn has_eval_split(&self) -> bool {
        !self.query.identities.is_empty() && !self.gallery.identities.is_empty()
    }
}

/// Generation parameters for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub samples: usize,
    pub identities: usize,
    pub input_dim: usize,
    /// Expected Euclidean norm of the noise added to each sample.
    pub noise: f64,
    /// How far identity centers stray from the client's region.
    pub spread: f64,
    /// Gallery samples per identity (each on its own camera).
    pub gallery_per_identity: usize,
    pub seed: u64,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (center.len() as f64).sqrt();
    center
        .iter()
        .map(|c| {
            let g: f64 = rng.sample(StandardNormal);
            c + scale * g
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

/// Generates one dataset per spec; client ids follow the slice order.
pub fn generate_synthetic(specs: &[ClientSpec]) -> Result<Vec<ClientDataset>> {
    specs
        .iter()
        .enumerate()
        .map(|(client_id, spec)| generate_client(client_id, spec))
        .collect()
}

pub fn generate_client(client_id: usize, spec: &ClientSpec) -> Result<ClientDataset> {
    if spec.identities == 0 || spec.identities > spec.samples {
        return Err(Error::usage(format!(
            "client {client_id}: need 1 <= identities ({}) <= samples ({})",
            spec.identities, spec.samples
        )));
    }
    if spec.input_dim == 0 {
        return Err(Error::usage("input dimension must be positive"));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0 && spec.spread.is_finite() && spec.spread >= 0.0) {
        return Err(Error::usage("noise and spread must be finite and nonnegative"));
    }
    let dim = spec.input_dim;
    let mut rng = seed::rng_for(spec.seed, &[seed::TAG_DATA]);

    let region = unit_vector(&mut rng, dim);
    let centers: Vec<Vec<f64>> = (0..spec.identities)
        .map(|_| {
            let u = unit_vector(&mut rng, dim);
            let raw: Vec<f64> = region.iter().zip(&u).map(|(r, x)| r + spec.spread * x).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                raw.into_iter().map(|x| x / n).collect()
            } else {
                u
            }
        })
        .collect();

    // Every identity appears at least once; the rest are drawn uniformly.
    let mut ids: Vec<usize> = (0..spec.identities).collect();
    ids.extend((spec.identities..spec.samples).map(|_| rng.random_range(0..spec.identities)));
    ids.shuffle(&mut rng);
    let train_rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| noisy(&mut rng, &centers[id], spec.noise))
        .collect();

    let mut query_rows = Vec::new();
    let mut query_ids = Vec::new();
    let mut gallery_rows = Vec::new();
    let mut gallery_ids = Vec::new();
    let mut gallery_cams = Vec::new();
    for (id, center) in centers.iter().enumerate() {
        query_rows.push(noisy(&mut rng, center, spec.noise));
        query_ids.push(id);
        for cam in 1..=spec.gallery_per_identity {
            gallery_rows.push(noisy(&mut rng, center, spec.noise));
            gallery_ids.push(id);
            gallery_cams.push(cam);
        }
    }

    Ok(ClientDataset {
        client_id,
        train: to_matrix(&train_rows, dim),
        train_identities: ids,
        num_identities: spec.identities,
        query: LabeledSamples {
            samples: to_matrix(&query_rows, dim),
            camera_ids: vec![0; query_ids.len()],
            identities: query_ids,
        },
        gallery: LabeledSamples {
            samples: to_matrix(&gallery_rows, dim),
            identities: gallery_ids,
            camera_ids: gallery_cams,
        },
    })
}

impl LabeledSamples {
    /// Pairs already-computed features with this split's labels.
    pub fn retrieval_set(&self, features: Array2<f64>) -> Result<RetrievalSet> {
        RetrievalSet::new(features, self.identities.clone(), Some(self.camera_ids.clone()))
    }
}
