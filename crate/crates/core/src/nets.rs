//! Desk-scale embedding network and classifier head.
//!
//! The backbone maps an input vector to an L2-normalized embedding, either
//! through a single affine map or through one `tanh` hidden layer. Its
//! parameters live in a [`ParamSet`] so the server can average them. The
//! classifier head is a bias-free `M x v` matrix that stays on the edge and is
//! resized whenever clusters merge.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::MergeEvent;
use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `z = W x + b`
    #[default]
    Linear,
    /// `z = W2 tanh(W1 x + b1) + b2`
    Hidden { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    arch: Architecture,
    input_dim: usize,
    embedding_dim: usize,
    params: ParamSet,
}

/// Per-layer shapes (rows, cols) in parameter order; biases have one column.
fn layout(arch: Architecture, input_dim: usize, embedding_dim: usize) -> Vec<(&'static str, usize, usize)> {
    match arch {
        Architecture::Linear => vec![("fc.weight", embedding_dim, input_dim), ("fc.bias", embedding_dim, 1)],
        Architecture::Hidden { width } => vec![
            ("fc1.weight", width, input_dim),
            ("fc1.bias", width, 1),
            ("fc2.weight", embedding_dim, width),
            ("fc2.bias", embedding_dim, 1),
        ],
    }
}

impl Backbone {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases.
    pub fn init(arch: Architecture, input_dim: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        validate_dims(arch, input_dim, embedding_dim)?;
        let mut rng = seed::rng_for(seed, &[seed::TAG_INIT]);
        let layers = layout(arch, input_dim, embedding_dim)
            .into_iter()
            .map(|(name, rows, cols)| {
                let values = if cols == 1 && name.ends_with("bias") {
                    vec![0.0; rows]
                } else {
                    let bound = 1.0 / (cols as f64).sqrt();
                    (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect()
                };
                Layer::new(name, values)
            })
            .collect();
        Ok(Backbone {
            arch,
            input_dim,
            embedding_dim,
            params: ParamSet::new(layers)?,
        })
    }

    /// Linear backbone with identity weight and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        validate_dims(Architecture::Linear, dim, dim)?;
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self::from_params(
            Architecture::Linear,
            dim,
            dim,
            ParamSet::new(vec![Layer::new("fc.weight", w), Layer::new("fc.bias", vec![0.0; dim])])?,
        )
    }

    pub fn from_params(arch: Architecture, input_dim: usize, embedding_dim: usize, params: ParamSet) -> Result<Self> {
        validate_dims(arch, input_dim, embedding_dim)?;
        let expected = layout(arch, input_dim, embedding_dim);
        let ok = params.layer_count() == expected.len()
            && params
                .layers()
                .iter()
                .zip(&expected)
                .all(|(l, (name, r, c))| l.name == *name && l.values.len() == r * c);
        if !ok {
            return Err(Error::shape(format!(
                "parameters do not match a {arch:?} backbone {input_dim} -> {embedding_dim}"
            )));
        }
        Ok(Backbone {
            arch,
            input_dim,
            embedding_dim,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Replaces the parameters with a compatible set (e.g. the incoming
    /// model at the start of a round).
    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.check_compatible(params)?;
        self.params = params.clone();
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn matrix(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (_, rows, cols) = layout(self.arch, self.input_dim, self.embedding_dim)[layer];
        ArrayView2::from_shape((rows, cols), &self.params.layers()[layer].values).expect("layout checked")
    }

    fn vector(&self, layer: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.layers()[layer].values[..])
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "input has {} columns, backbone expects {}",
                batch.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Pre-normalization output plus the hidden activations, if any.
    fn raw(&self, x: &ArrayView2<f64>) -> (Option<Array2<f64>>, Array2<f64>) {
        match self.arch {
            Architecture::Linear => (None, x.dot(&self.matrix(0).t()) + self.vector(1)),
            Architecture::Hidden { .. } => {
                let h = (x.dot(&self.matrix(0).t()) + self.vector(1)).mapv(f64::tanh);
                let z = h.dot(&self.matrix(2).t()) + self.vector(3);
                (Some(h), z)
            }
        }
    }

    /// L2-normalized embeddings, one row per input row.
    pub fn embed(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let (_, z) = self.raw(&batch);
        Ok(normalize_rows(z).0)
    }
}

fn validate_dims(arch: Architecture, input_dim: usize, embedding_dim: usize) -> Result<()> {
    if input_dim == 0 || embedding_dim == 0 {
        return Err(Error::usage("backbone dimensions must be positive"));
    }
    if let Architecture::Hidden { width: 0 } = arch {
        return Err(Error::usage("hidden width must be positive"));
    }
    Ok(())
}

/// Returns normalized rows and the original row norms. Zero rows stay zero.
fn normalize_rows(mut z: Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    for (mut row, &n) in z.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    (z, norms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weight: Array2<f64>,
}

impl ClassifierHead {
    /// `num_classes` rows drawn uniformly from `[-1/sqrt(v), 1/sqrt(v)]`.
    pub fn init(num_classes: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || embedding_dim == 0 {
            return Err(Error::usage("classifier needs at least one class and one dimension"));
        }
        let mut rng = seed::rng_for(seed, &[seed::TAG_HEAD]);
        let bound = 1.0 / (embedding_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((num_classes, embedding_dim), || rng.random_range(-bound..=bound));
        Ok(ClassifierHead { weight })
    }

    pub fn from_weight(weight: Array2<f64>) -> Result<Self> {
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(Error::usage("classifier needs at least one class and one dimension"));
        }
        Ok(ClassifierHead { weight })
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    /// Current class count `M`.
    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Training feedback for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFeedback {
    pub batch_precisions: Vec<f64>,
    /// Running mean of `batch_precisions` at the end of the epoch.
    pub cumulative_avg: f64,
}

/// Gradients of the mean batch loss, laid out like the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub backbone: Vec<Vec<f64>>,
    pub head: Array2<f64>,
}

/// Embeddings and logits for a batch.
pub fn forward(
    backbone: &Backbone,
    head: &ClassifierHead,
    batch: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_head(backbone, head)?;
    let emb = backbone.embed(batch)?;
    let logits = emb.dot(&head.weight.t());
    Ok((emb, logits))
}

fn check_head(backbone: &Backbone, head: &ClassifierHead) -> Result<()> {
    if head.embedding_dim() != backbone.embedding_dim {
        return Err(Error::shape(format!(
            "classifier width {} != embedding size {}",
            head.embedding_dim(),
            backbone.embedding_dim
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {} samples", labels.len(), rows)));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::usage(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean softmax cross-entropy over the batch.
pub fn batch_loss(backbone: &Backbone, head: &ClassifierHead, batch: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let (_, logits) = forward(backbone, head, batch)?;
    check_labels(labels, logits.nrows(), head.num_classes())?;
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Loss, gradients and batch precision (fraction of argmax hits) for one batch.
pub fn batch_gradients(
    backbone: &Backbone,
    head: &ClassifierHead,
    batch: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Gradients, f64)> {
    check_head(backbone, head)?;
    backbone.check_input(&batch)?;
    check_labels(labels, batch.nrows(), head.num_classes())?;
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::usage("empty batch"));
    }

    let (hidden, z) = backbone.raw(&batch);
    let (emb, norms) = normalize_rows(z);
    let logits = emb.dot(&head.weight.t());

    // softmax - onehot, scaled for the batch mean
    let mut dlogits = logits.clone();
    let mut loss = 0.0;
    let mut hits = 0usize;
    for ((mut row, logit_row), &y) in dlogits.rows_mut().into_iter().zip(logits.rows()).zip(labels) {
        if argmax(logit_row) == y {
            hits += 1;
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - logit_row[y];
        row /= sum;
        row[y] -= 1.0;
    }
    dlogits /= b as f64;
    loss /= b as f64;

    let dhead = dlogits.t().dot(&emb);
    let demb = dlogits.dot(&head.weight);

    // Through the normalization: dz = (de - e (e . de)) / |z|
    let mut dz = demb;
    for ((mut g, e), &n) in dz.rows_mut().into_iter().zip(emb.rows()).zip(norms.iter()) {
        if n > 0.0 {
            let proj = e.dot(&g);
            g.zip_mut_with(&e, |gi, &ei| *gi -= ei * proj);
            g /= n;
        } else {
            g.fill(0.0);
        }
    }

    let backbone_grads = match backbone.arch {
        Architecture::Linear => vec![flat(dz.t().dot(&batch)), dz.sum_axis(Axis(0)).to_vec()],
        Architecture::Hidden { .. } => {
            let h = hidden.expect("hidden activations");
            let dw2 = dz.t().dot(&h);
            let db2 = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&backbone.matrix(2));
            da.zip_mut_with(&h, |d, &hv| *d *= 1.0 - hv * hv);
            vec![
                flat(da.t().dot(&batch)),
                da.sum_axis(Axis(0)).to_vec(),
                flat(dw2),
                db2.to_vec(),
            ]
        }
    };

    Ok((
        loss,
        Gradients {
            backbone: backbone_grads,
            head: dhead,
        },
        hits as f64 / b as f64,
    ))
}

fn flat(a: Array2<f64>) -> Vec<f64> {
    // `a` is freshly allocated in standard layout by `dot`.
    a.as_standard_layout().iter().copied().collect()
}

fn sgd_step(backbone: &mut Backbone, head: &mut ClassifierHead, grads: &Gradients, lr: f64) -> Result<()> {
    for (l, g) in grads.backbone.iter().enumerate() {
        for (p, gv) in backbone.params.values_mut(l).iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    head.weight.zip_mut_with(&grads.head, |p, &gv| *p -= lr * gv);
    if !backbone.params.all_finite() || head.weight.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sgd step (learning rate too large?)"));
    }
    Ok(())
}

/// One pass over shuffled mini-batches of size `batch_size` (the last batch may
/// be short). Updates both networks in place.
pub fn train_epoch(
    backbone: &mut Backbone,
    head: &mut ClassifierHead,
    samples: ArrayView2<f64>,
    labels: &[usize],
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<EpochFeedback> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::usage(format!(
            "learning rate {lr} must be finite and nonnegative"
        )));
    }
    if samples.nrows() == 0 {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    backbone.check_input(&samples)?;
    check_labels(labels, samples.nrows(), head.num_classes())?;

    let mut order: Vec<usize> = (0..samples.nrows()).collect();
    order.shuffle(&mut seed::rng_for(seed, &[seed::TAG_EPOCH]));

    let mut precisions = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let batch = samples.select(Axis(0), chunk);
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (_, grads, precision) = batch_gradients(backbone, head, batch.view(), &batch_labels)?;
        sgd_step(backbone, head, &grads, lr)?;
        precisions.push(precision);
    }
    let cumulative_avg = precisions.iter().sum::<f64>() / precisions.len() as f64;
    Ok(EpochFeedback {
        batch_precisions: precisions,
        cumulative_avg,
    })
}

/// Normalized embeddings of every sample.
pub fn extract_features(backbone: &Backbone, samples: ArrayView2<f64>) -> Result<Array2<f64>> {
    if samples.nrows() == 0 {
        return Err(Error::usage("cannot extract features from an empty dataset"));
    }
    backbone.embed(samples)
}

/// Applies merge events in order: the surviving row becomes the mean of the
/// two merged rows and the absorbed row is removed.
pub fn resize_classifier(head: &ClassifierHead, merges: &[MergeEvent]) -> Result<ClassifierHead> {
    let mut rows: Vec<Array1<f64>> = head.weight.rows().into_iter().map(|r| r.to_owned()).collect();
    for ev in merges {
        if ev.keep >= ev.absorb || ev.absorb >= rows.len() {
            return Err(Error::usage(format!(
                "merge ({}, {}) invalid for a head with {} rows",
                ev.keep,
                ev.absorb,
                rows.len()
            )));
        }
        let absorbed = rows.remove(ev.absorb);
        let keep = &mut rows[ev.keep];
        keep.zip_mut_with(&absorbed, |a, &b| *a = 0.5 * (*a + b));
    }
    let mut weight = Array2::zeros((rows.len(), head.embedding_dim()));
    for (i, r) in rows.iter().enumerate() {
        weight.slice_mut(s![i, ..]).assign(r);
    }
    Ok(ClassifierHead { weight })
}
