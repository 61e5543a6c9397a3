//! Parameter-set algebra used by the server: weighted averaging, per-layer
//! distances, min-max normalization and EMA blending.
//!
//! A [`ParamSet`] is an ordered list of named layers, each a flat vector of
//! `f64`. Two sets are *compatible* when they have the same layer names in the
//! same order and identical per-layer lengths; every binary operation here
//! checks that first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Layer {
            name: name.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    /// Builds a parameter set, rejecting empty sets, duplicate layer names
    /// and non-finite values.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::usage("a parameter set needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::usage(format!("duplicate layer name {:?}", layer.name)));
            }
            if layer.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("ParamSet::new"));
            }
        }
        Ok(ParamSet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Number of layers `L`.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable view of one layer's values. Callers must keep values finite.
    pub(crate) fn values_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].values
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.values.len() == b.values.len())
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "parameter sets differ in layout: [{}] vs [{}]",
                self.describe(),
                other.describe()
            )))
        }
    }

    fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}:{}", l.name, l.values.len()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Builds a set with this set's layout from a coordinate-wise map.
    /// The map must produce finite values.
    fn map_layers(&self, f: impl Fn(usize, usize) -> f64, op: &'static str) -> Result<ParamSet> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let values: Vec<f64> = (0..layer.values.len()).map(|i| f(l, i)).collect();
                Layer::new(layer.name.clone(), values)
            })
            .collect::<Vec<_>>();
        if layers.iter().any(|l| l.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(op));
        }
        Ok(ParamSet { layers })
    }
}

impl TryFrom<Vec<Layer>> for ParamSet {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        ParamSet::new(layers)
    }
}

impl From<ParamSet> for Vec<Layer> {
    fn from(p: ParamSet) -> Self {
        p.layers
    }
}

/// Which per-layer distance feeds the personalization weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDistance {
    /// `||a_l - b_l||^2`
    #[default]
    Squared,
    /// `||a_l - b_l||`
    Euclidean,
}

/// Weighted mean of compatible parameter sets, each weight normalized by the
/// weight sum. Zero-weight entries contribute nothing.
pub fn weighted_average(entries: &[(&ParamSet, f64)]) -> Result<ParamSet> {
    let (first, _) = entries
        .first()
        .ok_or_else(|| Error::usage("weighted_average over an empty list"))?;
    for (p, w) in entries {
        first.check_compatible(p)?;
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::usage(format!("weight {w} is not a nonnegative finite number")));
        }
    }
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::usage("weights sum to zero"));
    }
    let live: Vec<(&ParamSet, f64)> = entries
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(p, w)| (*p, w / total))
        .collect();

    first.map_layers(
        |l, i| {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (p, share) in &live {
                let x = p.layers[l].values[i];
                acc += share * x;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            // Shares may sum to 1 +- ulp; keep the result inside the envelope.
            acc.clamp(lo, hi)
        },
        "weighted_average",
    )
}

/// Per-layer squared Euclidean distance between two compatible sets.
pub fn layer_distances(a: &ParamSet, b: &ParamSet) -> Result<Vec<f64>> {
    layer_distances_with(a, b, LayerDistance::Squared)
}

pub fn layer_distances_with(a: &ParamSet, b: &ParamSet, kind: LayerDistance) -> Result<Vec<f64>> {
    a.check_compatible(b)?;
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            let sq: f64 = la.values.iter().zip(&lb.values).map(|(x, y)| (x - y) * (x - y)).sum();
            match kind {
                LayerDistance::Squared => sq,
                LayerDistance::Euclidean => sq.sqrt(),
            }
        })
        .collect())
}

/// Min-max normalizes the layer distances to `[0, 1]` and returns their mean.
///
/// When every distance is equal the range is degenerate: all-zero distances
/// give `0`, equal nonzero distances normalize to `0.5` each.
pub fn compute_mu(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::usage("compute_mu over an empty distance vector"));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::usage("distances must be finite and nonnegative"));
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(if hi == 0.0 { 0.0 } else { 0.5 });
    }
    let range = hi - lo;
    let sum: f64 = distances.iter().map(|d| (d - lo) / range).sum();
    Ok((sum / distances.len() as f64).clamp(0.0, 1.0))
}

/// `mu * local + (1 - mu) * global`, coordinate-wise.
pub fn ema_update(local: &ParamSet, global: &ParamSet, mu: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::usage(format!("EMA weight {mu} outside [0, 1]")));
    }
    local.check_compatible(global)?;
    local.map_layers(
        |l, i| {
            let a = local.layers[l].values[i];
            let b = global.layers[l].values[i];
            (mu * a + (1.0 - mu) * b).clamp(a.min(b), a.max(b))
        },
        "ema_update",
    )
}
