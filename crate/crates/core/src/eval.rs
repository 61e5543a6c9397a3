//! Retrieval metrics: CMC rank-k accuracy and mean average precision.
//!
//! Gallery items are ranked by cosine similarity to the query (ties keep
//! gallery order). When camera ids are available, gallery items sharing both
//! identity and camera with the query are ignored for that query. Queries left
//! without any relevant gallery item are dropped from the averages.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub features: Array2<f64>,
    pub identities: Vec<usize>,
    pub camera_ids: Option<Vec<usize>>,
}

impl RetrievalSet {
    pub fn new(features: Array2<f64>, identities: Vec<usize>, camera_ids: Option<Vec<usize>>) -> Result<Self> {
        if features.nrows() != identities.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} identities",
                features.nrows(),
                identities.len()
            )));
        }
        if let Some(cams) = &camera_ids {
            if cams.len() != identities.len() {
                return Err(Error::shape("camera ids and identities differ in length"));
            }
        }
        Ok(RetrievalSet {
            features,
            identities,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Rank-1/5/10 accuracy and mAP in one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RetrievalScores {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

/// Relevance flags of the camera-filtered ranking for one query, or `None`
/// when nothing relevant remains.
fn ranked_relevance(
    query: &RetrievalSet,
    qi: usize,
    gallery: &RetrievalSet,
    gallery_normed: &Array2<f64>,
) -> Option<Vec<bool>> {
    let q = normalized(query.features.row(qi));
    let sims = gallery_normed.dot(&q);
    let qid = query.identities[qi];
    let qcam = query.camera_ids.as_ref().map(|c| c[qi]);

    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&g| {
            let same_cam = match (qcam, &gallery.camera_ids) {
                (Some(qc), Some(gc)) => gc[g] == qc,
                _ => false,
            };
            !(gallery.identities[g] == qid && same_cam)
        })
        .collect();
    // Stable: equal similarities keep gallery order.
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    let rel: Vec<bool> = order.iter().map(|&g| gallery.identities[g] == qid).collect();
    rel.iter().any(|&r| r).then_some(rel)
}

fn normalized(row: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let n = row.dot(&row).sqrt();
    if n > 0.0 {
        &row / n
    } else {
        row.to_owned()
    }
}

fn prepare(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<Array2<f64>> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::usage("query and gallery must be nonempty"));
    }
    if query.features.ncols() != gallery.features.ncols() {
        return Err(Error::shape(format!(
            "query dim {} != gallery dim {}",
            query.features.ncols(),
            gallery.features.ncols()
        )));
    }
    let mut g = gallery.features.clone();
    for mut row in g.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    Ok(g)
}

fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, _) in rel.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (p + 1) as f64;
    }
    sum / hits as f64
}

fn relevance_lists(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<Vec<Vec<bool>>> {
    let g = prepare(query, gallery)?;
    let lists: Vec<Vec<bool>> = (0..query.len())
        .filter_map(|qi| ranked_relevance(query, qi, gallery, &g))
        .collect();
    if lists.is_empty() {
        return Err(Error::NoValidQuery);
    }
    Ok(lists)
}

/// Rank-k accuracy for each requested `k` (must be >= 1).
pub fn cmc(query: &RetrievalSet, gallery: &RetrievalSet, ks: &[usize]) -> Result<Vec<f64>> {
    if ks.contains(&0) {
        return Err(Error::usage("rank k must be at least 1"));
    }
    let lists = relevance_lists(query, gallery)?;
    Ok(cmc_from(&lists, ks))
}

fn cmc_from(lists: &[Vec<bool>], ks: &[usize]) -> Vec<f64> {
    let first_hits: Vec<usize> = lists
        .iter()
        .map(|rel| rel.iter().position(|&r| r).expect("retained queries have a match"))
        .collect();
    ks.iter()
        .map(|&k| first_hits.iter().filter(|&&pos| pos < k).count() as f64 / lists.len() as f64)
        .collect()
}

pub fn map_score(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<f64> {
    let lists = relevance_lists(query, gallery)?;
    Ok(lists.iter().map(|r| average_precision(r)).sum::<f64>() / lists.len() as f64)
}

/// Rank-1/5/10 and mAP from a single ranking pass.
pub fn evaluate(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<RetrievalScores> {
    let lists = relevance_lists(query, gallery)?;
    let ranks = cmc_from(&lists, &[1, 5, 10]);
    let map = lists.iter().map(|r| average_precision(r)).sum::<f64>() / lists.len() as f64;
    Ok(RetrievalScores {
        rank1: ranks[0],
        rank5: ranks[1],
        rank10: ranks[2],
        map,
    })
}
