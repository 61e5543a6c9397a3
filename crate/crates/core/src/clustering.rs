//! Bottom-up hierarchical clustering that produces pseudo-labels.
//!
//! Every sample starts as its own cluster. Each clustering round performs `m`
//! pairwise merges, always joining the pair of clusters at minimum linkage
//! distance. Cluster ids are kept contiguous: when cluster `b` is absorbed by
//! `a < b`, every id above `b` shifts down by one. Merge events are reported
//! in that running numbering so the classifier head can replay them.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pairwise merge, in the cluster numbering current at the time of the merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub keep: usize,
    pub absorb: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Minimum distance over member pairs.
    #[default]
    Single,
    /// Mean distance over member pairs.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    assignment: Vec<usize>,
    num_clusters: usize,
    merges_per_round: usize,
    merge_percent: f64,
    exhausted: bool,
}

/// `floor(n * mp)`, with a floor of one merge per round.
pub fn merges_for(n: usize, merge_percent: f64) -> usize {
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    ((n as f64 * merge_percent + 1e-9).floor() as usize).max(1)
}

/// One cluster per sample, merging `floor(n * mp)` (at least 1) per round.
pub fn init_clusters(n: usize, merge_percent: f64) -> Result<ClusterState> {
    if !(merge_percent > 0.0 && merge_percent < 1.0) {
        return Err(Error::usage(format!("merge percent {merge_percent} outside (0, 1)")));
    }
    ClusterState::with_schedule(n, merges_for(n, merge_percent), merge_percent)
}

impl ClusterState {
    /// Fresh state with an explicit per-round merge count, which may be zero.
    pub fn with_schedule(n: usize, merges_per_round: usize, merge_percent: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("clustering needs at least one sample"));
        }
        if !(0.0..1.0).contains(&merge_percent) {
            return Err(Error::usage(format!("merge percent {merge_percent} outside [0, 1)")));
        }
        Ok(ClusterState {
            assignment: (0..n).collect(),
            num_clusters: n,
            merges_per_round,
            merge_percent,
            exhausted: false,
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Current cluster count `M`.
    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn merges_per_round(&self) -> usize {
        self.merges_per_round
    }

    pub fn merge_percent(&self) -> f64 {
        self.merge_percent
    }

    /// Set once a round asked for at least as many merges as clusters remained.
    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }
}

/// Pseudo-labels: the cluster id of every sample.
pub fn labels(state: &ClusterState) -> Vec<usize> {
    state.assignment.clone()
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Runs one clustering round of single-linkage merges.
pub fn cluster_round(
    state: &ClusterState,
    features: ArrayView2<f64>,
    m_override: Option<usize>,
) -> Result<(ClusterState, Vec<MergeEvent>)> {
    cluster_round_with(state, features, m_override, Linkage::Single)
}

/// Runs one clustering round: `m` merges (or `m_override`), clamped to
/// `M - 1` when too few clusters remain, in which case the returned state is
/// flagged exhausted.
pub fn cluster_round_with(
    state: &ClusterState,
    features: ArrayView2<f64>,
    m_override: Option<usize>,
    linkage: Linkage,
) -> Result<(ClusterState, Vec<MergeEvent>)> {
    let n = state.assignment.len();
    if features.nrows() != n {
        return Err(Error::shape(format!(
            "{} feature rows for {} clustered samples",
            features.nrows(),
            n
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cluster_round features"));
    }
    let requested = m_override.unwrap_or(state.merges_per_round);
    let big_m = state.num_clusters;
    if requested == 0 {
        return Ok((state.clone(), Vec::new()));
    }
    let (steps, exhausted) = if requested >= big_m {
        (big_m - 1, true)
    } else {
        (requested, false)
    };

    // Cluster-level distance matrix over the current M clusters.
    let mut dist = vec![f64::INFINITY; big_m * big_m];
    let mut sizes = vec![0usize; big_m];
    for &c in &state.assignment {
        sizes[c] += 1;
    }
    if linkage == Linkage::Average {
        dist.fill(0.0);
    }
    for p in 0..n {
        let cp = state.assignment[p];
        for q in (p + 1)..n {
            let cq = state.assignment[q];
            if cp == cq {
                continue;
            }
            let d = euclidean(features.row(p), features.row(q));
            let (a, b) = (cp.min(cq), cp.max(cq));
            let slot = &mut dist[a * big_m + b];
            match linkage {
                Linkage::Single => *slot = slot.min(d),
                Linkage::Average => *slot += d,
            }
        }
    }
    if linkage == Linkage::Average {
        for a in 0..big_m {
            for b in (a + 1)..big_m {
                dist[a * big_m + b] /= (sizes[a] * sizes[b]) as f64;
            }
        }
    }
    let at = |a: usize, b: usize| if a < b { a * big_m + b } else { b * big_m + a };

    let mut active = vec![true; big_m];
    let mut events = Vec::with_capacity(steps);
    // `parent[c]` is the slot that absorbed slot `c`.
    let mut parent: Vec<usize> = (0..big_m).collect();
    for _ in 0..steps {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for a in (0..big_m).filter(|&a| active[a]) {
            for b in ((a + 1)..big_m).filter(|&b| active[b]) {
                let d = dist[a * big_m + b];
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let rank = |slot: usize| active[..slot].iter().filter(|&&x| x).count();
        events.push(MergeEvent {
            keep: rank(a),
            absorb: rank(b),
        });
        for c in (0..big_m).filter(|&c| active[c] && c != a && c != b) {
            let merged = match linkage {
                Linkage::Single => dist[at(a, c)].min(dist[at(b, c)]),
                Linkage::Average => {
                    let (sa, sb) = (sizes[a] as f64, sizes[b] as f64);
                    (sa * dist[at(a, c)] + sb * dist[at(b, c)]) / (sa + sb)
                }
            };
            dist[at(a, c)] = merged;
        }
        sizes[a] += sizes[b];
        active[b] = false;
        parent[b] = a;
    }

    // Compact surviving slots to [0, M') preserving order.
    let mut new_id = vec![usize::MAX; big_m];
    let mut next = 0;
    for slot in 0..big_m {
        if active[slot] {
            new_id[slot] = next;
            next += 1;
        }
    }
    let resolve = |mut slot: usize| {
        while parent[slot] != slot {
            slot = parent[slot];
        }
        new_id[slot]
    };
    let assignment = state.assignment.iter().map(|&c| resolve(c)).collect();

    Ok((
        ClusterState {
            assignment,
            num_clusters: big_m - steps,
            merges_per_round: state.merges_per_round,
            merge_percent: state.merge_percent,
            exhausted: state.exhausted || exhausted,
        },
        events,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Recomputes every cluster-pair distance from members at every step.
    pub(crate) fn brute_force(features: &Array2<f64>, steps: usize) -> (Vec<MergeEvent>, Vec<usize>) {
        let n = features.nrows();
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut events = Vec::new();
        for _ in 0..steps {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let mut d = f64::INFINITY;
                    for &p in &clusters[a] {
                        for &q in &clusters[b] {
                            let (lo, hi) = (p.min(q), p.max(q));
                            d = d.min(euclidean(features.row(lo), features.row(hi)));
                        }
                    }
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
            let (_, a, b) = best;
            events.push(MergeEvent { keep: a, absorb: b });
            let moved = clusters.remove(b);
            clusters[a].extend(moved);
        }
        let mut labels = vec![0; n];
        for (id, members) in clusters.iter().enumerate() {
            for &i in members {
                labels[i] = id;
            }
        }
        (events, labels)
    }

    fn partition(labels: &[usize]) -> Vec<Vec<usize>> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups.sort();
        groups
    }

    #[test]
    fn init_examples() {
        let s = init_clusters(8, 0.25).unwrap();
        assert_eq!((s.num_clusters(), s.merges_per_round()), (8, 2));
        let s = init_clusters(1, 0.05).unwrap();
        assert_eq!((s.num_clusters(), s.merges_per_round()), (1, 1));
        let s = init_clusters(100, 0.05).unwrap();
        assert_eq!(s.merges_per_round(), 5);
        assert_eq!(100usize.div_ceil(s.merges_per_round()), 20);
        assert_eq!(merges_for(100, 0.29), 29);
        assert!(matches!(init_clusters(8, 0.0), Err(Error::Usage(_))));
        assert!(matches!(init_clusters(8, 1.0), Err(Error::Usage(_))));
        assert!(matches!(init_clusters(0, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn single_sample_round_is_noop() {
        let s = init_clusters(1, 0.5).unwrap();
        let (next, events) = cluster_round(&s, array![[1.0]].view(), None).unwrap();
        assert!(events.is_empty());
        assert_eq!(next.num_clusters(), 1);
        assert!(next.is_exhausted());
    }

    #[test]
    fn zero_override_is_noop() {
        let s = init_clusters(4, 0.5).unwrap();
        let f = array![[0.0], [1.0], [2.0], [3.0]];
        let (next, events) = cluster_round(&s, f.view(), Some(0)).unwrap();
        assert_eq!(next, s);
        assert!(events.is_empty());
    }

    #[test]
    fn one_dimensional_example() {
        let s = init_clusters(4, 0.5).unwrap();
        let f = array![[0.0], [0.1], [5.0], [5.1]];
        let (next, _) = cluster_round(&s, f.view(), Some(2)).unwrap();
        assert_eq!(partition(next.assignment()), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(labels(&next), vec![0, 0, 1, 1]);
    }

    #[test]
    fn eight_sample_schedule() {
        let f = Array2::from_shape_fn((8, 2), |(i, j)| (i * 3 + j) as f64 * 0.37 % 1.9);
        let mut s = init_clusters(8, 0.25).unwrap();
        let mut counts = vec![s.num_clusters()];
        for _ in 0..3 {
            s = cluster_round(&s, f.view(), None).unwrap().0;
            counts.push(s.num_clusters());
        }
        assert_eq!(counts, vec![8, 6, 4, 2]);
        assert!(!s.is_exhausted());
        s = cluster_round(&s, f.view(), None).unwrap().0;
        assert_eq!(s.num_clusters(), 1);
        assert!(s.is_exhausted());
    }

    #[test]
    fn labels_partition_semantics() {
        assert_eq!(labels(&init_clusters(3, 0.3).unwrap()), vec![0, 1, 2]);
        let f = array![[0.0], [10.0], [0.5]];
        let (s, events) = cluster_round(&init_clusters(3, 0.3).unwrap(), f.view(), None).unwrap();
        assert_eq!(events, vec![MergeEvent { keep: 0, absorb: 2 }]);
        let l = labels(&s);
        assert_eq!(l[0], l[2]);
        assert_ne!(l[0], l[1]);
        let mut hist = vec![0; s.num_clusters()];
        for &x in &l {
            hist[x] += 1;
        }
        assert_eq!(hist.iter().sum::<usize>(), 3);
        assert_eq!(hist.iter().filter(|&&c| c > 0).count(), s.num_clusters());
    }

    #[test]
    fn ties_break_on_lowest_pair() {
        // All pairwise distances equal.
        let f = array![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        let (_, events) = cluster_round(&init_clusters(3, 0.3).unwrap(), f.view(), Some(1)).unwrap();
        let (expected, _) = brute_force(&f.to_owned(), 1);
        assert_eq!(events, expected);
    }

    #[test]
    fn row_mismatch_is_shape_error() {
        let s = init_clusters(3, 0.3).unwrap();
        assert!(matches!(
            cluster_round(&s, array![[0.0], [1.0]].view(), None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn average_linkage_separates_blobs() {
        let f = array![[0.0], [0.2], [0.4], [9.0], [9.3]];
        let s = init_clusters(5, 0.5).unwrap();
        let (next, _) = cluster_round_with(&s, f.view(), Some(3), Linkage::Average).unwrap();
        assert_eq!(partition(next.assignment()), vec![vec![0, 1, 2], vec![3, 4]]);
    }

    fn arb_features() -> impl Strategy<Value = Array2<f64>> {
        (2usize..=16, 1usize..=4).prop_flat_map(|(n, v)| {
            prop::collection::vec(-1.0f64..1.0, n * v)
                .prop_map(move |data| Array2::from_shape_vec((n, v), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_over_rounds(f in arb_features(), m in 1usize..5) {
            let n = f.nrows();
            let mut s = ClusterState::with_schedule(n, m, 0.0).unwrap();
            let mut all = Vec::new();
            while s.num_clusters() > 1 {
                let (next, events) = cluster_round(&s, f.view(), None).unwrap();
                all.extend(events);
                s = next;
            }
            let (expected, _) = brute_force(&f, n - 1);
            prop_assert_eq!(all, expected);
        }

        #[test]
        fn count_after_rounds(f in arb_features(), m in 1usize..6, rounds in 0usize..6) {
            let n = f.nrows();
            let mut s = ClusterState::with_schedule(n, m, 0.0).unwrap();
            for _ in 0..rounds {
                s = cluster_round(&s, f.view(), None).unwrap().0;
            }
            prop_assert_eq!(s.num_clusters(), n.saturating_sub(rounds * m).max(1));
            let l = labels(&s);
            prop_assert!(l.iter().all(|&x| x < s.num_clusters()));
            prop_assert_eq!(partition(&l).len(), s.num_clusters());
        }

        #[test]
        fn permutation_equivariant(f in arb_features(), m in 1usize..4, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = f.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::seed::rng_for(seed, &[]));
            let g = f.select(ndarray::Axis(0), &perm);
            let s = ClusterState::with_schedule(n, m, 0.0).unwrap();
            let (a, _) = cluster_round(&s, f.view(), None).unwrap();
            let (b, _) = cluster_round(&s, g.view(), None).unwrap();
            // Map b's labels back to original sample indices.
            let mut back = vec![0; n];
            for (pos, &orig) in perm.iter().enumerate() {
                back[orig] = b.assignment()[pos];
            }
            prop_assert_eq!(partition(a.assignment()), partition(&back));
        }
    }
}
