//! Exact k-nearest-neighbor search over 3D points.
//!
//! Two strategies share one contract: results are the exact `k` nearest
//! points by Euclidean distance, ascending, ties broken by lower point id.
//! Every point-to-query distance computed is counted, so callers can compare
//! measured pairwise work between pipelines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    /// Bucketed k-d tree.
    #[default]
    KdTree,
    /// Scan every stored point for every query.
    Exhaustive,
}

impl std::str::FromStr for SearchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kdtree" | "kd-tree" => Ok(Self::KdTree),
            "exhaustive" | "brute" | "bruteforce" => Ok(Self::Exhaustive),
            other => Err(Error::Config(format!("unknown search strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded max-heap keeping the `k` best candidates seen so far.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn full(&self) -> bool {
        self.heap.len() == self.k
    }

    fn worst_dist2(&self) -> f64 {
        self.heap.peek().map_or(f64::INFINITY, |c| c.dist2)
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.dist2.sqrt(),
            })
            .collect()
    }
}

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug)]
struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &[[f64; 3]]) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..points.len()).collect(),
        };
        tree.build_node(points, 0, points.len());
        tree
    }

    fn build_node(&mut self, points: &[[f64; 3]], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // All points coincide; splitting cannot separate them.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[slice[mid]][axis];

        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(points, start, start + mid);
        let right = self.build_node(points, start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(
        &self,
        points: &[[f64; 3]],
        node: usize,
        query: &[f64; 3],
        best: &mut Best,
        evals: &mut u64,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    *evals += 1;
                    best.offer(Candidate {
                        dist2: dist2(&points[id], query),
                        id,
                    });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(points, near, query, best, evals);
                // Points equal to the split value may live on either side, so a
                // boundary tie must still be visited for the id tie-break.
                if !best.full() || diff * diff <= best.worst_dist2() {
                    self.search(points, far, query, best, evals);
                }
            }
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Immutable exact-KNN index. Queries may run concurrently.
#[derive(Debug)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    tree: Option<KdTree>,
    evals: AtomicU64,
}

impl NeighborIndex {
    pub fn build(points: &[[f64; 3]]) -> Result<Self> {
        Self::build_with(points, SearchStrategy::KdTree)
    }

    pub fn build_with(points: &[[f64; 3]], strategy: SearchStrategy) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteCoordinate {
                index: points
                    .iter()
                    .position(|p| !p.iter().all(|c| c.is_finite()))
                    .unwrap_or(0),
            });
        }
        let tree = match strategy {
            SearchStrategy::KdTree => Some(KdTree::build(points)),
            SearchStrategy::Exhaustive => None,
        };
        Ok(Self {
            points: points.to_vec(),
            tree,
            evals: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn strategy(&self) -> SearchStrategy {
        if self.tree.is_some() {
            SearchStrategy::KdTree
        } else {
            SearchStrategy::Exhaustive
        }
    }

    /// Number of point-to-query distance evaluations performed so far.
    pub fn distance_evaluations(&self) -> u64 {
        self.evals.load(AtomicOrdering::Relaxed)
    }

    /// The `min(k, len)` nearest stored points to `query`, ascending by distance.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !query.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteQuery);
        }
        let mut best = Best::new(k.min(self.points.len()));
        let mut evals = 0u64;
        match &self.tree {
            Some(tree) => tree.search(&self.points, 0, query, &mut best, &mut evals),
            None => {
                for (id, p) in self.points.iter().enumerate() {
                    evals += 1;
                    best.offer(Candidate {
                        dist2: dist2(p, query),
                        id,
                    });
                }
            }
        }
        self.evals.fetch_add(evals, AtomicOrdering::Relaxed);
        Ok(best.into_sorted())
    }

    pub fn knn_batch(&self, queries: &[[f64; 3]], k: usize) -> Result<Vec<Vec<Neighbor>>> {
        queries.iter().map(|q| self.knn(q, k)).collect()
    }
}

/// Reference O(M) scan used by tests as an independent oracle.
#[cfg(test)]
pub(crate) fn brute_force_knn(points: &[[f64; 3]], query: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = ((p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2)).sqrt();
            (i, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect()
    }

    fn ids(r: &[Neighbor]) -> Vec<usize> {
        r.iter().map(|n| n.id).collect()
    }

    #[test]
    fn empty_index_rejected() {
        assert!(matches!(NeighborIndex::build(&[]), Err(Error::EmptyIndex)));
    }

    #[test]
    fn self_query_has_zero_distance() {
        let idx = NeighborIndex::build(&[[1.0, 2.0, 3.0]]).unwrap();
        let r = idx.knn(&[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(r, vec![Neighbor { id: 0, distance: 0.0 }]);
    }

    #[test]
    fn collinear_example() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        for strategy in [SearchStrategy::KdTree, SearchStrategy::Exhaustive] {
            let idx = NeighborIndex::build_with(&pts, strategy).unwrap();
            let r = idx.knn(&[2.2, 0.0, 0.0], 2).unwrap();
            assert_eq!(ids(&r), vec![2, 3]);
            assert!((r[0].distance - 0.2).abs() < 1e-12);
            assert!((r[1].distance - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicates_are_distinct_neighbors() {
        let pts = vec![[0.5; 3], [0.5; 3], [2.0; 3]];
        let idx = NeighborIndex::build(&pts).unwrap();
        let r = idx.knn(&[0.5; 3], 2).unwrap();
        assert_eq!(ids(&r), vec![0, 1]);
    }

    #[test]
    fn many_duplicates_tie_break_by_id() {
        let pts = vec![[1.0; 3]; 40];
        let idx = NeighborIndex::build(&pts).unwrap();
        let r = idx.knn(&[0.0; 3], 5).unwrap();
        assert_eq!(ids(&r), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn grid_ties_match_brute_force() {
        // Integer lattice: lots of exactly equal distances.
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..3 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let idx = NeighborIndex::build(&pts).unwrap();
        for q in [[2.0, 2.0, 1.0], [2.5, 2.5, 1.0], [0.0, 0.0, 0.0]] {
            for k in [1, 4, 7, 19] {
                let got = idx.knn(&q, k).unwrap();
                let want = brute_force_knn(&pts, &q, k);
                assert_eq!(ids(&got), want.iter().map(|w| w.0).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn k_larger_than_len_returns_all() {
        let pts = random_points(5, 1);
        let idx = NeighborIndex::build(&pts).unwrap();
        assert_eq!(idx.knn(&[0.5; 3], 50).unwrap().len(), 5);
    }

    #[test]
    fn rejects_bad_queries() {
        let idx = NeighborIndex::build(&random_points(3, 2)).unwrap();
        assert!(matches!(idx.knn(&[f64::NAN, 0.0, 0.0], 1), Err(Error::NonFiniteQuery)));
        assert!(idx.knn(&[0.0; 3], 0).is_err());
    }

    #[test]
    fn exhaustive_counts_every_pair() {
        let pts = random_points(30, 3);
        let idx = NeighborIndex::build_with(&pts, SearchStrategy::Exhaustive).unwrap();
        idx.knn_batch(&pts[..10], 4).unwrap();
        assert_eq!(idx.distance_evaluations(), 300);
    }

    #[test]
    fn kd_tree_does_less_work_on_large_sets() {
        let pts = random_points(5000, 4);
        let idx = NeighborIndex::build(&pts).unwrap();
        idx.knn_batch(&pts[..100], 8).unwrap();
        assert!(idx.distance_evaluations() < 100 * 5000 / 10);
    }

    #[test]
    fn hundred_random_points_match_brute_force() {
        let pts = random_points(100, 5);
        let idx = NeighborIndex::build(&pts).unwrap();
        let queries = random_points(50, 6);
        for q in &queries {
            let got = idx.knn(q, 8).unwrap();
            let want = brute_force_knn(&pts, q, 8);
            assert_eq!(ids(&got), want.iter().map(|w| w.0).collect::<Vec<_>>());
            for (g, w) in got.iter().zip(&want) {
                assert!((g.distance - w.1).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn exact_against_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..120),
            q in prop::array::uniform3(-6.0f64..6.0),
            k in 1usize..16,
        ) {
            let idx = NeighborIndex::build(&pts).unwrap();
            let got = idx.knn(&q, k).unwrap();
            let want = brute_force_knn(&pts, &q, k);
            prop_assert_eq!(got.len(), k.min(pts.len()));
            prop_assert_eq!(ids(&got), want.iter().map(|w| w.0).collect::<Vec<_>>());
            prop_assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }
}
