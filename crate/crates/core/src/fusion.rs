//! Cross-scale feature fusion.
//!
//! Each feature row of the current scale gathers the features of its `k_fuse`
//! nearest rows in the store of lower-scale features, maps every gathered
//! vector through a shared pointwise linear layer (a width-1 1-D convolution)
//! followed by a rectifier, max-pools over the neighbors, concatenates the
//! result with its own feature vector and projects `2F -> F` with a linear
//! layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMatrix;
use crate::error::{Error, Result};
use crate::spatial::{NeighborIndex, SearchStrategy};
use crate::tensor::{Linear, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k_fuse: usize,
    pub feature_dim: usize,
}

impl FusionConfig {
    pub fn new(k_fuse: usize, feature_dim: usize) -> Result<Self> {
        if k_fuse == 0 {
            return Err(Error::Config("k_fuse must be at least 1".into()));
        }
        if feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        Ok(Self { k_fuse, feature_dim })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    /// Shared per-neighbor map, `F -> F`.
    pub pointwise: Linear,
    /// `[pooled | current] (2F) -> F`.
    pub merge: Linear,
}

impl FusionWeights {
    /// Random pointwise map; the merge layer starts as the pass-through on the
    /// current half, so an untrained block returns `current` unchanged.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            pointwise: Linear::init(dim, dim, rng),
            merge: Self::passthrough(dim).merge,
        }
    }

    /// Every weight drawn at random, including the pooled half of the merge.
    pub fn random<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            pointwise: Linear::init(dim, dim, rng),
            merge: Linear::init(2 * dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            pointwise: Linear::zeros(dim, dim),
            merge: Linear::zeros(2 * dim, dim),
        }
    }

    /// Weights under which fusion returns the current features unchanged.
    pub fn passthrough(dim: usize) -> Self {
        let mut merge = Linear::zeros(2 * dim, dim);
        for c in 0..dim {
            merge.weight[c * 2 * dim + dim + c] = 1.0;
        }
        Self {
            pointwise: Linear::identity(dim),
            merge,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.pointwise.out_dim
    }
}

/// Running concatenation of the (fused) features of every processed scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureStore {
    feature_dim: usize,
    positions: Vec<[f64; 3]>,
    features: Matrix,
    scale_ids: Vec<usize>,
}

impl FusedFeatureStore {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            positions: Vec::new(),
            features: Matrix::zeros(0, feature_dim),
            scale_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Originating scale of each row.
    pub fn scale_ids(&self) -> &[usize] {
        &self.scale_ids
    }

    pub fn max_scale(&self) -> Option<usize> {
        self.scale_ids.last().copied()
    }

    /// Append the rows of `fused`. Scales must arrive in increasing order.
    pub fn push(&mut self, fused: &FeatureMatrix) -> Result<()> {
        if fused.features.cols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "store holds {} features, got {}",
                self.feature_dim,
                fused.features.cols()
            )));
        }
        if let Some(last) = self.max_scale() {
            if fused.scale_id <= last {
                return Err(Error::Store(format!(
                    "scale {} appended after scale {last}",
                    fused.scale_id
                )));
            }
        }
        self.positions.extend_from_slice(&fused.positions);
        let mut data = std::mem::take(&mut self.features).data().to_vec();
        data.extend_from_slice(fused.features.data());
        self.features = Matrix::from_vec(self.positions.len(), self.feature_dim, data);
        self.scale_ids
            .extend(std::iter::repeat_n(fused.scale_id, fused.len()));
        Ok(())
    }

    /// Rows permuted by `order` (row `i` of the result is row `order[i]`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            feature_dim: self.feature_dim,
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.select_rows(order),
            scale_ids: order.iter().map(|&i| self.scale_ids[i]).collect(),
        }
    }
}

/// Functional form of [`FusedFeatureStore::push`].
pub fn extend_store(store: &FusedFeatureStore, fused: &FeatureMatrix) -> Result<FusedFeatureStore> {
    let mut next = store.clone();
    next.push(fused)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    /// Store row that won the max-pool, per `(row, channel)`; `None` when the
    /// rectifier clipped the maximum to zero.
    winners: Vec<Option<usize>>,
    merge_input: Matrix,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: FeatureMatrix,
    pub cache: Option<FusionCache>,
    pub distance_evals: u64,
}

pub fn fuse(
    store: &FusedFeatureStore,
    current: &FeatureMatrix,
    weights: &FusionWeights,
    cfg: &FusionConfig,
    search: SearchStrategy,
    record: bool,
) -> Result<FusionOutput> {
    if store.is_empty() {
        return Err(Error::Store("fusion needs a non-empty store".into()));
    }
    let dim = current.features.cols();
    if store.feature_dim() != dim || weights.feature_dim() != dim || cfg.feature_dim != dim {
        return Err(Error::Shape(format!(
            "fusion feature dims disagree: store {}, current {dim}, weights {}, config {}",
            store.feature_dim(),
            weights.feature_dim(),
            cfg.feature_dim
        )));
    }
    if cfg.k_fuse == 0 {
        return Err(Error::Config("k_fuse must be at least 1".into()));
    }

    let index = NeighborIndex::build_with(store.positions(), search)?;
    let rows = current.len();
    let mut merge_input = Matrix::zeros(rows, 2 * dim);
    let mut winners = if record {
        vec![None; rows * dim]
    } else {
        Vec::new()
    };
    let mut pre = vec![0.0; dim];
    let mut best = vec![0.0; dim];
    let mut arg = vec![0usize; dim];

    for j in 0..rows {
        let nbrs = index.knn(&current.positions[j], cfg.k_fuse)?;
        best.fill(f64::NEG_INFINITY);
        for n in &nbrs {
            weights
                .pointwise
                .forward_row(store.features().row(n.id), &mut pre);
            for c in 0..dim {
                if pre[c] > best[c] {
                    best[c] = pre[c];
                    arg[c] = n.id;
                }
            }
        }
        let row = merge_input.row_mut(j);
        for c in 0..dim {
            row[c] = best[c].max(0.0);
            if record && best[c] > 0.0 {
                winners[j * dim + c] = Some(arg[c]);
            }
        }
        row[dim..].copy_from_slice(current.features.row(j));
    }

    let features = weights.merge.forward(&merge_input);
    Ok(FusionOutput {
        fused: FeatureMatrix {
            positions: current.positions.clone(),
            features,
            scale_id: current.scale_id,
        },
        cache: record.then_some(FusionCache {
            winners,
            merge_input,
        }),
        distance_evals: index.distance_evaluations(),
    })
}

/// Accumulates fusion parameter gradients into `grad` and returns the
/// gradient with respect to the current-scale features. The store is treated
/// as constant input (lower scales are frozen).
pub fn fuse_backward(
    weights: &FusionWeights,
    cache: &FusionCache,
    store: &FusedFeatureStore,
    d_out: &Matrix,
    grad: &mut FusionWeights,
) -> Matrix {
    let dim = weights.feature_dim();
    let d_in = weights
        .merge
        .backward(&cache.merge_input, d_out, &mut grad.merge);
    let (d_pooled, d_current) = d_in.hsplit(dim);
    for j in 0..d_pooled.rows() {
        for c in 0..dim {
            let g = d_pooled.get(j, c);
            if g == 0.0 {
                continue;
            }
            if let Some(winner) = cache.winners[j * dim + c] {
                grad.pointwise.bias[c] += g;
                let f = store.features().row(winner);
                let gw = &mut grad.pointwise.weight[c * dim..(c + 1) * dim];
                for (w, &x) in gw.iter_mut().zip(f) {
                    *w += g * x;
                }
            }
        }
    }
    d_current
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(positions: Vec<[f64; 3]>, rows: Vec<Vec<f64>>, scale_id: usize) -> FeatureMatrix {
        FeatureMatrix {
            positions,
            features: Matrix::from_rows(&rows),
            scale_id,
        }
    }

    fn random_fm(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale_id: usize) -> FeatureMatrix {
        FeatureMatrix {
            positions: (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
            features: Matrix::from_vec(
                n,
                dim,
                (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ),
            scale_id,
        }
    }

    /// Straightforward evaluation: sort all store rows by distance, loop.
    fn reference_fuse(
        store: &FusedFeatureStore,
        current: &FeatureMatrix,
        w: &FusionWeights,
        k: usize,
    ) -> Matrix {
        let dim = current.features.cols();
        let mut out = Matrix::zeros(current.len(), dim);
        for j in 0..current.len() {
            let q = current.positions[j];
            let mut order: Vec<(f64, usize)> = store
                .positions()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let d: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                    (d, i)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut pooled = vec![0.0f64; dim];
            for &(_, i) in order.iter().take(k) {
                let f = store.features().row(i);
                for c in 0..dim {
                    let mut v = w.pointwise.bias[c];
                    for t in 0..dim {
                        v += w.pointwise.weight[c * dim + t] * f[t];
                    }
                    pooled[c] = pooled[c].max(v.max(0.0));
                }
            }
            let cat: Vec<f64> = pooled
                .iter()
                .chain(current.features.row(j))
                .copied()
                .collect();
            for o in 0..dim {
                let mut v = w.merge.bias[o];
                for t in 0..2 * dim {
                    v += w.merge.weight[o * 2 * dim + t] * cat[t];
                }
                out.set(j, o, v);
            }
        }
        out
    }

    #[test]
    fn zero_merge_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = FusedFeatureStore::new(3);
        store.push(&random_fm(&mut rng, 5, 3, 1)).unwrap();
        let cur = random_fm(&mut rng, 4, 3, 2);
        let mut w = FusionWeights::random(3, &mut rng);
        w.merge = Linear::zeros(6, 3);
        let cfg = FusionConfig::new(2, 3).unwrap();
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false).unwrap();
        assert!(out.fused.features.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.fused.positions, cur.positions);
    }

    #[test]
    fn single_neighbor_average_by_hand() {
        let mut store = FusedFeatureStore::new(2);
        store
            .push(&fm(vec![[0.5, 0.5, 0.5], [3.0, 0.0, 0.0]], vec![vec![0.4, 2.0], vec![9.0, 9.0]], 1))
            .unwrap();
        let cur = fm(vec![[0.5, 0.5, 0.5]], vec![vec![1.0, -1.0]], 2);
        let mut w = FusionWeights::passthrough(2);
        w.merge = Linear::zeros(4, 2);
        for c in 0..2 {
            w.merge.weight[c * 4 + c] = 0.5;
            w.merge.weight[c * 4 + 2 + c] = 0.5;
        }
        let cfg = FusionConfig::new(1, 2).unwrap();
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false).unwrap();
        assert!((out.fused.features.get(0, 0) - 0.7).abs() < 1e-12);
        assert!((out.fused.features.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_on_three_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = FusedFeatureStore::new(4);
        store.push(&random_fm(&mut rng, 3, 4, 1)).unwrap();
        let cur = random_fm(&mut rng, 6, 4, 2);
        let w = FusionWeights::random(4, &mut rng);
        let cfg = FusionConfig::new(3, 4).unwrap();
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false).unwrap();
        let want = reference_fuse(&store, &cur, &w, 3);
        for (a, b) in out.fused.features.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn passthrough_reduces_to_current() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = FusedFeatureStore::new(5);
        store.push(&random_fm(&mut rng, 20, 5, 1)).unwrap();
        let cur = random_fm(&mut rng, 7, 5, 2);
        let cfg = FusionConfig::new(4, 5).unwrap();
        let out = fuse(&store, &cur, &FusionWeights::passthrough(5), &cfg, SearchStrategy::KdTree, false)
            .unwrap();
        assert_eq!(out.fused.features, cur.features);
    }

    #[test]
    fn fresh_weights_return_current() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = FusedFeatureStore::new(3);
        store.push(&random_fm(&mut rng, 9, 3, 1)).unwrap();
        let cur = random_fm(&mut rng, 5, 3, 2);
        let w = FusionWeights::init(3, &mut rng);
        assert_eq!(w.merge, FusionWeights::passthrough(3).merge);
        assert_ne!(w.pointwise, Linear::identity(3));
        let cfg = FusionConfig::new(2, 3).unwrap();
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false).unwrap();
        assert_eq!(out.fused.features, cur.features);
    }

    #[test]
    fn small_store_uses_all_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = FusedFeatureStore::new(3);
        store.push(&random_fm(&mut rng, 2, 3, 1)).unwrap();
        let cur = random_fm(&mut rng, 3, 3, 2);
        let w = FusionWeights::random(3, &mut rng);
        let cfg = FusionConfig::new(8, 3).unwrap();
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false).unwrap();
        let want = reference_fuse(&store, &cur, &w, 8);
        assert_eq!(out.fused.features.rows(), 3);
        for (a, b) in out.fused.features.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_store_and_dim_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cur = random_fm(&mut rng, 3, 3, 2);
        let w = FusionWeights::random(3, &mut rng);
        let cfg = FusionConfig::new(2, 3).unwrap();
        assert!(matches!(
            fuse(&FusedFeatureStore::new(3), &cur, &w, &cfg, SearchStrategy::KdTree, false),
            Err(Error::Store(_))
        ));
        let mut store = FusedFeatureStore::new(4);
        store.push(&random_fm(&mut rng, 3, 4, 1)).unwrap();
        assert!(matches!(
            fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn store_extension_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a1 = random_fm(&mut rng, 4, 2, 1);
        let a2 = random_fm(&mut rng, 6, 2, 2);
        let s1 = extend_store(&FusedFeatureStore::new(2), &a1).unwrap();
        assert_eq!(s1.len(), 4);
        assert_eq!(s1.features(), &a1.features);
        let s2 = extend_store(&s1, &a2).unwrap();
        assert_eq!(s2.len(), 10);
        assert_eq!(s2.scale_ids(), &[1, 1, 1, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(s2.features().row(4), a2.features.row(0));
        assert!(matches!(extend_store(&s2, &a1), Err(Error::Store(_))));
        assert!(matches!(extend_store(&s2, &a2), Err(Error::Store(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 3;
        let mut store = FusedFeatureStore::new(dim);
        store.push(&random_fm(&mut rng, 9, dim, 1)).unwrap();
        let cur = random_fm(&mut rng, 5, dim, 2);
        let w = FusionWeights::random(dim, &mut rng);
        let cfg = FusionConfig::new(3, dim).unwrap();
        let coef = Matrix::from_vec(5, dim, (0..5 * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let loss = |w: &FusionWeights, cur: &FeatureMatrix| -> f64 {
            let out = fuse(&store, cur, w, &cfg, SearchStrategy::KdTree, false).unwrap();
            out.fused.features.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
        };
        let out = fuse(&store, &cur, &w, &cfg, SearchStrategy::KdTree, true).unwrap();
        let mut grad = FusionWeights::zeros(dim);
        let d_cur = fuse_backward(&w, out.cache.as_ref().unwrap(), &store, &coef, &mut grad);
        let h = 1e-6;
        for i in 0..w.pointwise.weight.len() {
            let mut p = w.clone();
            p.pointwise.weight[i] += h;
            let mut m = w.clone();
            m.pointwise.weight[i] -= h;
            let fd = (loss(&p, &cur) - loss(&m, &cur)) / (2.0 * h);
            assert!((fd - grad.pointwise.weight[i]).abs() < 1e-7);
        }
        for i in 0..cur.features.data().len() {
            let mut p = cur.clone();
            p.features.data_mut()[i] += h;
            let mut m = cur.clone();
            m.features.data_mut()[i] -= h;
            let fd = (loss(&w, &p) - loss(&w, &m)) / (2.0 * h);
            assert!((fd - d_cur.data()[i]).abs() < 1e-7);
        }
    }
}
